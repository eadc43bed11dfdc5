import math

import numpy as np
import pytest

from rfnet.corpus import generate_dataset
from rfnet.inference import BANNED, RFNetStepper, beam_search, caption_split, greedy_decode
from rfnet.model import END, PAD, START, EncoderOutput, FusionConfig, RFNet, View
from rfnet.numerics import Rng


def random_model(seed, V=5, scale=1.0, M=2, batch=1):
    """Tiny model with all weights redrawn at ``scale`` so step distributions are far from uniform."""
    cfg = FusionConfig(view_dims=(3,) * M, vocab_size=V, n_frequent=max(1, V - 4), T1=1, T2=1, s=4, dropout_p=0.0)
    model = RFNet.create(cfg, Rng(seed))
    g = np.random.default_rng(seed)
    for p in model.params.values():
        p.data[...] = g.normal(scale=scale, size=p.shape)
    enc = EncoderOutput([View(g.normal(size=(batch, 3)), g.normal(size=(batch, 2, 3))) for _ in range(M)])
    return model, enc


def enumerate_best(model, enc, max_len):
    """Exhaustive search over every sequence the decoders can produce within ``max_len`` steps."""
    sm = RFNetStepper(model, enc)
    best = (-math.inf, None)

    def rec(state, tok, seq, lp):
        nonlocal best
        logp, nxt = sm.step(state, np.array([tok]))
        for t in np.flatnonzero(np.isfinite(logp[0])):
            score = lp + logp[0, t]
            if t == END or len(seq) + 1 == max_len:
                cand = (score, seq if t == END else seq + [int(t)])
                if cand[0] > best[0]:
                    best = cand
            else:
                rec(nxt, t, seq + [int(t)], score)

    rec(sm.start(), START, [], 0.0)
    return best


class ToyStepper:
    """Hand-set step distributions over tokens 0=END, 1=a, 2=b, 3=c, 4=d (start token 5)."""

    batch_size = 1
    end_id = 0
    start_id = 5
    table = {
        5: [0.0, 0.6, 0.4, 0.0, 0.0],
        1: [0.3, 0.0, 0.0, 0.35, 0.35],
        2: [0.9, 0.0, 0.0, 0.05, 0.05],
        3: [1.0, 0.0, 0.0, 0.0, 0.0],
        4: [1.0, 0.0, 0.0, 0.0, 0.0],
    }

    def start(self):
        return np.zeros(1)

    def step(self, state, tokens):
        with np.errstate(divide="ignore"):
            logp = np.log(np.array([self.table[int(t)] for t in tokens]))
        return logp, np.zeros(len(tokens))

    def select(self, state, idx):
        return state[np.asarray(idx)]


def test_toy_beam_prefers_b():
    best, kbest = beam_search(ToyStepper(), beam_k=2, max_len=3)
    assert best == [2]
    assert abs(math.exp(kbest[0][1]) - 0.36) < 1e-12
    assert math.exp(kbest[1][1]) < 0.36
    # greedy commits to "a" and ends up with a worse caption
    assert greedy_decode(ToyStepper(), max_len=3) == [[1, 3]]


def test_toy_enumeration_agrees():
    seqs = {(1,): 0.6 * 0.3, (2,): 0.4 * 0.9, (1, 3): 0.6 * 0.35, (1, 4): 0.6 * 0.35, (2, 3): 0.02, (2, 4): 0.02}
    assert max(seqs, key=seqs.get) == (2,)
    best, _ = beam_search(ToyStepper(), beam_k=6, max_len=3)
    assert tuple(best) == (2,)


@pytest.mark.parametrize("seed", range(100))
def test_beam1_is_greedy(seed):
    g = np.random.default_rng(seed)
    model, enc = random_model(seed, V=int(g.integers(5, 12)), scale=float(g.choice([0.1, 1.0, 3.0])))
    assert beam_search(model, enc, beam_k=1, max_len=8)[0] == greedy_decode(model, enc, max_len=8)[0]


@pytest.mark.parametrize("seed", range(100))
def test_beam4_matches_enumeration(seed):
    V = 5 if seed % 2 else 4
    model, enc = random_model(1000 + seed, V=V, scale=[0.1, 1.0, 2.0][seed % 3])
    best, kbest = beam_search(model, enc, beam_k=4, max_len=4)
    score, seq = enumerate_best(model, enc, 4)
    assert best == seq and abs(kbest[0][1] - score) < 1e-12


@pytest.mark.parametrize("seed", range(30))
def test_wider_beam_never_worse(seed):
    model, enc = random_model(2000 + seed, V=7, scale=1.5)
    scores = [beam_search(model, enc, beam_k=k, max_len=6)[1][0][1] for k in range(1, 7)]
    assert all(b >= a - 1e-12 for a, b in zip(scores, scores[1:]))


def test_kbest_sorted_nonpositive_and_distinct():
    for seed in range(10):
        model, enc = random_model(seed, V=8)
        _, kbest = beam_search(model, enc, beam_k=5, max_len=5)
        lps = [lp for _, lp in kbest]
        assert lps == sorted(lps, reverse=True) and all(lp <= 0 for lp in lps)
        assert len({tuple(t) for t, _ in kbest}) == len(kbest)


def test_end_bias_gives_empty_caption():
    model, enc = random_model(3, V=9)
    model.params["out.b"].data[END] += 100.0
    assert greedy_decode(model, enc) == [[]]
    assert beam_search(model, enc, beam_k=3)[0] == []


def test_banned_tokens_never_emitted():
    model, enc = random_model(4, V=9, batch=5)
    model.params["out.b"].data[[PAD, START]] += 100.0
    model.params["out.b"].data[END] -= 100.0
    for cap in greedy_decode(model, enc, max_len=6):
        assert len(cap) == 6 and not set(cap) & set(BANNED)


def test_greedy_deterministic_and_batched_rows_match():
    model, enc = random_model(5, V=10, batch=4)
    a = greedy_decode(model, enc, max_len=7)
    assert a == greedy_decode(model, enc, max_len=7)
    for i in range(4):
        row = EncoderOutput([View(v.a0[i : i + 1], v.A[i : i + 1]) for v in enc.views])
        assert greedy_decode(model, row, max_len=7)[0] == a[i]


def test_greedy_respects_max_len_and_validates():
    model, enc = random_model(6, V=10)
    model.params["out.b"].data[END] -= 100.0
    assert len(greedy_decode(model, enc, max_len=3)[0]) == 3
    with pytest.raises(ValueError):
        greedy_decode(model, enc, max_len=0)
    with pytest.raises(ValueError):
        beam_search(model, enc, beam_k=0)


def test_caption_split_greedy_and_beam():
    ds = generate_dataset(30, seed=2)
    cfg = FusionConfig(view_dims=ds.view_dims, vocab_size=len(ds.vocab), n_frequent=ds.n_frequent, T1=1, T2=1, s=8)
    model = RFNet.create(cfg, Rng(0))
    exs = ds.splits["val"]
    greedy = caption_split(model, exs, beam_k=1, max_len=5, batch_size=2)
    assert greedy == [greedy_decode(model, ex.enc, 5) for ex in exs]
    beams = caption_split(model, exs, beam_k=2, max_len=5)
    assert len(beams) == len(exs) and all(len(c) <= 5 for c in beams)
