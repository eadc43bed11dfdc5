"""Greedy and beam-search caption generation.

Both decoders run against a *step model*: an object with

* ``start()`` returning the initial decoder state for a batch,
* ``step(state, tokens)`` returning ``(log_probs, new_state)`` where
  ``log_probs`` is a ``(batch, V)`` array,
* ``select(state, idx)`` reindexing the batch axis,

plus ``batch_size`` and ``end_id`` attributes.  :class:`RFNetStepper` adapts
a trained model and an encoder output; tests plug in hand-built models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .cells import LstmState
from .model import END, PAD, START, EncoderOutput, RFNet
from .numerics import Tensor

BANNED = (PAD, START)


class RFNetStepper:
    def __init__(self, model: RFNet, enc: EncoderOutput):
        self.model = model
        enc = enc.as_batch()
        if len(enc.views) != model.cfg.M:
            enc = enc.select(model.cfg.active_views)
        self.enc = enc
        self.batch_size = enc.views[0].A.shape[0]
        self.end_id = END
        self.start_id = START

    def start(self):
        with nx.no_tape():
            thoughts = self.model.fuse(self.enc)
            ctx = self.model.prepare_decoder(thoughts)
        return (ctx, thoughts.state)

    def step(self, state, tokens):
        ctx, lstm_state = state
        with nx.no_tape():
            logits, new = self.model.decoder_step(ctx, lstm_state, np.asarray(tokens))
        logp = _masked_log_softmax(logits.data)
        return logp, (ctx, new)

    def select(self, state, idx):
        ctx, st = state
        idx = np.asarray(idx)
        return ctx.select(idx), LstmState(Tensor(st.h.data[idx]), Tensor(st.c.data[idx]))


def _masked_log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.copy()
    x[..., list(BANNED)] = -np.inf
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _stepper(model, enc):
    return RFNetStepper(model, enc) if isinstance(model, RFNet) else model


def greedy_decode(model, enc: EncoderOutput | None = None, max_len: int = 16):
    """Per-step argmax (lowest id on ties) until END or ``max_len`` tokens.

    Returns one token list per batch row, START/END stripped.  An unbatched
    encoder output gives a single list.
    """
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    sm = _stepper(model, enc)
    n = sm.batch_size
    state = sm.start()
    tokens = np.full(n, getattr(sm, "start_id", START), dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    out = [[] for _ in range(n)]
    for _ in range(max_len):
        logp, state = sm.step(state, tokens)
        tokens = np.argmax(logp, axis=-1)
        for i in np.flatnonzero(~done):
            if tokens[i] == sm.end_id:
                done[i] = True
            else:
                out[i].append(int(tokens[i]))
        if done.all():
            break
    if enc is not None and isinstance(model, RFNet) and not enc.batched:
        return out[0]
    return out


@dataclass
class BeamHypothesis:
    tokens: tuple
    logprob: float
    row: int  # index into the stepper's batch of live states
    finished: bool = False


def beam_search(model, enc: EncoderOutput | None = None, beam_k: int = 3, max_len: int = 16):
    """Length-unnormalised beam search over a single input.

    Returns ``(best_tokens, kbest)`` where ``kbest`` is a list of
    ``(tokens, logprob)`` sorted best first.  Hypotheses that emit END are
    frozen and compete with whatever is alive when the search stops.  Ties
    in score go to the lexicographically smaller token sequence.
    """
    if beam_k < 1:
        raise ValueError("beam_k must be at least 1")
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    sm = _stepper(model, enc)
    if sm.batch_size != 1:
        raise ValueError("beam_search decodes one input at a time")
    state = sm.start()
    alive = [BeamHypothesis((), 0.0, 0)]
    finished: list = []
    start_id = getattr(sm, "start_id", START)
    for t in range(max_len):
        last = np.array([h.tokens[-1] if h.tokens else start_id for h in alive], dtype=np.int64)
        logp, state = sm.step(state, last)
        cands = []
        for i, h in enumerate(alive):
            row = logp[i]
            for tok in np.flatnonzero(np.isfinite(row)):
                cands.append((h.logprob + float(row[tok]), h.tokens + (int(tok),), i))
        cands.sort(key=lambda c: (-c[0], c[1]))
        nxt = []
        for score, toks, parent in cands[:beam_k]:
            if toks[-1] == sm.end_id:
                finished.append(BeamHypothesis(toks[:-1], score, -1, True))
            else:
                nxt.append(BeamHypothesis(toks, score, parent))
        if not nxt:
            alive = []
            break
        state = sm.select(state, [h.row for h in nxt])
        alive = [BeamHypothesis(h.tokens, h.logprob, j) for j, h in enumerate(nxt)]
        best_done = max((h.logprob for h in finished), default=-np.inf)
        if best_done > max(h.logprob for h in alive):
            break
    pool = [(h.tokens, h.logprob) for h in finished] + [(h.tokens, h.logprob) for h in alive]
    pool.sort(key=lambda c: (-c[1], c[0]))
    kbest = [(list(toks), lp) for toks, lp in pool[:beam_k]]
    return kbest[0][0], kbest


def caption_split(model: RFNet, examples, beam_k: int = 1, max_len: int = 16, batch_size: int = 100) -> list:
    """Decode a list of examples; greedy when ``beam_k == 1``."""
    out = []
    if beam_k == 1:
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo : lo + batch_size]
            enc = EncoderOutput.stack([ex.enc for ex in chunk])
            out.extend(greedy_decode(model, enc, max_len))
    else:
        for ex in examples:
            out.append(beam_search(model, ex.enc, beam_k, max_len)[0])
    return out
