import math
from fractions import Fraction
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rfnet import checkpoint as ckpt
from rfnet import numerics as nx
from rfnet.corpus import generate_dataset
from rfnet.model import END, FusionConfig, RFNet
from rfnet.numerics import NonFiniteError, Rng, Tape
from rfnet.trainer import (
    EpochRecord,
    TrainConfig,
    TrainingLog,
    _batch_enc,
    finetune_rl,
    lr_at,
    self_critical_loss,
    sequence_logprob,
    ss_probability,
    train_xe,
)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(40, seed=1, min_count=1, n_frequent=20)


def small_model(ds, seed=0, discriminative=True, dropout=0.3):
    cfg = FusionConfig(view_dims=ds.view_dims, vocab_size=len(ds.vocab), n_frequent=ds.n_frequent,
                       T1=1, T2=1, s=8, dropout_p=dropout, discriminative=discriminative)
    return RFNet.create(cfg, Rng(seed))


def quick(**kw):
    base = dict(batch_size=8, max_epochs=2, max_len=8, lr_xe=2e-3, ss_ramp=10.0)
    base.update(kw)
    return TrainConfig(**base)


# --- schedules ---------------------------------------------------------------


@pytest.mark.parametrize("epoch,want", [(0, 0.0), (3, 0.03), (6, 0.06), (10, 0.10), (50, 0.25), (100, 0.25)])
def test_ss_probability_examples(epoch, want):
    assert ss_probability(epoch) == want


@pytest.mark.parametrize("epoch,power", [(0, 0), (3, 1), (6, 2), (10, 3), (50, 16), (100, 33)])
def test_lr_at_examples(epoch, power):
    got = lr_at(epoch, TrainConfig())
    assert got == float(Fraction(5, 10000) * Fraction(4, 5) ** power)
    assert {0: 5e-4, 3: 4e-4, 6: 3.2e-4}.get(epoch, got) == got


@given(st.integers(0, 500), st.integers(0, 500))
def test_schedules_monotone(a, b):
    a, b = sorted((a, b))
    cfg = TrainConfig()
    assert lr_at(b, cfg) <= lr_at(a, cfg)
    assert ss_probability(b) >= ss_probability(a)
    assert 0 <= ss_probability(b) <= 0.25


def test_schedule_errors_and_config_validation():
    with pytest.raises(ValueError):
        ss_probability(-1)
    with pytest.raises(ValueError):
        lr_at(-1, TrainConfig())
    with pytest.raises(ValueError):
        TrainConfig(lr_xe=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


# --- training log ------------------------------------------------------------


def test_training_log_is_append_only_and_ordered():
    tlog = TrainingLog()
    tlog.append(EpochRecord(0, "xe", 5e-4, 0.0, 3.0, 0.1, 1.0))
    tlog.append(EpochRecord(1, "xe", 5e-4, 0.01, 2.0, 0.2, 1.0))
    with pytest.raises(ValueError):
        tlog.append(EpochRecord(1, "xe", 5e-4, 0.01, 2.0, 0.2, 1.0))
    tlog.append(EpochRecord(0, "rl", 5e-5, 0.0, -0.1, 0.3, 1.0))
    lines = tlog.to_tsv().splitlines()
    assert len(lines) == 4 and lines[0].split("\t")[:3] == ["epoch", "phase", "lr"]
    assert "wall_time" not in tlog.without_timing()[0]


# --- cross-entropy training ----------------------------------------------------


def test_training_is_deterministic(data):
    a_ck, a_log = train_xe(small_model(data), data, quick())
    b_ck, b_log = train_xe(small_model(data), data, quick())
    assert a_log.without_timing() == b_log.without_timing()
    assert ckpt.to_bytes(a_ck) == ckpt.to_bytes(b_ck)
    assert [r.lr for r in a_log.records] == [2e-3, 2e-3]


def test_lambda_zero_matches_branch_removed(data):
    cfg = quick(lam=0.0)
    with_branch, _ = train_xe(small_model(data), data, cfg)
    without, _ = train_xe(small_model(data, discriminative=False), data, cfg)
    for name, p in without.model.params.items():
        assert np.array_equal(p.data, with_branch.model.params[name].data), name


def test_total_loss_bounds_xe_every_batch(data):
    seen = []
    train_xe(small_model(data), data, quick(max_epochs=3, lam=10.0),
             on_batch=lambda e, b, total, xe: seen.append((total, xe)), evaluate=False)
    assert len(seen) == 3 * 4
    assert all(total >= xe for total, xe in seen)


def test_training_reduces_loss(data):
    _, tlog = train_xe(small_model(data), data, quick(max_epochs=6, patience=100))
    losses = [r.train_loss for r in tlog.records]
    assert losses[-1] < losses[0]


def test_resume_replays_trajectory(data, tmp_path):
    cfg = quick(max_epochs=4, patience=100, scheduled_sampling=True)
    _, full_log = train_xe(small_model(data), data, cfg, evaluate=False)
    part_ck, _ = train_xe(small_model(data), data, replace(cfg, max_epochs=2), evaluate=False)
    assert part_ck.epoch == 1
    ckpt.save(part_ck, tmp_path / "p.rfn")
    back = ckpt.load(tmp_path / "p.rfn")
    _, rest = train_xe(back.model, data, cfg, resume=back, evaluate=False)
    assert rest.without_timing() == full_log.without_timing()[2:]


def test_non_finite_loss_reports_location(data):
    model = small_model(data)
    model.params["out.b"].data[:] = np.nan
    with pytest.raises(NonFiniteError) as err:
        train_xe(model, data, quick())
    assert err.value.where == (0, 0)


def test_empty_split_rejected(data):
    empty = replace(data, splits={**data.splits, "val": []})
    with pytest.raises(ValueError):
        train_xe(small_model(data), empty, quick())


def test_max_steps_stops_early(data):
    _, tlog = train_xe(small_model(data), data, quick(max_steps=3, max_epochs=10), evaluate=False)
    assert tlog.records[-1].steps == 3


# --- self-critical fine-tuning -------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_rl_gradient_matches_finite_differences(data, seed):
    model = small_model(data, seed=seed, dropout=0.0)
    enc = _batch_enc(model, data.splits["train"][:3])
    g = np.random.default_rng(seed)
    words = np.arange(4, len(data.vocab))
    seqs = [list(g.choice(words, size=3)) + [END], list(g.choice(words, size=5)), [END]]
    rewards = g.normal(size=3)
    # every parameter for one seed; the decoder-side tensors for the others
    names = list(model.params) if seed == 0 else [k for k in model.params if k.startswith(("out.", "embed.", "dec"))]
    params = [model.params[k] for k in names]

    def f():
        return self_critical_loss(sequence_logprob(model, enc, seqs), rewards)

    assert nx.finite_difference_check(f, params, h=1e-5) < 1e-5


def test_zero_reward_gives_zero_gradient(data):
    model = small_model(data, dropout=0.0)
    enc = _batch_enc(model, data.splits["train"][:2])
    params = list(model.params.values())
    with Tape() as tape:
        loss = self_critical_loss(sequence_logprob(model, enc, [[5, END], [6, 7, END]]), np.zeros(2))
    nx.backward(tape, loss, params)
    assert all(not np.any(p.grad) for p in params)


def test_rl_with_sample_equal_greedy_leaves_model_unchanged(data):
    model = small_model(data)
    ck, _ = train_xe(model, data, quick(max_epochs=1, lr_xe=1e-12), evaluate=False)
    ck.model.params["out.b"].data[END] += 100.0
    before = {k: p.data.copy() for k, p in ck.model.params.items()}
    rewards = []
    out, tlog = finetune_rl(ck, data, quick(rl_max_epochs=1), max_updates=3,
                            on_update=lambda n, r: rewards.append(r))
    assert rewards == [0.0, 0.0, 0.0]
    assert all(np.array_equal(out.model.params[k].data, v) for k, v in before.items())


def test_rl_learning_rate_is_constant(data):
    ck, _ = train_xe(small_model(data), data, quick(max_epochs=2))
    _, tlog = finetune_rl(ck, data, quick(rl_max_epochs=3, rl_patience=10))
    assert [r.lr for r in tlog.records] == [5e-5] * len(tlog.records) and len(tlog.records) == 3
    assert all(r.phase == "rl" for r in tlog.records)


def test_rl_is_deterministic(data):
    ck, _ = train_xe(small_model(data), data, quick(max_epochs=2))
    a = finetune_rl(ck, data, quick(rl_max_epochs=2, lr_rl=1e-2))
    b = finetune_rl(ck, data, quick(rl_max_epochs=2, lr_rl=1e-2))
    assert a[1].without_timing() == b[1].without_timing()
    assert math.isfinite(a[1].records[-1].train_loss)
