"""Cross-entropy training and self-critical fine-tuning."""

from __future__ import annotations

import copy
import decimal
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from decimal import Decimal
from typing import Callable

import numpy as np

from . import numerics as nx
from .checkpoint import Checkpoint
from .corpus import Dataset
from .inference import BANNED, caption_split, greedy_decode
from .metrics import CiderD
from .model import END, PAD, START, EncoderOutput, RFNet, _Dropper, batch_loss, index_set_mask
from .numerics import AdamState, NonFiniteError, Rng, Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_xe: float = 5e-4
    lr_decay: float = 0.8
    decay_every: int = 3
    lr_rl: float = 5e-5
    batch_size: int = 10
    lam: float = 10.0
    lsr_eps: float = 0.1
    scheduled_sampling: bool = True
    ss_cap: float = 0.25
    ss_ramp: float = 100.0
    patience: int = 10
    rl_patience: int = 5
    max_epochs: int = 30
    rl_max_epochs: int = 20
    max_steps: int | None = None
    clip_norm: float | None = 5.0
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("lr_xe", "lr_rl", "lr_decay", "batch_size", "decay_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.patience < 1 or self.rl_patience < 1:
            raise ValueError("patience must be at least 1")
        if self.lam < 0 or not 0 <= self.lsr_eps < 1:
            raise ValueError("lam must be >= 0 and lsr_eps in [0, 1)")


def ss_probability(epoch: int, cap: float = 0.25, ramp: float = 100.0) -> float:
    """Probability of feeding a model sample instead of the gold token."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return min(cap, epoch / ramp)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    # decimal arithmetic on the literals, rounded once, so 5e-4 * 0.8**2 is exactly 3.2e-4
    with decimal.localcontext() as ctx:
        ctx.prec = 60
        lr = Decimal(repr(cfg.lr_xe)) * Decimal(repr(cfg.lr_decay)) ** (epoch // cfg.decay_every)
    return float(lr)


@dataclass
class EpochRecord:
    epoch: int
    phase: str
    lr: float
    ss_prob: float
    train_loss: float
    val_cider: float
    wall_time: float
    steps: int = 0


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and self.records[-1].phase == rec.phase and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must strictly increase within a phase")
        self.records.append(rec)

    def to_tsv(self) -> str:
        cols = list(EpochRecord.__dataclass_fields__)
        lines = ["\t".join(cols)]
        for r in self.records:
            d = asdict(r)
            lines.append("\t".join(_fmt(d[c]) for c in cols))
        return "\n".join(lines) + "\n"

    def without_timing(self) -> list:
        return [{k: v for k, v in asdict(r).items() if k != "wall_time"} for r in self.records]


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def pad_captions(captions) -> np.ndarray:
    L = max(len(c) for c in captions)
    out = np.full((len(captions), L), PAD, dtype=np.int64)
    for i, c in enumerate(captions):
        out[i, : len(c)] = c
    return out


def _batch_enc(model: RFNet, examples) -> EncoderOutput:
    return EncoderOutput.stack([ex.enc for ex in examples]).select(model.cfg.active_views)


def val_cider(model: RFNet, dataset: Dataset, split: str = "val", scorer: CiderD | None = None,
              beam_k: int = 1, max_len: int = 16) -> float:
    examples = dataset.splits[split]
    scorer = scorer or CiderD(dataset.references("train"))
    caps = caption_split(model, examples, beam_k, max_len)
    refs = dataset.references(split)
    scores = scorer([dataset.vocab.decode(c) for c in caps], refs)
    return float(np.mean(scores))


def _snapshot(model: RFNet) -> dict:
    return {k: p.data.copy() for k, p in model.params.items()}


def _restore(model: RFNet, snap: dict) -> None:
    for k, a in snap.items():
        model.params[k].data[...] = a


def _zero_grads(model: RFNet) -> None:
    for p in model.params.values():
        p.grad = None


def train_xe(
    model: RFNet,
    dataset: Dataset,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    on_batch: Callable | None = None,
    evaluate: bool = True,
):
    """Cross-entropy training with early stopping on validation CIDEr-D.

    Returns ``(checkpoint, log)``; the checkpoint holds the best-scoring
    parameters together with the optimizer and rng state at that point, so
    resuming from it replays the same trajectory.  ``on_batch`` receives
    ``(epoch, batch_index, total_loss, xe_loss)`` floats.
    """
    train = dataset.splits["train"]
    if not train or (evaluate and not dataset.splits.get("val")):
        raise ValueError("training needs non-empty train and val splits")
    rng = Rng(cfg.seed).spawn(2)
    adam = AdamState()
    start_epoch, best_score, bad, steps = 0, -math.inf, 0, 0
    if resume is not None:
        _restore(model, {k: p.data for k, p in resume.model.params.items()})
        adam = copy.deepcopy(resume.adam)
        rng.set_state(resume.rng_state)
        start_epoch = resume.epoch + 1
        best_score = resume.extra.get("best_score", -math.inf)
        bad = resume.extra.get("bad_epochs", 0)
        steps = resume.extra.get("steps", 0)
    scorer = CiderD(dataset.references("train")) if evaluate else None
    vocab_json = dataset.vocab.to_json()
    frequent = dataset.vocab.frequent_ids(model.cfg.n_frequent)
    rank = {vid: r for r, vid in enumerate(frequent)}
    params = list(model.params.values())
    tlog = TrainingLog()
    best_ck = None
    n = len(train)
    stop = False

    for epoch in range(start_epoch, cfg.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        ss = ss_probability(epoch, cfg.ss_cap, cfg.ss_ramp) if cfg.scheduled_sampling else 0.0
        order = rng.permutation(n)
        losses = []
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = [train[i] for i in order[lo : lo + cfg.batch_size]]
            caps = [ex.captions[int(rng.integers(0, len(ex.captions)))] for ex in batch]
            fmask = index_set_mask([{rank[t] for t in c if t in rank} for c in caps], model.cfg.n_frequent)
            _zero_grads(model)
            try:
                with Tape() as tape:
                    total, xe = batch_loss(
                        model, _batch_enc(model, batch), pad_captions(caps), fmask, cfg.lam,
                        ss, cfg.lsr_eps, rng, training=True,
                    )
                value = total.item()
                if not math.isfinite(value):
                    raise NonFiniteError("non-finite loss")
                nx.backward(tape, total, params)
            except NonFiniteError as exc:
                raise NonFiniteError(f"{exc} at epoch {epoch} batch {b}", (epoch, b)) from exc
            if cfg.clip_norm:
                nx.clip_grad_norm(params, cfg.clip_norm)
            nx.adam_step(model.params, None, adam, lr)
            losses.append(value)
            steps += 1
            if on_batch is not None:
                on_batch(epoch, b, value, xe.item())
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                stop = True
                break
        score = val_cider(model, dataset, scorer=scorer, max_len=cfg.max_len) if evaluate else -float(np.mean(losses))
        improved = score > best_score
        if improved:
            best_score, bad = score, 0
        else:
            bad += 1
        tlog.append(EpochRecord(epoch, "xe", lr, ss, float(np.mean(losses)), score,
                                time.perf_counter() - t0, steps))
        log.info("xe epoch %d lr %.3g ss %.2f loss %.4f val %.4f", epoch, lr, ss, np.mean(losses), score)
        if improved or best_ck is None:
            best_ck = Checkpoint(
                model=_clone(model), adam=copy.deepcopy(adam), vocab_json=vocab_json, epoch=epoch,
                seed=cfg.seed, rng_state=copy.deepcopy(rng.get_state()), train_config=asdict(cfg),
                extra={"best_score": best_score, "bad_epochs": bad, "steps": steps, "phase": "xe"},
            )
        if stop or bad >= cfg.patience:
            break
    return best_ck, tlog


def _clone(model: RFNet) -> RFNet:
    m = RFNet(model.cfg)
    m.params = {k: Tensor(p.data.copy(), requires_grad=True, name=k) for k, p in model.params.items()}
    return m


# ---------------------------------------------------------------------------
# Self-critical sequence training
# ---------------------------------------------------------------------------


def _banned_bias(V: int) -> np.ndarray:
    bias = np.zeros(V)
    bias[list(BANNED)] = -1e9
    return bias


def sample_with_logprob(model: RFNet, enc: EncoderOutput, rng: Rng, max_len: int, training: bool = True):
    """Draw one caption per row from the model and keep its log-likelihood on the tape.

    Returns ``(tokens list per row, summed log-probability Tensor of shape (batch,))``.
    """
    thoughts = model.fuse(enc, training=training, rng=rng)
    ctx = model.prepare_decoder(thoughts)
    drop = _Dropper(model.cfg.dropout_p, training, rng) if training else None
    n = enc.views[0].A.shape[0]
    bias = _banned_bias(model.cfg.vocab_size)
    state = thoughts.state
    tokens = np.full(n, START, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    out = [[] for _ in range(n)]
    total = None
    for _ in range(max_len):
        logits, state = model.decoder_step(ctx, state, tokens, drop)
        logp = nx.log_softmax(logits + bias)
        probs = np.exp(logp.data)
        sampled = np.array([_draw(p, rng) for p in probs])
        term = nx.pick(logp, sampled) * alive.astype(float)
        total = term if total is None else total + term
        for i in np.flatnonzero(alive):
            if sampled[i] == END:
                alive[i] = False
            else:
                out[i].append(int(sampled[i]))
        tokens = sampled
        if not alive.any():
            break
    return out, total


def _draw(p: np.ndarray, rng: Rng) -> int:
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(p) - 1))


def sequence_logprob(model: RFNet, enc: EncoderOutput, sequences) -> Tensor:
    """Log-likelihood of given captions (tokens without START, END appended if finished) per row."""
    thoughts = model.fuse(enc)
    ctx = model.prepare_decoder(thoughts)
    bias = _banned_bias(model.cfg.vocab_size)
    n = len(sequences)
    L = max(len(s) for s in sequences)
    state = thoughts.state
    prev = np.full(n, START, dtype=np.int64)
    total = None
    for t in range(L):
        logits, state = model.decoder_step(ctx, state, prev)
        logp = nx.log_softmax(logits + bias)
        cur = np.array([s[t] if t < len(s) else PAD for s in sequences])
        mask = np.array([t < len(s) for s in sequences], dtype=float)
        term = nx.pick(logp, np.where(mask > 0, cur, 0)) * mask
        total = term if total is None else total + term
        prev = np.where(mask > 0, cur, PAD)
    return total


def self_critical_loss(logprob: Tensor, rewards: np.ndarray) -> Tensor:
    """``-mean_b r_b * log p(sample_b)`` with the reward held constant."""
    return -nx.sum(logprob * np.asarray(rewards, dtype=float)) / len(rewards)


def finetune_rl(
    checkpoint: Checkpoint,
    dataset: Dataset,
    cfg: TrainConfig,
    max_updates: int | None = None,
    on_update: Callable | None = None,
):
    """Self-critical fine-tuning on CIDEr-D with a greedy baseline and fixed learning rate."""
    model = _clone(checkpoint.model)
    train = dataset.splits["train"]
    if not train or not dataset.splits.get("val"):
        raise ValueError("fine-tuning needs non-empty train and val splits")
    rng = Rng(cfg.seed).spawn(3)
    adam = AdamState()
    scorer = CiderD(dataset.references("train"))
    vocab = dataset.vocab
    params = list(model.params.values())
    tlog = TrainingLog()
    best_score = val_cider(model, dataset, scorer=scorer, max_len=cfg.max_len)
    best_ck = Checkpoint(model=_clone(model), adam=copy.deepcopy(adam), vocab_json=vocab.to_json(), epoch=-1,
                         seed=cfg.seed, rng_state=copy.deepcopy(rng.get_state()), train_config=asdict(cfg),
                         extra={"best_score": best_score, "phase": "rl", "updates": 0})
    bad, updates, n = 0, 0, len(train)
    for epoch in range(cfg.rl_max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        losses = []
        stop = False
        for lo in range(0, n, cfg.batch_size):
            batch = [train[i] for i in order[lo : lo + cfg.batch_size]]
            enc = _batch_enc(model, batch)
            refs = [[vocab.decode(c) for c in ex.captions] for ex in batch]
            greedy = greedy_decode(model, enc, cfg.max_len)
            base = scorer([vocab.decode(g) for g in greedy], refs)
            _zero_grads(model)
            with Tape() as tape:
                samples, logprob = sample_with_logprob(model, enc, rng, cfg.max_len, training=True)
                rewards = np.array(scorer([vocab.decode(s) for s in samples], refs)) - np.array(base)
                loss = self_critical_loss(logprob, rewards)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"non-finite RL loss at epoch {epoch}", (epoch, lo))
            if tape.nodes and np.any(rewards != 0):
                nx.backward(tape, loss, params)
                if cfg.clip_norm:
                    nx.clip_grad_norm(params, cfg.clip_norm)
            else:
                for p in params:
                    p.grad = np.zeros_like(p.data)
            nx.adam_step(model.params, None, adam, cfg.lr_rl)
            losses.append(value)
            updates += 1
            if on_update is not None:
                on_update(updates, float(np.mean(rewards)))
            if max_updates is not None and updates >= max_updates:
                stop = True
                break
        score = val_cider(model, dataset, scorer=scorer, max_len=cfg.max_len)
        tlog.append(EpochRecord(epoch, "rl", cfg.lr_rl, 0.0, float(np.mean(losses)), score,
                                time.perf_counter() - t0, updates))
        log.info("rl epoch %d loss %.4f val %.4f", epoch, np.mean(losses), score)
        if score > best_score:
            best_score, bad = score, 0
            best_ck = Checkpoint(model=_clone(model), adam=copy.deepcopy(adam), vocab_json=vocab.to_json(),
                                 epoch=epoch, seed=cfg.seed, rng_state=copy.deepcopy(rng.get_state()),
                                 train_config=asdict(cfg),
                                 extra={"best_score": best_score, "phase": "rl", "updates": updates})
        else:
            bad += 1
        if stop or bad >= cfg.rl_patience:
            break
    return best_ck, tlog
