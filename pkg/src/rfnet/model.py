"""Recurrent fusion network: two fusion stages, attentive decoder and losses.

Stage I runs ``M`` review components for ``T1`` steps.  Each component owns
an attention over one view's annotations, and by default every component
reads the concatenated previous hidden states of all components.  Stage II
starts from the averaged final stage-I state and for ``T2`` steps
concatenates ``M`` attention reads over the stage-I thought vectors.  The
decoder attends over the stage-II thought vectors.

Ablations:

* ``no-stage-I``: stage II attends over the raw annotation sets and starts
  from a projection of the concatenated global vectors.
* ``no-stage-II``: the decoder starts from the averaged stage-I state and
  uses ``M`` attention models over the stage-I thought vectors.
* ``no-interaction``: component ``m`` is fed only its own previous hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np

from . import numerics as nx
from .cells import AttentionParams, LstmParams, LstmState, attend, lstm_step, project_annotations
from .numerics import Rng, ShapeError, Tensor

ABLATIONS = ("full", "no-stage-I", "no-stage-II", "no-interaction")

PAD, START, END, UNK = 0, 1, 2, 3


class View(NamedTuple):
    a0: np.ndarray  # (d,) or (B, d)
    A: np.ndarray  # (k, d) or (B, k, d)


@dataclass
class EncoderOutput:
    """Per-view global vector and annotation set, optionally with a leading batch axis."""

    views: list

    def __post_init__(self):
        if not self.views:
            raise ValueError("EncoderOutput needs at least one view")
        for v in self.views:
            if v.A.shape[-2] < 1:
                raise ValueError("every view needs at least one annotation vector")

    @property
    def batched(self) -> bool:
        return self.views[0].A.ndim == 3

    def select(self, indices: Sequence[int]) -> "EncoderOutput":
        return EncoderOutput([self.views[i] for i in indices])

    @staticmethod
    def stack(items: Sequence["EncoderOutput"]) -> "EncoderOutput":
        n = len(items[0].views)
        return EncoderOutput(
            [View(np.stack([e.views[m].a0 for e in items]), np.stack([e.views[m].A for e in items])) for m in range(n)]
        )

    def as_batch(self) -> "EncoderOutput":
        return self if self.batched else EncoderOutput.stack([self])


@dataclass
class FusionConfig:
    view_dims: tuple  # feature size d_m of every view the data provides
    vocab_size: int
    n_frequent: int
    T1: int = 2
    T2: int = 2
    s: int = 64
    att_size: int | None = None
    embed_size: int | None = None
    ablation: str = "full"
    dropout_p: float = 0.3
    view_subset: tuple | None = None
    discriminative: bool = True  # False removes the discriminative branch from the graph

    def __post_init__(self):
        self.view_dims = tuple(int(d) for d in self.view_dims)
        if self.view_subset is not None:
            self.view_subset = tuple(int(i) for i in self.view_subset)
            if not self.view_subset or any(not 0 <= i < len(self.view_dims) for i in self.view_subset):
                raise ValueError(f"view_subset {self.view_subset} invalid for {len(self.view_dims)} views")
            if len(set(self.view_subset)) != len(self.view_subset):
                raise ValueError("view_subset has duplicates")
        if self.T1 < 1 or self.T2 < 1 or self.s < 1:
            raise ValueError("T1, T2 and s must be at least 1")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must be in [0, 1)")
        if not 1 <= self.n_frequent <= self.vocab_size:
            raise ValueError("n_frequent must be in [1, vocab_size]")

    @property
    def active_views(self) -> tuple:
        return self.view_subset if self.view_subset is not None else tuple(range(len(self.view_dims)))

    @property
    def M(self) -> int:
        return len(self.active_views)

    @property
    def dims(self) -> tuple:
        return tuple(self.view_dims[i] for i in self.active_views)

    @property
    def a(self) -> int:
        return self.att_size or self.s

    @property
    def e(self) -> int:
        return self.embed_size or self.s

    @property
    def has_stage1(self) -> bool:
        return self.ablation != "no-stage-I"

    @property
    def has_stage2(self) -> bool:
        return self.ablation != "no-stage-II"


class ThoughtVectors(NamedTuple):
    B: list | None  # M tensors of shape (batch, T1, s); None without stage I
    C: Tensor | None  # (batch, T2, s); None without stage II
    memories: list  # what the decoder attends over
    state: LstmState  # decoder initial state
    stage1_final: list | None


@dataclass
class RFNet:
    cfg: FusionConfig
    params: dict = field(default_factory=dict)
    _views: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def create(cls, cfg: FusionConfig, rng: Rng) -> "RFNet":
        model = cls(cfg)
        model._build(rng)
        model.assert_census()
        return model

    # -- parameters ---------------------------------------------------------

    def _add(self, name: str, shape, rng: Rng) -> Tensor:
        t = nx.init_uniform(shape, rng, name=name)
        self.params[name] = t
        return t

    def _lstm(self, name: str, in_dim: int, ctx_dim: int, rng: Rng) -> None:
        s = self.cfg.s
        self._add(f"{name}.W", (in_dim + s + ctx_dim, 4 * s), rng)
        self._add(f"{name}.b", (4 * s,), rng)

    def _att(self, name: str, d: int, rng: Rng) -> None:
        a, s = self.cfg.a, self.cfg.s
        self._add(f"{name}.W_a", (d, a), rng)
        self._add(f"{name}.W_h", (s, a), rng)
        self._add(f"{name}.b", (a,), rng)
        self._add(f"{name}.v", (a,), rng)

    def _build(self, rng: Rng) -> None:
        cfg = self.cfg
        M, s, dims = cfg.M, cfg.s, cfg.dims
        if cfg.has_stage1:
            in_dim = s if cfg.ablation == "no-interaction" else M * s
            for m in range(M):
                self._add(f"init.m{m}.W0", (dims[m], s), rng)
            for m in range(M):
                for t in range(cfg.T1):
                    self._lstm(f"stage1.m{m}.t{t}.lstm", in_dim, dims[m], rng)
                    self._att(f"stage1.m{m}.t{t}.att", dims[m], rng)
        else:
            self._add("init.global.W0", (sum(dims), s), rng)
        if cfg.has_stage2:
            mem_dims = [s] * M if cfg.has_stage1 else list(dims)
            for t in range(cfg.T2):
                self._lstm(f"stage2.t{t}.lstm", 0, sum(mem_dims), rng)
                for m in range(M):
                    self._att(f"stage2.t{t}.att{m}", mem_dims[m], rng)
            n_dec_att = 1
        else:
            n_dec_att = M
        self._lstm("decoder.lstm", cfg.e, n_dec_att * s, rng)
        for j in range(n_dec_att):
            self._att(f"decoder.att{j}", s, rng)
        self._add("embed.E", (cfg.vocab_size, cfg.e), rng)
        self._add("out.W", (s, cfg.vocab_size), rng)
        self._add("out.b", (cfg.vocab_size,), rng)
        if cfg.discriminative:
            self._add("disc.W", (s, cfg.n_frequent), rng)

    def lstm(self, prefix: str) -> LstmParams:
        key = (prefix, id(self.params.get(f"{prefix}.W")))
        hit = self._views.get(key)
        if hit is None:
            hit = self._views[key] = self._make_lstm(prefix)
        return hit

    def att(self, prefix: str) -> AttentionParams:
        key = (prefix, id(self.params.get(f"{prefix}.W_a")))
        hit = self._views.get(key)
        if hit is None:
            hit = self._views[key] = self._make_att(prefix)
        return hit

    def _make_lstm(self, prefix: str) -> LstmParams:
        W = self.params[f"{prefix}.W"]
        s = self.cfg.s
        in_dim = {"stage1": (s if self.cfg.ablation == "no-interaction" else self.cfg.M * s), "stage2": 0}.get(
            prefix.split(".")[0], self.cfg.e
        )
        return LstmParams(W, self.params[f"{prefix}.b"], in_dim, W.shape[0] - in_dim - s, s)

    def _make_att(self, prefix: str) -> AttentionParams:
        p = self.params
        return AttentionParams(p[f"{prefix}.W_a"], p[f"{prefix}.W_h"], p[f"{prefix}.b"], p[f"{prefix}.v"])

    def census(self) -> dict:
        names = self.params
        lstms = {n.rsplit(".", 1)[0] for n in names if ".lstm." in n}
        atts = {n.rsplit(".", 1)[0] for n in names if ".att" in n and n.endswith(".W_a")}
        return {"lstm_units": len(lstms), "attention_models": len(atts)}

    def expected_census(self) -> dict:
        cfg = self.cfg
        M, T1, T2 = cfg.M, cfg.T1, cfg.T2
        lstm = (M * T1 if cfg.has_stage1 else 0) + (T2 if cfg.has_stage2 else 0) + 1
        att = (M * T1 if cfg.has_stage1 else 0) + (T2 * M if cfg.has_stage2 else 0) + (1 if cfg.has_stage2 else M)
        return {"lstm_units": lstm, "attention_models": att}

    def assert_census(self) -> None:
        got, want = self.census(), self.expected_census()
        if got != want:
            raise AssertionError(f"parameter census {got} != {want}")

    def n_parameters(self) -> int:
        return int(np.sum([p.data.size for p in self.params.values()]))

    # -- forward ------------------------------------------------------------

    def fuse(self, enc: EncoderOutput, training: bool = False, rng: Rng | None = None) -> ThoughtVectors:
        """Run the fusion stages on a batched, view-selected encoder output."""
        cfg = self.cfg
        if len(enc.views) != cfg.M:
            raise ValueError(f"expected {cfg.M} views, got {len(enc.views)}")
        for m, v in enumerate(enc.views):
            if v.A.shape[-1] != cfg.dims[m] or v.a0.shape[-1] != cfg.dims[m]:
                raise ShapeError(f"view {m}", v.A.shape, (cfg.dims[m],))
        drop = _Dropper(cfg.dropout_p, training, rng)
        B_sets = final = None
        if cfg.has_stage1:
            B_sets, final = run_stage1(self, enc, drop)
            init = init_stage2(final)
            memories = B_sets
        else:
            a0 = nx.concat([Tensor(v.a0) for v in enc.views])
            h0 = a0 @ self.params["init.global.W0"]
            init = LstmState(h0, h0)
            memories = [Tensor(v.A) for v in enc.views]
        if cfg.has_stage2:
            C, state = run_stage2(self, memories, init, drop)
            dec_memories = [C]
        else:
            C, state = None, init
            dec_memories = B_sets
        return ThoughtVectors(B_sets, C, dec_memories, state, final)

    def prepare_decoder(self, thoughts: ThoughtVectors) -> "DecoderContext":
        atts = [self.att(f"decoder.att{j}") for j in range(len(thoughts.memories))]
        projs = [project_annotations(a, mem) for a, mem in zip(atts, thoughts.memories)]
        return DecoderContext(self.lstm("decoder.lstm"), atts, list(thoughts.memories), projs)

    def decoder_step(self, ctx: "DecoderContext", state: LstmState, tokens, drop: "_Dropper | None" = None):
        """One decoder transition; returns (logits, new state)."""
        x = nx.take_rows(self.params["embed.E"], tokens)
        zs = [attend(a, mem, state.h, proj)[0] for a, mem, proj in zip(ctx.atts, ctx.memories, ctx.projs)]
        new = lstm_step(ctx.lstm, state, x, nx.concat(zs))
        if drop is not None:
            new = LstmState(drop(new.h), new.c)
        logits = new.h @ self.params["out.W"] + self.params["out.b"]
        return logits, new


@dataclass
class DecoderContext:
    lstm: LstmParams
    atts: list
    memories: list
    projs: list

    def select(self, idx) -> "DecoderContext":
        """Reindex the batch axis (beam reordering / replication)."""
        return DecoderContext(
            self.lstm,
            self.atts,
            [Tensor(m.data[idx]) for m in self.memories],
            [Tensor(p.data[idx]) for p in self.projs],
        )


class _Dropper:
    def __init__(self, p: float, training: bool, rng: Rng | None):
        self.p, self.training, self.rng = p, training, rng
        if training and p > 0 and rng is None:
            raise ValueError("dropout in training mode needs an rng")

    def __call__(self, h: Tensor) -> Tensor:
        return nx.dropout(h, self.p, self.training, self.rng)


def run_stage1(model: RFNet, enc: EncoderOutput, drop: _Dropper | None = None):
    """Stage I with synchronous updates; returns (B, final states)."""
    cfg = model.cfg
    if len(enc.views) != cfg.M:
        raise ValueError(f"view-count mismatch: config has {cfg.M}, encoder output has {len(enc.views)}")
    drop = drop or _Dropper(0.0, False, None)
    M, interact = cfg.M, cfg.ablation != "no-interaction"
    states = []
    for m, v in enumerate(enc.views):
        h0 = Tensor(v.a0) @ model.params[f"init.m{m}.W0"]
        states.append(LstmState(h0, h0))
    annots = [Tensor(v.A) for v in enc.views]
    collected = [[] for _ in range(M)]
    for t in range(cfg.T1):
        H = nx.concat([st.h for st in states]) if interact else None
        new_states = []
        for m in range(M):
            x = H if interact else states[m].h
            att = model.att(f"stage1.m{m}.t{t}.att")
            z, _ = attend(att, annots[m], states[m].h)
            st = lstm_step(model.lstm(f"stage1.m{m}.t{t}.lstm"), states[m], x, z)
            st = LstmState(drop(st.h), st.c)
            new_states.append(st)
            collected[m].append(st.h)
        states = new_states
    B_sets = [nx.stack(hs, axis=1) for hs in collected]
    return B_sets, states


def init_stage2(final_states: Sequence[LstmState]) -> LstmState:
    if not final_states:
        raise ValueError("init_stage2 needs at least one state")
    if len(final_states) == 1:
        return final_states[0]
    k = 1.0 / len(final_states)
    h = final_states[0].h
    c = final_states[0].c
    for st in final_states[1:]:
        h = h + st.h
        c = c + st.c
    return LstmState(h * k, c * k)


def run_stage2(model: RFNet, memories: Sequence[Tensor], init: LstmState, drop: _Dropper | None = None):
    """Stage II multi-attention review; returns (C, final state)."""
    if not memories:
        raise ValueError("run_stage2 needs at least one thought-vector set")
    cfg = model.cfg
    drop = drop or _Dropper(0.0, False, None)
    state = init
    hs = []
    for t in range(cfg.T2):
        zs = [attend(model.att(f"stage2.t{t}.att{m}"), mem, state.h)[0] for m, mem in enumerate(memories)]
        state = lstm_step(model.lstm(f"stage2.t{t}.lstm"), state, None, nx.concat(zs))
        state = LstmState(drop(state.h), state.c)
        hs.append(state.h)
    return nx.stack(hs, axis=1), state


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def smoothed_targets(targets: np.ndarray, vocab_size: int, eps: float) -> np.ndarray:
    onehot = np.zeros(targets.shape + (vocab_size,))
    np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
    return (1.0 - eps) * onehot + eps / vocab_size


def decode_train(
    model: RFNet,
    thoughts: ThoughtVectors,
    captions: np.ndarray,
    ss_prob: float = 0.0,
    lsr_eps: float = 0.0,
    rng: Rng | None = None,
    training: bool = False,
):
    """Teacher-forced (optionally scheduled-sampled) decoding loss.

    ``captions`` is ``(batch, L)`` int ids starting with START, ending with END
    and right-padded with PAD.  Returns (mean per-token XE, logits (batch, L-1, V)).
    """
    captions = np.asarray(captions, dtype=np.int64)
    if captions.ndim == 1:
        captions = captions[None]
    if captions.shape[1] < 2:
        raise ValueError("captions need at least START and END")
    V = model.cfg.vocab_size
    if captions.min() < 0 or captions.max() >= V:
        raise ValueError("caption contains an unknown token id")
    if not 0.0 <= ss_prob <= 0.25:
        raise ValueError("ss_prob must lie in [0, 0.25]")
    if (ss_prob > 0 or (training and model.cfg.dropout_p > 0)) and rng is None:
        raise ValueError("scheduled sampling and dropout need an rng")
    ctx = model.prepare_decoder(thoughts)
    drop = _Dropper(model.cfg.dropout_p, training, rng) if training else None
    state = thoughts.state
    inputs = captions[:, :-1]
    targets = captions[:, 1:]
    n_steps = inputs.shape[1]
    hs = []
    prev_logits = None
    W_out, b_out = model.params["out.W"], model.params["out.b"]
    for t in range(n_steps):
        tok = inputs[:, t]
        if ss_prob > 0 and t > 0:
            use_model = rng.random(tok.shape) < ss_prob
            if use_model.any():
                probs = nx._softmax(prev_logits)
                sampled = _sample_rows(probs, rng)
                tok = np.where(use_model, sampled, tok)
        x = nx.take_rows(model.params["embed.E"], tok)
        zs = [attend(a, mem, state.h, proj)[0] for a, mem, proj in zip(ctx.atts, ctx.memories, ctx.projs)]
        state = lstm_step(ctx.lstm, state, x, nx.concat(zs))
        if drop is not None:
            state = LstmState(drop(state.h), state.c)
        hs.append(state.h)
        if ss_prob > 0:
            prev_logits = state.h.data @ W_out.data + b_out.data
    H = nx.stack(hs, axis=1)  # (batch, T, s)
    logits = H @ W_out + b_out
    logp = nx.log_softmax(logits)
    mask = (targets != PAD).astype(float)
    weights = smoothed_targets(targets, V, lsr_eps) * mask[..., None] / max(mask.sum(), 1.0)
    loss = -nx.sum(logp * weights)
    return loss, logits


def _sample_rows(probs: np.ndarray, rng: Rng) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1])[..., None] * cdf[..., -1:]
    return np.minimum((cdf < u).sum(axis=-1), probs.shape[-1] - 1)


def discriminative_scores(W_disc: Tensor, V: Tensor) -> Tensor:
    """Row max of ``W_disc^T`` applied to every thought vector; ``V`` is (..., T, s)."""
    if V.ndim < 2 or V.shape[-2] == 0:
        raise ValueError("discriminative_scores needs at least one thought vector")
    return nx.row_max(V @ W_disc, axis=-2)


def discriminative_loss(scores: Tensor, frequent_mask) -> Tensor:
    """Multi-label margin loss summed over (present, absent) word pairs.

    ``frequent_mask`` is a 0/1 array shaped like ``scores`` marking the
    frequent words present in the caption.  Batched input gives one loss per row.
    """
    pos = np.asarray(frequent_mask, dtype=float)
    if pos.shape != scores.shape:
        raise ShapeError("discriminative_loss", scores.shape, pos.shape)
    pair = pos[..., :, None] * (1.0 - pos)[..., None, :]
    n = scores.shape[-1]
    sj = nx.reshape(scores, scores.shape[:-1] + (n, 1))
    si = nx.reshape(scores, scores.shape[:-1] + (1, n))
    hinge = nx.relu(1.0 - sj + si)
    return nx.sum(nx.sum(hinge * pair, axis=-1), axis=-1)


def index_set_mask(sets: Sequence, n: int) -> np.ndarray:
    mask = np.zeros((len(sets), n))
    for row, idx in enumerate(sets):
        mask[row, list(idx)] = 1.0
    return mask


def total_loss(xe_loss, B_losses: Sequence, C_loss, lam: float, M: int | None = None):
    """Cross-entropy plus ``lam / (number of sets)`` times the summed discriminative losses.

    With both stages present there are ``M + 1`` sets.  Ablations drop the
    missing stage's terms and normalise by the sets that remain.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    terms = list(B_losses or []) + ([C_loss] if C_loss is not None else [])
    if not terms:
        return xe_loss
    n_sets = (M + 1) if (M is not None and B_losses and C_loss is not None) else len(terms)
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return xe_loss + acc * (lam / n_sets)


def discriminative_terms(model: RFNet, thoughts: ThoughtVectors, frequent_mask: np.ndarray):
    """Batch-mean discriminative loss for every stage-I set and for C.

    Each hinge sum is divided by the number of frequent words, the usual
    multi-label margin convention, so that lambda = 10 keeps the auxiliary
    term on the same scale as the cross-entropy.
    """
    if not model.cfg.discriminative:
        return [], None
    W = model.params["disc.W"]
    scale = 1.0 / model.cfg.n_frequent

    def term(V):
        return nx.mean(discriminative_loss(discriminative_scores(W, V), frequent_mask)) * scale

    B_losses = [term(Bm) for Bm in thoughts.B or []]
    C_loss = term(thoughts.C) if thoughts.C is not None else None
    return B_losses, C_loss


def batch_loss(
    model: RFNet,
    enc: EncoderOutput,
    captions: np.ndarray,
    frequent_mask: np.ndarray | None,
    lam: float,
    ss_prob: float = 0.0,
    lsr_eps: float = 0.0,
    rng: Rng | None = None,
    training: bool = False,
):
    """Full training objective for a batch; returns (total, xe)."""
    thoughts = model.fuse(enc, training=training, rng=rng)
    xe, _ = decode_train(model, thoughts, captions, ss_prob, lsr_eps, rng, training)
    if frequent_mask is None or not model.cfg.discriminative:
        return xe, xe
    B_losses, C_loss = discriminative_terms(model, thoughts, frequent_mask)
    return total_loss(xe, B_losses, C_loss, lam, model.cfg.M), xe


def with_ablation(cfg: FusionConfig, ablation: str) -> FusionConfig:
    return replace(cfg, ablation=ablation)
