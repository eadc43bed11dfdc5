"""Soft attention and the attentive LSTM transition.

All functions are batched: vectors are ``(B, n)`` rows and an annotation
set is ``(B, k, d)``.  The gate pre-activations come from one affine map of
``concat(x, h_prev, z)`` split in the fixed order (i, f, o, g).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .numerics import Rng, ShapeError, Tensor


class LstmState(NamedTuple):
    h: Tensor
    c: Tensor


@dataclass
class LstmParams:
    W: Tensor  # (in_dim + s + ctx_dim, 4s)
    b: Tensor  # (4s,)
    in_dim: int
    ctx_dim: int
    s: int

    @classmethod
    def create(cls, in_dim: int, ctx_dim: int, s: int, rng: Rng, name: str = "lstm") -> "LstmParams":
        W = nx.init_uniform((in_dim + s + ctx_dim, 4 * s), rng, name=f"{name}.W")
        b = nx.init_uniform((4 * s,), rng, name=f"{name}.b")
        return cls(W, b, in_dim, ctx_dim, s)

    def tensors(self) -> dict:
        return {"W": self.W, "b": self.b}


@dataclass
class AttentionParams:
    W_a: Tensor  # (d, a)
    W_h: Tensor  # (s, a)
    b: Tensor  # (a,)
    v: Tensor  # (a,)

    @classmethod
    def create(cls, d: int, s: int, a: int, rng: Rng, name: str = "att") -> "AttentionParams":
        return cls(
            nx.init_uniform((d, a), rng, name=f"{name}.W_a"),
            nx.init_uniform((s, a), rng, name=f"{name}.W_h"),
            nx.init_uniform((a,), rng, name=f"{name}.b"),
            nx.init_uniform((a,), rng, name=f"{name}.v"),
        )

    @property
    def annotation_dim(self) -> int:
        return self.W_a.shape[0]

    def tensors(self) -> dict:
        return {"W_a": self.W_a, "W_h": self.W_h, "b": self.b, "v": self.v}


def project_annotations(params: AttentionParams, A: Tensor) -> Tensor:
    """``A @ W_a``; independent of the query, so callers may reuse it across steps."""
    if A.ndim != 3 or A.shape[1] < 1 or A.shape[2] != params.W_a.shape[0]:
        raise ShapeError("attend", A.shape, params.W_a.shape)
    return A @ params.W_a


def attention_scores(params: AttentionParams, A: Tensor, h_prev: Tensor, proj: Tensor | None = None) -> Tensor:
    if h_prev.ndim != 2 or h_prev.shape[1] != params.W_h.shape[0] or h_prev.shape[0] != A.shape[0]:
        raise ShapeError("attend", h_prev.shape, params.W_h.shape)
    if proj is None:
        proj = project_annotations(params, A)
    query = h_prev @ params.W_h + params.b  # (B, a)
    hidden = nx.tanh(proj + nx.reshape(query, (query.shape[0], 1, query.shape[1])))
    return hidden @ params.v  # (B, k)


def attention_readout(scores: Tensor, A: Tensor) -> tuple[Tensor, Tensor]:
    """Softmax the scores and return the weighted average of ``A`` with the weights."""
    if scores.shape != A.shape[:2]:
        raise ShapeError("attend", scores.shape, A.shape)
    alpha = nx.softmax(scores)
    B, k = alpha.shape
    z = nx.reshape(nx.reshape(alpha, (B, 1, k)) @ A, (B, A.shape[2]))
    return z, alpha


def attend(params: AttentionParams, A: Tensor, h_prev: Tensor, proj: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """MLP-scored soft attention; returns the context vector and the weights."""
    return attention_readout(attention_scores(params, A, h_prev, proj), A)


def lstm_step(params: LstmParams, state: LstmState, x: Tensor | None, z: Tensor) -> LstmState:
    h_prev, c_prev = state
    s = params.s
    parts = []
    if params.in_dim:
        if x is None or x.shape[-1] != params.in_dim:
            raise ShapeError("lstm_step", () if x is None else x.shape, (params.in_dim,))
        parts.append(x)
    elif x is not None and x.shape[-1] != 0:
        raise ShapeError("lstm_step", x.shape, (0,))
    if h_prev.shape[-1] != s or c_prev.shape != h_prev.shape:
        raise ShapeError("lstm_step", h_prev.shape, c_prev.shape)
    if z.shape[-1] != params.ctx_dim:
        raise ShapeError("lstm_step", z.shape, (params.ctx_dim,))
    parts += [h_prev, z]
    pre = nx.concat(parts) @ params.W + params.b
    ifo = nx.sigmoid(pre[:, : 3 * s])
    g = nx.tanh(pre[:, 3 * s :])
    i, f, o = ifo[:, :s], ifo[:, s : 2 * s], ifo[:, 2 * s :]
    c = f * c_prev + i * g
    h = o * nx.tanh(c)
    if not np.isfinite(c.data).all():
        raise nx.NonFiniteError("lstm_step: non-finite memory cell")
    return LstmState(h, c)


def attentive_lstm_step(
    lstm: LstmParams,
    att: AttentionParams,
    state: LstmState,
    x: Tensor | None,
    A: Tensor,
    proj: Tensor | None = None,
) -> LstmState:
    z, _ = attend(att, A, state.h, proj)
    return lstm_step(lstm, state, x, z)
