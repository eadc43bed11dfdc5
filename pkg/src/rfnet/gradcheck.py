"""End-to-end gradient verification on a tiny network."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .model import END, START, EncoderOutput, FusionConfig, RFNet, View, batch_loss, index_set_mask


@dataclass
class GradcheckResult:
    max_rel_error: float
    n_parameters: int
    seconds: float
    ablation: str


def tiny_problem(seed: int = 0, ablation: str = "full", view_dim: int = 4, k: int = 3):
    """Model, input, caption and frequent-word mask for the s=8, M=2 check."""
    cfg = FusionConfig(view_dims=(view_dim, view_dim), vocab_size=20, n_frequent=16, T1=2, T2=2, s=8,
                       ablation=ablation, dropout_p=0.0)
    model = RFNet.create(cfg, nx.Rng(seed))
    data = np.random.default_rng(seed + 1)
    enc = EncoderOutput([View(data.normal(size=(1, view_dim)), data.normal(size=(1, k, view_dim)))
                         for _ in range(2)])
    words = data.choice(np.arange(4, 20), size=4, replace=False)
    caption = np.array([[START, *words, END]])
    rank = {vid: r for r, vid in enumerate(range(4, 20))}
    fmask = index_set_mask([{rank[int(w)] for w in words}], 16)
    return model, enc, caption, fmask


def tiny_gradient_check(seed: int = 0, h: float = 1e-4, lam: float = 10.0, ablation: str = "full") -> GradcheckResult:
    model, enc, caption, fmask = tiny_problem(seed, ablation)
    t0 = time.perf_counter()
    err = nx.finite_difference_check(lambda: batch_loss(model, enc, caption, fmask, lam)[0],
                                     list(model.params.values()), h=h)
    return GradcheckResult(err, model.n_parameters(), time.perf_counter() - t0, ablation)
