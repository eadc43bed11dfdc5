"""Multi-seed ablation sweeps over the fusion variants."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .corpus import Dataset
from .inference import caption_split
from .metrics import CiderD
from .model import ABLATIONS, FusionConfig, RFNet
from .numerics import Rng
from .trainer import TrainConfig, train_xe

log = logging.getLogger(__name__)

LABELS = {"full": "RFNet", "no-stage-I": "RFNet-I", "no-stage-II": "RFNet-II", "no-interaction": "RFNet-inter"}


def split_cider(model: RFNet, dataset: Dataset, split: str = "test", beam_k: int = 1, max_len: int = 16) -> float:
    """Mean CIDEr-D (x100, the usual reporting unit) with document frequencies from the train references."""
    scorer = CiderD(dataset.references("train"))
    caps = caption_split(model, dataset.splits[split], beam_k, max_len)
    scores = scorer([dataset.vocab.decode(c) for c in caps], dataset.references(split))
    return 100.0 * float(np.mean(scores))


@dataclass
class AblationResult:
    ablations: tuple
    seeds: tuple
    scores: dict  # (ablation, seed) -> test CIDEr-D x100
    epochs: dict  # (ablation, seed) -> epochs run

    def mean(self, ablation: str) -> float:
        return float(np.mean([self.scores[ablation, s] for s in self.seeds]))

    def table(self) -> str:
        """Tab-separated: one row per variant, one column per seed, then the mean.

        A closing ``mean`` row averages each column over the variants.
        """
        head = ["variant"] + [f"seed{s}" for s in self.seeds] + ["mean"]
        lines = ["\t".join(head)]
        for a in self.ablations:
            row = [self.scores[a, s] for s in self.seeds]
            lines.append("\t".join([LABELS.get(a, a)] + [f"{v:.2f}" for v in row] + [f"{self.mean(a):.2f}"]))
        cols = [np.mean([self.scores[a, s] for a in self.ablations]) for s in self.seeds]
        overall = float(np.mean([self.mean(a) for a in self.ablations]))
        lines.append("\t".join(["mean"] + [f"{v:.2f}" for v in cols] + [f"{overall:.2f}"]))
        return "\n".join(lines) + "\n"


def _job(args):
    dataset, fcfg, tcfg, seed, beam_k, split = args
    model = RFNet.create(fcfg, Rng(seed))
    ck, tlog = train_xe(model, dataset, replace(tcfg, seed=seed))
    score = split_cider(ck.model, dataset, split, beam_k, tcfg.max_len)
    log.info("%s seed %d: %.2f after %d epochs", fcfg.ablation, seed, score, len(tlog.records))
    return fcfg.ablation, seed, score, len(tlog.records)


def worker_count(n_jobs: int) -> int:
    cap = os.environ.get("RFNET_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    return max(1, min(limit, n_jobs))


def run_ablation(
    dataset: Dataset,
    base: FusionConfig,
    tcfg: TrainConfig,
    seeds=(0, 1, 2, 3, 4),
    ablations=ABLATIONS,
    beam_k: int = 1,
    split: str = "test",
    workers: int | None = None,
) -> AblationResult:
    jobs = [(dataset, replace(base, ablation=a), tcfg, s, beam_k, split) for a in ablations for s in seeds]
    n = workers or worker_count(len(jobs))
    if n == 1:
        out = [_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            out = list(pool.map(_job, jobs))
    scores = {(a, s): sc for a, s, sc, _ in out}
    epochs = {(a, s): e for a, s, _, e in out}
    return AblationResult(tuple(ablations), tuple(seeds), scores, epochs)
