"""BLEU and CIDEr-D over token lists."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, refs: Sequence[Sequence]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def _clipped(candidate, references, n) -> tuple[int, int]:
    cand = ngrams(candidate, n)
    max_ref = Counter()
    for r in references:
        for g, cnt in ngrams(r, n).items():
            max_ref[g] = max(max_ref[g], cnt)
    hit = int(sum(min(cnt, max_ref[g]) for g, cnt in cand.items()))
    return hit, max(len(candidate) - n + 1, 0)


def _combine(hits, totals, c, r, max_n) -> list:
    scores = []
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    log_sum = 0.0
    for n in range(max_n):
        if hits[n] == 0 or totals[n] == 0:
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(hits[n] / totals[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def bleu(candidate: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4) -> list:
    """Sentence BLEU-1..max_n without smoothing; any zero precision zeroes that order and above."""
    if not references:
        raise ValueError("bleu needs at least one reference")
    if not candidate:
        return [0.0] * max_n
    hits, totals = zip(*(_clipped(candidate, references, n) for n in range(1, max_n + 1)))
    return _combine(hits, totals, len(candidate), _closest_ref_len(len(candidate), references), max_n)


def corpus_bleu(candidates, references_per_candidate, max_n: int = 4) -> list:
    """Corpus BLEU: clipped counts and lengths summed before combining."""
    hits, totals = [0] * max_n, [0] * max_n
    c = r = 0
    for cand, refs in zip(candidates, references_per_candidate):
        if not refs:
            raise ValueError("every candidate needs at least one reference")
        for n in range(max_n):
            h, t = _clipped(cand, refs, n + 1)
            hits[n] += h
            totals[n] += t
        c += len(cand)
        r += _closest_ref_len(len(cand), refs)
    if c == 0:
        return [0.0] * max_n
    return _combine(hits, totals, c, r, max_n)


class CiderD:
    """CIDEr-D scorer with document frequencies fixed from a reference corpus.

    Each document is one image's reference list.  Vectors use clipped tf-idf
    weights for n = 1..4, a Gaussian length penalty (sigma 6) and a final
    factor of 10, matching the usual caption-evaluation code.
    """

    def __init__(self, corpus_refs: Sequence[Sequence[Sequence[str]]], n: int = 4, sigma: float = 6.0):
        if not corpus_refs:
            raise ValueError("CIDEr-D needs a non-empty reference corpus")
        self.n = n
        self.sigma = sigma
        self.df = Counter()
        for refs in corpus_refs:
            seen = set()
            for r in refs:
                for k in range(1, n + 1):
                    seen.update(ngrams(r, k))
            self.df.update(seen)
        self.log_docs = math.log(float(len(corpus_refs)))

    def _vec(self, tokens):
        vec, norm = [], []
        for k in range(1, self.n + 1):
            v = {g: tf * (self.log_docs - math.log(max(1.0, self.df[g]))) for g, tf in ngrams(tokens, k).items()}
            vec.append(v)
            norm.append(sum(x * x for x in v.values()))  # squared
        return vec, norm, len(tokens)

    def _sim(self, hyp, ref) -> float:
        (vh, nh, lh), (vr, nr, lr) = hyp, ref
        penalty = math.exp(-((lh - lr) ** 2) / (2 * self.sigma**2))
        total = 0.0
        for k in range(self.n):
            val = sum(min(w, vr[k][g]) * vr[k][g] for g, w in vh[k].items() if g in vr[k])
            if nh[k] != 0 and nr[k] != 0:
                # one sqrt of the product keeps self-similarity at exactly 1.0
                val /= math.sqrt(nh[k] * nr[k])
            total += val * penalty
        return total / self.n

    def score(self, candidate: Sequence[str], references: Sequence[Sequence[str]]) -> float:
        if not references:
            raise ValueError("CIDEr-D needs at least one reference per candidate")
        hyp = self._vec(candidate)
        return 10.0 * sum(self._sim(hyp, self._vec(r)) for r in references) / len(references)

    def __call__(self, candidates, references_per_candidate) -> list:
        return [self.score(c, refs) for c, refs in zip(candidates, references_per_candidate)]


def cider(candidates, references_per_candidate, corpus_refs=None) -> list:
    """Per-candidate CIDEr-D; document frequencies come from ``corpus_refs`` (default: the references)."""
    if any(not refs for refs in references_per_candidate):
        raise ValueError("empty reference set")
    scorer = CiderD(corpus_refs if corpus_refs is not None else references_per_candidate)
    return scorer(candidates, references_per_candidate)


@dataclass
class MetricReport:
    bleu: list  # corpus BLEU-1..4
    cider: float  # mean CIDEr-D
    per_example: list = field(default_factory=list)  # dicts with bleu and cider
    n_examples: int = 0
    n_references: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def summary_lines(self) -> list:
        lines = [f"BLEU-{i + 1} = {b:.6f}" for i, b in enumerate(self.bleu)]
        lines.append(f"CIDEr-D = {self.cider:.6f}")
        return lines


def evaluate_captions(candidates, references_per_candidate, corpus_refs) -> MetricReport:
    scorer = CiderD(corpus_refs)
    ciders = scorer(candidates, references_per_candidate)
    per = [
        {"bleu": bleu(c, refs), "cider": ci} if c else {"bleu": [0.0] * 4, "cider": ci}
        for c, refs, ci in zip(candidates, references_per_candidate, ciders)
    ]
    return MetricReport(
        bleu=corpus_bleu(candidates, references_per_candidate),
        cider=float(sum(ciders) / max(len(ciders), 1)),
        per_example=per,
        n_examples=len(candidates),
        n_references=int(sum(len(r) for r in references_per_candidate)),
    )
