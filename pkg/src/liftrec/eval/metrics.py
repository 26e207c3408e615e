"""CTR and top-N ranking metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from ..errors import UndefinedMetricError

LOGLOSS_EPS = 1e-12


def _rankdata(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.concatenate([[True], xs[1:] != xs[:-1]])
    group = np.cumsum(starts) - 1
    first = np.flatnonzero(starts)
    counts = np.diff(np.append(first, len(x)))
    avg = first + (counts + 1) / 2.0
    ranks = np.empty(len(x))
    ranks[order] = avg[group]
    return ranks


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count half)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if len(s) != len(y):
        raise ValueError(f"{len(s)} scores but {len(y)} labels")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative labels")
    r = _rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def logloss(scores, labels, eps: float = LOGLOSS_EPS) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64).ravel(), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64).ravel()
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


@dataclass(frozen=True)
class RankedCandidateSet:
    """One held-out positive plus sampled negatives, each with a model score.

    ``candidates`` holds (item_id, score) pairs.
    """

    user_id: int
    candidates: tuple[tuple[int, float], ...]
    positive_index: int

    def __post_init__(self):
        if len(self.candidates) < 2:
            raise ValueError("a ranked set needs at least 2 candidates")
        if not 0 <= self.positive_index < len(self.candidates):
            raise ValueError(f"positive_index {self.positive_index} out of range")

    def positive_rank(self) -> int:
        """1-based rank of the positive; ties broken by ascending item id."""
        items = np.array([c[0] for c in self.candidates])
        scores = np.array([c[1] for c in self.candidates], dtype=np.float64)
        order = np.lexsort((items, -scores))
        return int(np.flatnonzero(order == self.positive_index)[0]) + 1


def topn_metrics(ranked_sets: Iterable[RankedCandidateSet], ns: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    ranks = np.array([s.positive_rank() for s in ranked_sets], dtype=np.float64)
    if len(ranks) == 0:
        raise ValueError("no ranked sets given")
    out: dict[str, float] = {}
    for n in ns:
        hit = ranks <= n
        out[f"HR@{n}"] = float(hit.mean())
        out[f"NDCG@{n}"] = float(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    out["MRR"] = float((1.0 / ranks).mean())
    return out


def ndcg_at_rank(rank: int, n: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= n else 0.0
