"""Per-query inference latency, split into retrieval, history encoding and forward pass."""

from __future__ import annotations

import bisect
import logging
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..domain import Interaction, build_user_sequences, feature_matrix
from ..errors import TooFewQueriesError
from ..predictor import Predictor, PredictorBatch
from ..retriever import Datastore

logger = logging.getLogger(__name__)

STAGES = ("retrieve", "encode_history", "forward")
MIN_QUERIES = 10


class InferencePipeline:
    """Scores one target at a time the way a serving path would."""

    def __init__(self, encoder, store: Datastore | None, model: Predictor, history_pool: Sequence[Interaction], L: int):
        self.encoder = encoder
        self.store = store
        self.model = model
        self.L = L
        self._seqs = build_user_sequences(history_pool)
        self._stamps = {u: [it.timestamp for it in s.interactions] for u, s in self._seqs.items()}

    @property
    def K(self) -> int:
        return self.model.config.K

    def history(self, target: Interaction) -> tuple[Interaction, ...]:
        seq = self._seqs.get(target.user_id)
        if seq is None:
            return ()
        cut = bisect.bisect_left(self._stamps[target.user_id], target.timestamp)
        return seq.interactions[max(0, cut - self.L) : cut]

    def score(self, target: Interaction, spans: dict | None = None) -> float:
        """Score ``target``; when ``spans`` is given, stage durations are added to it."""
        clock = time.perf_counter
        t0 = clock()
        x = feature_matrix([target])
        uses_ret = self.model.config.uses_retrieval and self.store is not None and len(self.store) > 0
        K = self.K if self.model.config.uses_retrieval else 0
        if uses_ret:
            pos, _ = self.store.search(x, K)
        t1 = clock()
        h_t = self.encoder.encode_sequences([self.history(target)])
        t2 = clock()
        if uses_ret:
            valid = pos >= 0
            safe = np.where(valid, pos, 0)
            batch = PredictorBatch(x, h_t, self.store.keys[safe], self.store.h[safe], self.store.f[safe], valid)
        else:
            M, v = x.shape[1], h_t.shape[1]
            batch = PredictorBatch(x, h_t, np.zeros((1, K, M), dtype=np.int64), np.zeros((1, K, v)),
                                   np.zeros((1, K, v)), np.zeros((1, K), dtype=bool))
        p = float(self.model.predict(batch)[0])
        t3 = clock()
        if spans is not None:
            spans["retrieve"].append(t1 - t0)
            spans["encode_history"].append(t2 - t1)
            spans["forward"].append(t3 - t2)
        return p


def _stats(x: np.ndarray) -> dict:
    return {
        "mean": float(x.mean()),
        "median": float(np.median(x)),
        "p95": float(np.percentile(x, 95)),
        "std": float(x.std()),
    }


@dataclass
class TimingReport:
    n_queries: int
    mode: str
    K: int
    stages: dict = field(default_factory=dict)  # stage -> {mean, median, p95, std} in seconds
    total: dict = field(default_factory=dict)

    @property
    def breakdown_gap(self) -> float:
        """Relative gap between the summed stage means and the measured total mean."""
        s = sum(self.stages[k]["mean"] for k in STAGES)
        return abs(self.total["mean"] - s) / self.total["mean"]

    def to_dict(self) -> dict:
        return {"n_queries": self.n_queries, "mode": self.mode, "K": self.K, "stages": self.stages, "total": self.total}

    def to_text(self) -> str:
        rows = [("stage", "mean_ms", "median_ms", "p95_ms")]
        for name, st in list(self.stages.items()) + [("total", self.total)]:
            rows.append((name, f"{st['mean'] * 1e3:.3f}", f"{st['median'] * 1e3:.3f}", f"{st['p95'] * 1e3:.3f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        head = f"inference timing: {self.n_queries} queries, mode {self.mode}, K={self.K}"
        return "\n".join([head] + ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows])


def inference_timing(pipeline: InferencePipeline, queries: Sequence[Interaction], n_queries: int | None = None,
                     warmup: int = 3) -> TimingReport:
    """Time ``n_queries`` single-target predictions after ``warmup`` untimed ones.

    Queries cycle through ``queries`` when fewer are supplied. The total is
    measured around each whole call, so the stage breakdown can be checked
    against it.
    """
    n = len(queries) if n_queries is None else n_queries
    if n < MIN_QUERIES:
        raise TooFewQueriesError(f"need at least {MIN_QUERIES} queries for stable timing, got {n}")
    if not queries:
        raise TooFewQueriesError("no queries supplied")
    for i in range(warmup):
        pipeline.score(queries[i % len(queries)])
    spans: dict = {k: [] for k in STAGES}
    totals = []
    clock = time.perf_counter
    for i in range(n):
        q = queries[i % len(queries)]
        t0 = clock()
        pipeline.score(q, spans)
        totals.append(clock() - t0)
    report = TimingReport(n, pipeline.model.config.ablation_mode, pipeline.K)
    report.stages = {k: _stats(np.asarray(spans[k])) for k in STAGES}
    report.total = _stats(np.asarray(totals))
    logger.info("timing: total mean %.3f ms, std %.3f ms, p95 %.3f ms",
                report.total["mean"] * 1e3, report.total["std"] * 1e3, report.total["p95"] * 1e3)
    return report
