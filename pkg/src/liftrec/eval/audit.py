"""Temporal leakage audit for a built datastore."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..domain import DatasetSplits
from ..retriever import Datastore


@dataclass
class AuditViolation:
    sample_id: int
    timestamp: int  # anchor timestamp
    context_max_ts: int  # latest event in the record's history or future window


@dataclass
class AuditReport:
    passed: bool
    n_records: int
    boundary_retrieval_end: int
    min_test_timestamp: int | None
    max_context_timestamp: int | None
    max_offending_timestamp: int | None = None
    violations: list[AuditViolation] = field(default_factory=list)
    n_violations: int = 0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "n_records": self.n_records,
            "boundary_retrieval_end": self.boundary_retrieval_end,
            "min_test_timestamp": self.min_test_timestamp,
            "max_context_timestamp": self.max_context_timestamp,
            "max_offending_timestamp": self.max_offending_timestamp,
            "n_violations": self.n_violations,
            "violations": [vars(v) for v in self.violations],
            "notes": list(self.notes),
        }

    def to_text(self) -> str:
        lines = [
            f"leakage audit: {'PASS' if self.passed else 'FAIL'}",
            f"  records               {self.n_records}",
            f"  retrieval boundary    {self.boundary_retrieval_end}",
            f"  min test timestamp    {self.min_test_timestamp}",
            f"  max context timestamp {self.max_context_timestamp}",
        ]
        if not self.passed:
            lines.append(f"  max offending ts      {self.max_offending_timestamp}")
            lines.append(f"  violations            {self.n_violations}")
            for v in self.violations:
                lines.append(f"    sample_id={v.sample_id} ts={v.timestamp} context_max_ts={v.context_max_ts}")
        lines.extend(f"  note: {n}" for n in self.notes)
        return "\n".join(lines)


def leakage_audit(datastore: Datastore, splits: DatasetSplits, max_listed: int = 20) -> AuditReport:
    """Check that nothing in ``datastore`` postdates the retrieval split.

    Every record's anchor and every event in its context windows must carry a
    timestamp no later than ``splits.boundary_retrieval_end``, and that
    boundary must precede the earliest test event. Records whose sample id is
    not a retrieval-split interaction are flagged as well. Up to
    ``max_listed`` violating records are named in the report, latest first.
    """
    boundary = splits.boundary_retrieval_end
    min_test = min((it.timestamp for it in splits.test), default=None)
    notes: list[str] = []

    ts = np.asarray(datastore.timestamps, dtype=np.int64)
    if datastore.context_max_ts is not None:
        ctx = np.maximum(ts, np.asarray(datastore.context_max_ts, dtype=np.int64))
    else:
        ctx = ts
        notes.append("datastore carries no context timestamps; only anchor timestamps were checked")

    retrieval_ids = np.fromiter((it.interaction_id for it in splits.retrieval), dtype=np.int64)
    foreign = ~np.isin(np.asarray(datastore.sample_ids, dtype=np.int64), retrieval_ids)
    late = ctx > boundary
    bad = np.flatnonzero(late | foreign)

    boundary_ok = min_test is None or boundary < min_test
    if not boundary_ok:
        notes.append(f"retrieval boundary {boundary} is not before the first test event {min_test}")

    violations = []
    max_off = None
    if len(bad):
        max_off = int(ctx[bad].max())
        # latest offenders first; sample id breaks ties
        listed = bad[np.lexsort((datastore.sample_ids[bad], -ctx[bad]))][:max_listed]
        violations = [AuditViolation(int(datastore.sample_ids[i]), int(ts[i]), int(ctx[i])) for i in listed]
        if foreign.any():
            notes.append(f"{int(foreign.sum())} records are not retrieval-split interactions")

    return AuditReport(
        passed=bool(len(bad) == 0 and boundary_ok),
        n_records=len(ts),
        boundary_retrieval_end=int(boundary),
        min_test_timestamp=None if min_test is None else int(min_test),
        max_context_timestamp=int(ctx.max()) if len(ctx) else None,
        max_offending_timestamp=max_off,
        violations=violations,
        n_violations=int(len(bad)),
        notes=notes,
    )
