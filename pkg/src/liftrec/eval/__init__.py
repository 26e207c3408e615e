"""Metrics, leakage auditing, experiment runners and timing.

Experiment runners live in :mod:`liftrec.eval.experiments` and are not
imported here, which keeps this package importable from the predictor.
"""

from .metrics import RankedCandidateSet, auc, logloss, topn_metrics

__all__ = ["RankedCandidateSet", "auc", "logloss", "topn_metrics"]
