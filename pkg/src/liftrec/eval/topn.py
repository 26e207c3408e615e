"""Top-N evaluation with sampled negatives.

For each held-out positive, ``n_negatives`` items the user never interacted
with anywhere in the dataset are drawn uniformly without replacement. Every
candidate is scored through the full predictor path. A candidate's features
are the positive's user id, the candidate item id and, for any further fields,
that item's most recently observed values.
"""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from ..domain import DatasetSplits, Interaction, feature_matrix
from ..predictor import Predictor, PreparedExamples, predict_prepared, retrieve_positions, user_histories
from ..retriever import Datastore
from .metrics import RankedCandidateSet

logger = logging.getLogger(__name__)

USER_FIELD, ITEM_FIELD = 0, 1


def item_profiles(interactions: Sequence[Interaction]) -> dict[int, tuple[int, ...]]:
    """Latest observed feature row for every item id."""
    out: dict[int, tuple[int, ...]] = {}
    for it in sorted(interactions, key=lambda x: (x.timestamp, x.interaction_id)):
        out[it.features[ITEM_FIELD]] = it.features
    return out


def build_ranked_sets(
    model: Predictor,
    encoder,
    store: Datastore | None,
    splits: DatasetSplits,
    n_negatives: int = 100,
    max_queries: int | None = None,
    seed: int = 0,
) -> list[RankedCandidateSet]:
    everything = splits.retrieval + splits.train + splits.test
    profiles = item_profiles(everything)
    all_items = np.array(sorted(profiles), dtype=np.int64)
    touched: dict[int, set[int]] = {}
    for it in everything:
        touched.setdefault(it.user_id, set()).add(it.features[ITEM_FIELD])

    positives = sorted((it for it in splits.test if it.label == 1), key=lambda x: x.interaction_id)
    rng = np.random.default_rng(seed)
    if max_queries is not None and len(positives) > max_queries:
        keep = np.sort(rng.choice(len(positives), size=max_queries, replace=False))
        positives = [positives[i] for i in keep]

    pool = splits.retrieval + splits.train
    histories = user_histories(positives, pool, model.config.L)
    h_all = encoder.encode_sequences(histories) if positives else np.zeros((0, encoder.config.v))
    K = model.config.K if model.config.uses_retrieval else 0
    sets: list[RankedCandidateSet] = []
    short = 0
    for q, pos in enumerate(positives):
        free = all_items[~np.isin(all_items, list(touched[pos.user_id]))]
        if len(free) == 0:
            continue
        if len(free) < n_negatives:
            short += 1
        negs = rng.choice(free, size=min(n_negatives, len(free)), replace=False)
        rows = [pos.features]
        for item in negs:
            feats = list(profiles[int(item)])
            feats[USER_FIELD] = pos.user_id
            rows.append(tuple(feats))
        target = np.asarray(rows, dtype=np.int64)
        n = len(rows)
        ret = retrieve_positions(store if K else None, target, max(K, 1))
        prep = PreparedExamples(target, np.zeros(n), np.repeat(h_all[q : q + 1], n, axis=0), ret)
        scores = predict_prepared(model, prep, store if K else None)
        items = target[:, ITEM_FIELD]
        sets.append(RankedCandidateSet(pos.user_id, tuple(zip(items.tolist(), scores.tolist())), 0))
    if short:
        logger.warning("%d queries had fewer than %d unseen items; used all available", short, n_negatives)
    return sets
