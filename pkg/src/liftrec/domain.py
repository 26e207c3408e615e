"""Core value types, temporal splitting and context extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import BadAnchor, BadFractions, EmptyDataset


class FeatureValue(NamedTuple):
    field_index: int
    value_id: int


@dataclass(frozen=True, slots=True)
class Interaction:
    """One user-item event.

    ``features`` holds the categorical value id of every field in field order;
    value id 0 is reserved for padding.
    """

    interaction_id: int
    user_id: int
    item_id: int
    timestamp: int
    features: tuple[int, ...]
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    @property
    def order_key(self) -> tuple[int, int]:
        return (self.timestamp, self.interaction_id)

    def feature_values(self) -> tuple[FeatureValue, ...]:
        return tuple(FeatureValue(j, v) for j, v in enumerate(self.features))


def sort_key(it: Interaction) -> tuple[int, int]:
    return (it.timestamp, it.interaction_id)


@dataclass(frozen=True)
class InteractionSequence:
    user_id: int
    interactions: tuple[Interaction, ...]

    def __len__(self) -> int:
        return len(self.interactions)

    def __getitem__(self, idx):
        return self.interactions[idx]


@dataclass(frozen=True)
class Context:
    history: tuple[Interaction, ...]
    future: tuple[Interaction, ...]

    @property
    def history_true_len(self) -> int:
        return len(self.history)

    @property
    def future_true_len(self) -> int:
        return len(self.future)


@dataclass(frozen=True)
class DatasetSplits:
    retrieval: tuple[Interaction, ...]
    train: tuple[Interaction, ...]
    test: tuple[Interaction, ...]
    boundary_retrieval_end: int
    boundary_train_end: int

    def ids(self, part: str) -> set[int]:
        return {it.interaction_id for it in getattr(self, part)}


def _part_size(fraction: float, n: int) -> int:
    # guard against 0.29 * 100 == 28.999999999999996
    return int(math.floor(fraction * n + 1e-9))


def temporal_split(
    interactions: Sequence[Interaction], fractions: tuple[float, float, float]
) -> DatasetSplits:
    """Split by global time into retrieval / train / test parts.

    Records are ordered by ``(timestamp, interaction_id)``. Train takes
    ``floor(t * N)`` records and test ``floor(e * N)``; retrieval, the earliest
    part, absorbs the rounding remainder so it is never empty.
    """
    if len(interactions) == 0:
        raise EmptyDataset("cannot split an empty dataset")
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise BadFractions(f"fractions must be three positive numbers, got {fractions!r}")
    if abs(sum(fractions) - 1.0) > 1e-6:
        raise BadFractions(f"fractions must sum to 1, got {sum(fractions)!r}")

    ordered = sorted(interactions, key=sort_key)
    n = len(ordered)
    n_train = _part_size(fractions[1], n)
    n_test = _part_size(fractions[2], n)
    n_retr = n - n_train - n_test

    retrieval = tuple(ordered[:n_retr])
    train = tuple(ordered[n_retr : n_retr + n_train])
    test = tuple(ordered[n_retr + n_train :])
    b_retr = retrieval[-1].timestamp
    b_train = train[-1].timestamp if train else b_retr
    return DatasetSplits(retrieval, train, test, b_retr, b_train)


def build_user_sequences(interactions: Iterable[Interaction]) -> dict[int, InteractionSequence]:
    by_user: dict[int, list[Interaction]] = {}
    for it in interactions:
        by_user.setdefault(it.user_id, []).append(it)
    return {
        uid: InteractionSequence(uid, tuple(sorted(items, key=sort_key)))
        for uid, items in sorted(by_user.items())
    }


def extract_context(sequence: InteractionSequence, anchor_index: int, L: int) -> Context:
    """History and future windows around ``sequence[anchor_index]``.

    The anchor itself belongs to neither window.
    """
    if L < 1:
        raise ValueError(f"L must be >= 1, got {L}")
    T = len(sequence)
    if not 0 <= anchor_index < T:
        raise BadAnchor(f"anchor_index {anchor_index} outside [0, {T})")
    items = sequence.interactions
    history = items[max(0, anchor_index - L) : anchor_index]
    future = items[anchor_index + 1 : min(T, anchor_index + 1 + L)]
    return Context(tuple(history), tuple(future))


def feature_matrix(interactions: Sequence[Interaction]) -> np.ndarray:
    """(n, M) int64 array of feature value ids."""
    if not interactions:
        return np.zeros((0, 0), dtype=np.int64)
    return np.asarray([it.features for it in interactions], dtype=np.int64)


def label_vector(interactions: Sequence[Interaction]) -> np.ndarray:
    return np.asarray([it.label for it in interactions], dtype=np.float64)
