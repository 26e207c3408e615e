"""Reading interaction logs, pretraining corpus construction and synthetic data."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import Interaction, InteractionSequence, build_user_sequences
from .errors import ParseError, SchemaError

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("user_id", "item_id", "timestamp", "label")
PAD_TOKEN = "<pad>"


@dataclass
class Dataset:
    """Parsed interactions plus the per-field vocabularies that produced them.

    ``vocabs[j][k]`` is the raw string of value id ``k`` in field ``j``; entry 0
    is the padding token.
    """

    fields: tuple[str, ...]
    interactions: list[Interaction]
    vocabs: list[list[str]] = field(repr=False)

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def vocab_sizes(self) -> tuple[int, ...]:
        return tuple(len(v) for v in self.vocabs)

    def __len__(self) -> int:
        return len(self.interactions)


class _VocabBuilder:
    def __init__(self, n_fields: int):
        self.maps: list[dict[str, int]] = [{} for _ in range(n_fields)]
        self.tokens: list[list[str]] = [[PAD_TOKEN] for _ in range(n_fields)]

    def encode(self, j: int, token: str) -> int:
        m = self.maps[j]
        vid = m.get(token)
        if vid is None:
            vid = len(self.tokens[j])
            m[token] = vid
            self.tokens[j].append(token)
        return vid


def _feature_columns(header: Sequence[str]) -> tuple[str, ...]:
    extra = tuple(c for c in header if c not in REQUIRED_COLUMNS)
    return ("user_id", "item_id") + extra


def _rows_to_dataset(header: Sequence[str], rows: Iterable[tuple[int, Sequence[str]]]) -> Dataset:
    fields = _feature_columns(header)
    col = {name: i for i, name in enumerate(header)}
    feat_cols = [col[f] for f in fields]
    ts_col, label_col = col["timestamp"], col["label"]
    vocab = _VocabBuilder(len(fields))
    out: list[Interaction] = []
    for lineno, row in rows:
        if len(row) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} columns, got {len(row)}")
        try:
            ts = int(row[ts_col])
        except ValueError:
            raise ParseError(f"line {lineno}: timestamp {row[ts_col]!r} is not an integer") from None
        lab = row[label_col].strip()
        if lab not in ("0", "1"):
            raise ParseError(f"line {lineno}: label {lab!r} is not 0 or 1")
        feats = tuple(vocab.encode(j, row[c]) for j, c in enumerate(feat_cols))
        out.append(
            Interaction(
                interaction_id=len(out),
                user_id=feats[0],
                item_id=feats[1],
                timestamp=ts,
                features=feats,
                label=int(lab),
            )
        )
    return Dataset(fields, out, vocab.tokens)


def parse_interactions(path: str | Path, schema: Sequence[str] | None = None) -> Dataset:
    """Read an interaction CSV.

    ``schema`` lists the extra categorical columns the caller expects besides
    the required ones; a missing column raises ``SchemaError``.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: file is empty, no header row") from None
        for name in tuple(REQUIRED_COLUMNS) + tuple(schema or ()):
            if name not in header:
                raise SchemaError(f"{path}: missing column {name!r}")
        # header is line 1
        return _rows_to_dataset(header, ((i, r) for i, r in enumerate(reader, start=2)))


def write_interactions(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset back to the CSV layout ``parse_interactions`` reads."""
    extra = dataset.fields[2:]
    header = list(REQUIRED_COLUMNS) + list(extra)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for it in dataset.interactions:
            toks = [dataset.vocabs[j][v] for j, v in enumerate(it.features)]
            w.writerow([toks[0], toks[1], it.timestamp, it.label] + toks[2:])


# --------------------------------------------------------------------------
# pretraining corpus


@dataclass(frozen=True)
class PretrainCorpus:
    sequences: tuple[InteractionSequence, ...]
    source_split_tag: str = "retrieval"

    def __len__(self) -> int:
        return len(self.sequences)


def build_pretrain_corpus(retrieval: Sequence[Interaction], L: int) -> PretrainCorpus:
    """Cut every user's retrieval-split sequence into consecutive length-L chunks.

    A trailing remainder is kept when it has at least two interactions.
    """
    if L < 2:
        raise ValueError(f"L must be >= 2, got {L}")
    chunks: list[InteractionSequence] = []
    for uid, seq in build_user_sequences(retrieval).items():
        items = seq.interactions
        for start in range(0, len(items), L):
            piece = items[start : start + L]
            if len(piece) >= 2:
                chunks.append(InteractionSequence(uid, piece))
    return PretrainCorpus(tuple(chunks))


# --------------------------------------------------------------------------
# synthetic data


CLICK_MODELS = ("interest", "affinity")


@dataclass(frozen=True)
class SynthConfig:
    """Latent-interest simulator settings.

    Each user's interest is a genre that switches with probability
    ``interest_transition_prob`` per event. Every user also has a preference
    vector pi_u ~ Dirichlet(preference_concentration) over genres.

    ``click_model="interest"``: a switch draws the new genre from pi_u, items
    are shown uniformly, and an impression is clicked with ``click_prob_match``
    when the item genre is the user's current or next-step interest, else
    ``click_prob_nomatch``.

    ``click_model="affinity"``: the interest chain decides what is shown
    (new interests drawn uniformly), and the click probability is
    ``nomatch + (match - nomatch) * pi_u[g] / max(pi_u)`` for item genre g, a
    fixed taste that exposure alone does not reveal.

    With probability ``exposure_follow_prob`` an impression is drawn from the
    current-interest genre rather than uniformly, which makes a user's
    timeline come in genre bursts. With ``user_bias_scale > 0`` every user
    gets a fixed click propensity b_u ~ N(0, scale^2) added on the logit scale.
    """

    n_users: int = 500
    n_items: int = 200
    n_genres: int = 8
    interest_transition_prob: float = 0.15
    session_length_mean: float = 100.0
    click_prob_match: float = 0.8
    click_prob_nomatch: float = 0.2
    seed: int = 0
    preference_concentration: float = 0.5
    user_bias_scale: float = 0.0
    exposure_follow_prob: float = 0.0
    click_model: str = "interest"

    def __post_init__(self):
        if self.click_model not in CLICK_MODELS:
            raise ValueError(f"click_model must be one of {CLICK_MODELS}, got {self.click_model!r}")
        for name in ("interest_transition_prob", "click_prob_match", "click_prob_nomatch", "exposure_follow_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.click_prob_match < self.click_prob_nomatch:
            raise ValueError("click_prob_match must not be below click_prob_nomatch")
        if self.n_users < 1 or self.n_items < 1 or self.n_genres < 1:
            raise ValueError("n_users, n_items and n_genres must be positive")
        if self.user_bias_scale < 0:
            raise ValueError("user_bias_scale must be non-negative")
        if self.session_length_mean <= 0 or self.preference_concentration <= 0:
            raise ValueError("session_length_mean and preference_concentration must be positive")

    @property
    def has_signal(self) -> bool:
        return self.click_prob_match > self.click_prob_nomatch or self.user_bias_scale > 0


@dataclass(frozen=True)
class SynthTrace:
    """Latent state behind each generated event, in emission order."""

    interest: np.ndarray
    next_interest: np.ndarray
    item_genre: np.ndarray
    matched: np.ndarray
    click_prob: np.ndarray


def _interest_chain(rng: np.random.Generator, n: int, pref: np.ndarray, p_switch: float) -> np.ndarray:
    # n + 1 states: the last one is the next-step interest of the final event
    draws = rng.choice(len(pref), size=n + 1, p=pref)
    switch = rng.random(n + 1) < p_switch
    switch[0] = True
    last = np.maximum.accumulate(np.where(switch, np.arange(n + 1), 0))
    return draws[last]


def generate_synthetic(config: SynthConfig, return_trace: bool = False):
    """Simulate a click log; fully determined by ``config.seed``.

    Events of all users are interleaved at random and stamped 0, 1, 2, ...
    Features are (user_id, item_id, item_genre).
    """
    rng = np.random.default_rng(config.seed)
    item_genre = rng.integers(config.n_genres, size=config.n_items)
    lengths = np.maximum(2, rng.poisson(config.session_length_mean, size=config.n_users))
    affinity = config.click_model == "affinity"

    chains = []
    prefs = np.empty((config.n_users, config.n_genres))
    for u in range(config.n_users):
        prefs[u] = rng.dirichlet(np.full(config.n_genres, config.preference_concentration))
        draw_from = np.full(config.n_genres, 1.0 / config.n_genres) if affinity else prefs[u]
        chains.append(_interest_chain(rng, int(lengths[u]), draw_from, config.interest_transition_prob))

    order = np.repeat(np.arange(config.n_users), lengths)
    rng.shuffle(order)
    n = len(order)
    items = rng.integers(config.n_items, size=n)
    coins = rng.random(n)

    step = np.zeros(config.n_users, dtype=np.int64)
    interest = np.empty(n, dtype=np.int64)
    nxt = np.empty(n, dtype=np.int64)
    for t, u in enumerate(order):
        k = step[u]
        interest[t] = chains[u][k]
        nxt[t] = chains[u][k + 1]
        step[u] = k + 1
    if config.exposure_follow_prob > 0:
        # drawn after the base stream so that follow 0 leaves it unchanged
        follow = rng.random(n) < config.exposure_follow_prob
        pick = rng.random(n)
        by_genre = [np.flatnonzero(item_genre == g) for g in range(config.n_genres)]
        sizes = np.array([len(b) for b in by_genre])
        follow &= sizes[interest] > 0
        for t in np.flatnonzero(follow):
            pool = by_genre[interest[t]]
            items[t] = pool[int(pick[t] * len(pool))]
    genres = item_genre[items]
    matched = (genres == interest) | (genres == nxt)
    if affinity:
        taste = prefs / prefs.max(axis=1, keepdims=True)
        probs = config.click_prob_nomatch + (config.click_prob_match - config.click_prob_nomatch) * taste[order, genres]
    else:
        probs = np.where(matched, config.click_prob_match, config.click_prob_nomatch)
    if config.user_bias_scale > 0:
        # drawn last so that scale 0 reproduces the unbiased stream exactly
        bias = rng.normal(0.0, config.user_bias_scale, size=config.n_users)
        with np.errstate(divide="ignore"):
            logit = np.log(probs) - np.log1p(-probs)
        probs = 1.0 / (1.0 + np.exp(-(logit + bias[order])))
    labels = (coins < probs).astype(np.int64)

    header = ("user_id", "item_id", "timestamp", "label", "item_genre")
    rows = (
        (t + 2, (f"u{order[t]}", f"i{items[t]}", str(t), str(labels[t]), f"g{genres[t]}"))
        for t in range(n)
    )
    dataset = _rows_to_dataset(header, rows)
    logger.info("generated %d synthetic events, positive rate %.3f", n, labels.mean())
    if return_trace:
        return dataset, SynthTrace(interest, nxt, genres, matched, probs)
    return dataset
