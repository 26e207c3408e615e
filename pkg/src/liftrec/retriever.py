"""Sparse retrieval over raw categorical keys and the key-value context datastore.

Every retrieval-split interaction is a "document" whose terms are its
(field, value) pairs. A query scores a candidate by summing, over fields
where the two agree, the IDF of the query's value:

    idf(x) = ln((N - N(x) + 0.5) / (N(x) + 0.5))

Only candidates reachable through the query's posting lists are scored, and
only positive scores are returned.
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .domain import FeatureValue, Interaction, build_user_sequences, feature_matrix
from .errors import CorruptDatastoreError, IndexEmptyError
from .kernels import get_topk

logger = logging.getLogger(__name__)

STORE_MAGIC = b"LIFTSTOR"
STORE_VERSION = 1
_HEADER = struct.Struct("<8sIIIQ")
_ENTRY = struct.Struct("<HIQ")


class InvertedIndex:
    """Posting lists keyed by (field, value) over samples sorted by id.

    Internally postings hold row positions (0..N-1); because rows are sorted
    by sample id, ascending positions are ascending ids.
    """

    def __init__(self, keys: np.ndarray, sample_ids: np.ndarray, terms=None):
        keys = np.asarray(keys, dtype=np.int64)
        sample_ids = np.asarray(sample_ids, dtype=np.int64)
        if keys.ndim != 2 or len(keys) != len(sample_ids):
            raise ValueError("keys must be (N, M) and match sample_ids")
        if len(sample_ids) > 1 and np.any(np.diff(sample_ids) <= 0):
            raise ValueError("sample_ids must be strictly ascending")
        self.keys = keys
        self.sample_ids = sample_ids
        if terms is None:
            terms = self._terms_from_keys(keys)
        self.term_fields, self.term_values, self.offsets, self.postings = terms
        self._slot = {
            (int(f), int(v)): t for t, (f, v) in enumerate(zip(self.term_fields, self.term_values))
        }
        self.df_array = np.diff(self.offsets)
        n = self.N
        self.idf_array = (
            np.log((n - self.df_array + 0.5) / (self.df_array + 0.5)) if n else np.zeros(0)
        )

    @staticmethod
    def _terms_from_keys(keys: np.ndarray):
        N, M = keys.shape
        fields, values, counts, posts = [], [], [], []
        for j in range(M):
            order = np.argsort(keys[:, j], kind="stable")
            vals, cnt = np.unique(keys[order, j], return_counts=True)
            fields.append(np.full(len(vals), j, dtype=np.int64))
            values.append(vals)
            counts.append(cnt)
            posts.append(order.astype(np.int64))
        if N == 0 or M == 0:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, np.zeros(1, dtype=np.int64), empty
        counts = np.concatenate(counts)
        offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        return np.concatenate(fields), np.concatenate(values), offsets, np.concatenate(posts)

    # -- sizes ---------------------------------------------------------------------
    @property
    def N(self) -> int:
        return len(self.sample_ids)

    @property
    def M(self) -> int:
        return self.keys.shape[1]

    @property
    def n_terms(self) -> int:
        return len(self.term_fields)

    # -- mapping views -------------------------------------------------------------
    def _term(self, feature) -> int:
        field, value = feature
        return self._slot.get((int(field), int(value)), -1)

    def df(self, feature) -> int:
        t = self._term(feature)
        return int(self.df_array[t]) if t >= 0 else 0

    def posting(self, feature) -> list[int]:
        """Ascending sample ids holding ``feature`` = (field, value)."""
        t = self._term(feature)
        if t < 0:
            return []
        return self.sample_ids[self.postings[self.offsets[t] : self.offsets[t + 1]]].tolist()

    @property
    def postings_map(self) -> dict[tuple[int, int], list[int]]:
        return {key: self.posting(key) for key in self._slot}

    @property
    def df_map(self) -> dict[tuple[int, int], int]:
        return {key: int(self.df_array[t]) for key, t in self._slot.items()}

    # -- scoring ---------------------------------------------------------------------
    def query_terms(self, queries: np.ndarray) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.int64))
        out = np.full(queries.shape, -1, dtype=np.int64)
        for q in range(len(queries)):
            for j in range(queries.shape[1]):
                out[q, j] = self._slot.get((j, int(queries[q, j])), -1)
        return out

    def search(self, queries: np.ndarray, K: int, backend: str | None = None):
        """Top-K row positions and scores for each query row; -1 / nan pad."""
        if K < 1:
            raise ValueError(f"K must be >= 1, got {K}")
        terms = self.query_terms(queries)
        kernel = get_topk(backend)
        return kernel(
            np.ascontiguousarray(terms),
            self.offsets,
            self.postings,
            np.ascontiguousarray(self.idf_array, dtype=np.float64),
            self.N,
            int(K),
        )


def build_inverted_index(retrieval: Sequence[Interaction]) -> InvertedIndex:
    rows = sorted(retrieval, key=lambda it: it.interaction_id)
    if not rows:
        return InvertedIndex(np.zeros((0, 0), dtype=np.int64), np.zeros(0, dtype=np.int64))
    return InvertedIndex(feature_matrix(rows), np.array([it.interaction_id for it in rows]))


def idf(index: InvertedIndex, feature: FeatureValue | tuple[int, int]) -> float:
    """IDF of a (field, value); values absent from the index count N(x) = 0."""
    if index.N == 0:
        raise IndexEmptyError("IDF is undefined on an empty index")
    n_x = index.df(feature)
    return math.log((index.N - n_x + 0.5) / (n_x + 0.5))


def rank_score(query: Sequence[int], candidate: Sequence[int], index: InvertedIndex) -> float:
    """Sum of the query values' IDF over fields where query and candidate agree."""
    score = 0.0
    for j, (q, c) in enumerate(zip(query, candidate)):
        if q == c:
            score += idf(index, (j, q))
    return score


# --------------------------------------------------------------------------
# datastore


@dataclass(frozen=True)
class DatastoreRecord:
    sample_id: int
    key_features: tuple[int, ...]
    h_embedding: np.ndarray
    f_embedding: np.ndarray
    anchor_timestamp: int

    def __eq__(self, other):
        if not isinstance(other, DatastoreRecord):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and self.key_features == other.key_features
            and self.anchor_timestamp == other.anchor_timestamp
            and np.array_equal(self.h_embedding, other.h_embedding)
            and np.array_equal(self.f_embedding, other.f_embedding)
        )


@dataclass(frozen=True)
class RetrievalResult:
    records: tuple[DatastoreRecord, ...]
    scores: tuple[float, ...]

    def __len__(self) -> int:
        return len(self.records)


class Datastore:
    """Column-oriented key-value store; rows sorted by sample id.

    ``context_max_ts`` is build-time provenance (latest timestamp touched by a
    record's anchor or context windows); it is not part of the file format and
    is ``None`` after loading.
    """

    def __init__(self, sample_ids, timestamps, keys, h, f, index=None, context_max_ts=None):
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64)
        self.timestamps = np.asarray(timestamps, dtype=np.int64)
        self.keys = np.asarray(keys, dtype=np.int64)
        self.h = np.asarray(h, dtype=np.float64)
        self.f = np.asarray(f, dtype=np.float64)
        self.index = index if index is not None else InvertedIndex(self.keys, self.sample_ids)
        self.context_max_ts = None if context_max_ts is None else np.asarray(context_max_ts, dtype=np.int64)
        if not (np.isfinite(self.h).all() and np.isfinite(self.f).all()):
            raise ValueError("datastore embeddings must be finite")

    def __len__(self) -> int:
        return len(self.sample_ids)

    @property
    def v(self) -> int:
        return self.h.shape[1]

    @property
    def M(self) -> int:
        return self.keys.shape[1]

    def record(self, pos: int) -> DatastoreRecord:
        return DatastoreRecord(
            int(self.sample_ids[pos]),
            tuple(int(x) for x in self.keys[pos]),
            self.h[pos],
            self.f[pos],
            int(self.timestamps[pos]),
        )

    @property
    def records(self) -> list[DatastoreRecord]:
        return [self.record(i) for i in range(len(self))]

    def search(self, queries: np.ndarray, K: int, backend: str | None = None):
        return self.index.search(queries, K, backend)


def retrieve_topk(query: Sequence[int], index: InvertedIndex, datastore: Datastore, K: int) -> RetrievalResult:
    pos, scores = index.search(np.asarray([query]), K)
    keep = pos[0] >= 0
    return RetrievalResult(
        tuple(datastore.record(int(p)) for p in pos[0][keep]),
        tuple(float(s) for s in scores[0][keep]),
    )


def build_datastore(retrieval: Sequence[Interaction], encoder, L: int) -> Datastore:
    """Encode every retrieval interaction's history/future windows.

    Windows come from the user's retrieval-split sequence only, so nothing
    later than the retrieval boundary can enter a value.
    """
    anchors: list[Interaction] = []
    hist: list[tuple[Interaction, ...]] = []
    fut: list[tuple[Interaction, ...]] = []
    ctx_max: list[int] = []
    for seq in build_user_sequences(retrieval).values():
        items = seq.interactions
        for a, it in enumerate(items):
            h = items[max(0, a - L) : a]
            f = items[a + 1 : a + 1 + L]
            anchors.append(it)
            hist.append(h)
            fut.append(f)
            ctx_max.append(max([it.timestamp] + [x.timestamp for x in h] + [x.timestamp for x in f]))
    order = sorted(range(len(anchors)), key=lambda i: anchors[i].interaction_id)
    anchors = [anchors[i] for i in order]
    hist = [hist[i] for i in order]
    fut = [fut[i] for i in order]
    ctx_max = [ctx_max[i] for i in order]
    v = encoder.config.v
    H = encoder.encode_sequences(hist) if anchors else np.zeros((0, v))
    Fm = encoder.encode_sequences(fut) if anchors else np.zeros((0, v))
    keys = feature_matrix(anchors) if anchors else np.zeros((0, encoder.config.M), dtype=np.int64)
    logger.info("built datastore with %d records", len(anchors))
    return Datastore(
        [it.interaction_id for it in anchors],
        [it.timestamp for it in anchors],
        keys,
        H,
        Fm,
        context_max_ts=ctx_max,
    )


# -- binary format ------------------------------------------------------------------


def _record_dtype(M: int, v: int) -> np.dtype:
    key = np.dtype([("field", "<u2"), ("value", "<u4")])
    return np.dtype([("sid", "<u8"), ("ts", "<i8"), ("keys", key, (M,)), ("emb", "<f8", (2 * v,))])


def dumps_datastore(store: Datastore) -> bytes:
    N, M, v = len(store), store.M, store.v
    rec = np.zeros(N, dtype=_record_dtype(M, v))
    rec["sid"] = store.sample_ids
    rec["ts"] = store.timestamps
    rec["keys"]["field"] = np.arange(M)[None, :]
    rec["keys"]["value"] = store.keys
    rec["emb"] = np.concatenate([store.h, store.f], axis=1) if N else np.zeros((0, 2 * v))
    idx = store.index
    parts = [_HEADER.pack(STORE_MAGIC, STORE_VERSION, v, M, N), rec.tobytes(), struct.pack("<Q", idx.n_terms)]
    for t in range(idx.n_terms):
        lo, hi = idx.offsets[t], idx.offsets[t + 1]
        parts.append(_ENTRY.pack(int(idx.term_fields[t]), int(idx.term_values[t]), int(hi - lo)))
        parts.append(idx.sample_ids[idx.postings[lo:hi]].astype("<u8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def loads_datastore(buf: bytes) -> Datastore:
    if len(buf) < _HEADER.size + 12 or buf[:8] != STORE_MAGIC:
        raise CorruptDatastoreError("bad magic, not a datastore file")
    _, version, v, M, N = _HEADER.unpack_from(buf, 0)
    if version != STORE_VERSION:
        raise CorruptDatastoreError(f"unsupported datastore version {version}")
    (crc,) = struct.unpack_from("<I", buf, len(buf) - 4)
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptDatastoreError("checksum mismatch (file truncated or corrupted)")
    try:
        dt = _record_dtype(M, v)
        pos = _HEADER.size
        rec = np.frombuffer(buf, dtype=dt, count=N, offset=pos)
        pos += N * dt.itemsize
        (n_terms,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        sample_ids = rec["sid"].astype(np.int64)
        id_to_pos = {int(s): i for i, s in enumerate(sample_ids)}
        fields = np.empty(n_terms, dtype=np.int64)
        values = np.empty(n_terms, dtype=np.int64)
        offsets = np.zeros(n_terms + 1, dtype=np.int64)
        posts = []
        for t in range(n_terms):
            fields[t], values[t], df = _ENTRY.unpack_from(buf, pos)
            pos += _ENTRY.size
            ids = np.frombuffer(buf, dtype="<u8", count=df, offset=pos)
            pos += 8 * df
            posts.append(np.fromiter((id_to_pos[int(s)] for s in ids), dtype=np.int64, count=df))
            offsets[t + 1] = offsets[t] + df
    except (struct.error, ValueError, KeyError) as exc:
        raise CorruptDatastoreError(f"malformed datastore: {exc}") from None
    if pos != len(buf) - 4:
        raise CorruptDatastoreError("datastore length does not match its header")
    if N and np.any(rec["keys"]["field"] != np.arange(M)[None, :]):
        raise CorruptDatastoreError("record key fields out of order")
    keys = rec["keys"]["value"].astype(np.int64)
    emb = np.array(rec["emb"], dtype=np.float64).reshape(N, 2 * v)
    postings = np.concatenate(posts) if posts else np.zeros(0, dtype=np.int64)
    index = InvertedIndex(keys, sample_ids, terms=(fields, values, offsets, postings))
    return Datastore(sample_ids, rec["ts"].astype(np.int64), keys, emb[:, :v], emb[:, v:], index=index)


def save_datastore(store: Datastore, path: str | Path) -> None:
    Path(path).write_bytes(dumps_datastore(store))


def load_datastore(path: str | Path) -> Datastore:
    return loads_datastore(Path(path).read_bytes())


def predicted_file_size(n_records: int, M: int, v: int, n_terms: int) -> int:
    """Exact byte size of a datastore file with these dimensions."""
    record = 8 + 8 + 6 * M + 16 * v
    postings = 8 * M * n_records
    return _HEADER.size + n_records * record + 8 + n_terms * _ENTRY.size + postings + 4
