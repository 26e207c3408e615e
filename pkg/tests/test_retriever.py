import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftrec import kernels
from liftrec.domain import Interaction
from liftrec.encoder import EncoderConfig, SequenceEncoder
from liftrec.errors import CorruptDatastoreError, IndexEmptyError
from liftrec.retriever import (
    STORE_MAGIC,
    Datastore,
    InvertedIndex,
    build_datastore,
    build_inverted_index,
    dumps_datastore,
    idf,
    load_datastore,
    loads_datastore,
    predicted_file_size,
    rank_score,
    retrieve_topk,
    save_datastore,
)

from conftest import make_interactions

BACKENDS = sorted(kernels.BACKENDS)


def random_index(rng, n, M=3, vocab=6):
    keys = rng.integers(1, vocab, size=(n, M))
    ids = np.sort(rng.choice(10 * n + 10, size=n, replace=False))
    return InvertedIndex(keys, ids)


def brute_force(query, index, K):
    """Score every sample with rank_score; keep positives, order by (-score, id)."""
    scored = []
    for pos in range(index.N):
        s = rank_score(query, index.keys[pos], index)
        if s > 0:
            scored.append((-s, int(index.sample_ids[pos]), s))
    scored.sort()
    return [sid for _, sid, _ in scored[:K]], [s for _, _, s in scored[:K]]


def small_store(index, v=2, rng=None):
    rng = np.random.default_rng(0) if rng is None else rng
    n = index.N
    return Datastore(index.sample_ids, index.sample_ids * 10, index.keys,
                     rng.normal(size=(n, v)), rng.normal(size=(n, v)), index=index)


class TestInvertedIndex:
    def test_shared_feature_posting(self):
        its = [Interaction(i, 1, 1, i, (1, 5, 1 + i), 0) for i in range(3)]
        idx = build_inverted_index(its)
        assert idx.df((1, 5)) == 3
        assert idx.posting((1, 5)) == [0, 1, 2]

    def test_empty(self):
        idx = build_inverted_index([])
        assert idx.N == 0
        assert idx.postings_map == {}

    def test_field_df_sums_to_n(self, rng):
        idx = random_index(rng, 1000, M=4, vocab=30)
        for j in range(4):
            assert sum(df for (f, _), df in idx.df_map.items() if f == j) == 1000

    def test_posting_lengths_equal_df(self, rng):
        idx = random_index(rng, 200)
        for key, ids in idx.postings_map.items():
            assert len(ids) == idx.df_map[key]
            assert ids == sorted(ids)

    def test_rejects_unsorted_ids(self):
        with pytest.raises(ValueError):
            InvertedIndex(np.ones((2, 1)), np.array([3, 1]))


class TestIdf:
    def idx_with(self, n, nx):
        keys = np.array([[1] * nx + [2] * (n - nx)]).T
        return InvertedIndex(keys, np.arange(n))

    def test_balanced_is_zero(self):
        assert idf(self.idx_with(10, 5), (0, 1)) == 0.0

    def test_value(self):
        # ln(90.5 / 10.5) = 2.1539746
        assert idf(self.idx_with(100, 10), (0, 1)) == pytest.approx(2.1539746, abs=1e-7)

    def test_negative_kept(self):
        val = idf(self.idx_with(10, 9), (0, 1))
        assert val == pytest.approx(math.log(1.5 / 9.5), abs=1e-15)
        assert val < 0

    def test_absent_value_uses_zero_count(self):
        assert idf(self.idx_with(10, 9), (0, 77)) == pytest.approx(math.log(10.5 / 0.5), abs=1e-15)

    def test_empty_index(self):
        with pytest.raises(IndexEmptyError):
            idf(build_inverted_index([]), (0, 1))

    def test_random_pairs_match_formula(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 300))
            nx = int(rng.integers(0, n + 1))
            got = idf(self.idx_with(n, nx), (0, 1))
            assert abs(got - math.log((n - nx + 0.5) / (nx + 0.5))) <= 1e-12

    def test_duplicate_sample_weakly_lowers_idf(self, rng):
        idx = random_index(rng, 50)
        dup = InvertedIndex(np.vstack([idx.keys, idx.keys[:1]]),
                            np.append(idx.sample_ids, idx.sample_ids[-1] + 1))
        for j in range(idx.M):
            key = (j, int(idx.keys[0, j]))
            assert dup.df(key) == idx.df(key) + 1
            assert idf(dup, key) <= idf(idx, key)


class TestRankScore:
    def toy(self):
        keys = np.array([[1, 1, 1], [1, 2, 2], [2, 2, 1], [3, 3, 3], [1, 3, 2]])
        return InvertedIndex(keys, np.arange(5))

    def test_disjoint(self):
        assert rank_score((9, 9, 9), (1, 1, 1), self.toy()) == 0.0

    def test_full_match(self):
        idx = self.toy()
        q = (1, 2, 1)
        assert rank_score(q, q, idx) == pytest.approx(sum(idf(idx, (j, v)) for j, v in enumerate(q)))

    def test_hand_sum_fields_0_and_2(self):
        # field 0 value 1 occurs 3 times, field 2 value 2 twice, N = 5
        score = rank_score((1, 3, 2), (1, 1, 2), self.toy())
        assert score == pytest.approx(math.log(2.5 / 3.5) + math.log(3.5 / 2.5), abs=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(1, 4), min_size=3, max_size=3), st.lists(st.integers(1, 4), min_size=3, max_size=3))
    def test_additive_per_field(self, q, c):
        idx = self.toy()
        expected = sum(idf(idx, (j, q[j])) for j in range(3) if q[j] == c[j])
        assert rank_score(q, c, idx) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("backend", BACKENDS)
class TestSearch:
    def test_matches_brute_force(self, backend, rng):
        idx = random_index(rng, 1000, M=3, vocab=12)
        queries = rng.integers(1, 14, size=(50, 3))
        pos, scores = idx.search(queries, 10, backend=backend)
        for q in range(50):
            ids, sc = brute_force(queries[q], idx, 10)
            keep = pos[q] >= 0
            assert idx.sample_ids[pos[q][keep]].tolist() == ids
            np.testing.assert_allclose(scores[q][keep], sc, rtol=0, atol=1e-12)

    def test_unknown_query_is_empty(self, backend, rng):
        idx = random_index(rng, 50)
        pos, scores = idx.search(np.array([[99, 99, 99]]), 5, backend=backend)
        assert (pos == -1).all() and np.isnan(scores).all()

    def test_k_larger_than_candidates(self, backend):
        keys = np.array([[1, 1], [1, 2], [2, 2], [3, 3], [4, 4], [5, 5]])
        idx = InvertedIndex(keys, np.arange(6) * 2)
        pos, scores = idx.search(np.array([[1, 2]]), 10, backend=backend)
        got = idx.sample_ids[pos[0][pos[0] >= 0]].tolist()
        assert got == [2, 0, 4]  # full match first, then ties by ascending id
        assert np.all(np.diff(scores[0][: len(got)]) <= 0)

    def test_ties_by_sample_id(self, backend):
        keys = np.array([[1, 7], [1, 8], [2, 9], [3, 9], [4, 5], [5, 6]])
        idx = InvertedIndex(keys, np.array([3, 11, 12, 20, 21, 30]))
        pos, scores = idx.search(np.array([[1, 0], [0, 9]]), 3, backend=backend)
        assert idx.sample_ids[pos[0][:2]].tolist() == [3, 11]
        assert scores[0][0] == scores[0][1]
        assert pos[1].tolist()[2] == -1
        assert idx.sample_ids[pos[1][:2]].tolist() == [12, 20]

    def test_negative_scores_excluded(self, backend):
        # field 0 value 1 holds 9 of 10 samples: its IDF is negative
        keys = np.array([[1]] * 9 + [[2]])
        idx = InvertedIndex(keys, np.arange(10))
        pos, _ = idx.search(np.array([[1], [2]]), 5, backend=backend)
        assert (pos[0] == -1).all()
        assert pos[1].tolist() == [9, -1, -1, -1, -1]

    def test_k_must_be_positive(self, backend, rng):
        with pytest.raises(ValueError):
            random_index(rng, 10).search(np.array([[1, 1, 1]]), 0, backend=backend)


class TestRetrieveTopk:
    def test_records_and_scores(self, rng):
        idx = random_index(rng, 100)
        store = small_store(idx)
        q = idx.keys[5]
        res = retrieve_topk(q, idx, store, 4)
        ids, sc = brute_force(q, idx, 4)
        assert [r.sample_id for r in res.records] == ids
        assert list(res.scores) == pytest.approx(sc)
        assert len(res) <= 4

    def test_empty_result(self, rng):
        idx = random_index(rng, 20)
        assert len(retrieve_topk((50, 50, 50), idx, small_store(idx), 3)) == 0


def tiny_encoder(vocab=(8, 8, 5)):
    return SequenceEncoder(EncoderConfig(vocab, w=2, d_model=4, n_layers=1, n_heads=1, L_max=8), seed=0)


class TestBuildDatastore:
    def test_single_interaction_user_gets_null_halves(self):
        its = make_interactions([1, 2, 3, 4], users=[1, 1, 1, 2], n_items=4)
        enc = tiny_encoder()
        store = build_datastore(its, enc, L=2)
        null = enc.params["null_seq"].data
        lone = store.record(3)
        assert lone.sample_id == 3
        np.testing.assert_array_equal(lone.h_embedding, null)
        np.testing.assert_array_equal(lone.f_embedding, null)
        # first and last of user 1 have exactly one empty half
        np.testing.assert_array_equal(store.record(0).h_embedding, null)
        assert not np.array_equal(store.record(0).f_embedding, null)
        np.testing.assert_array_equal(store.record(2).f_embedding, null)

    def test_record_per_interaction(self, small_dataset):
        retrieval = small_dataset.interactions[:300]
        store = build_datastore(retrieval, tiny_encoder(small_dataset.vocab_sizes), L=3)
        assert len(store) == 300
        assert sorted(store.sample_ids.tolist()) == sorted(it.interaction_id for it in retrieval)
        assert store.context_max_ts.max() <= max(it.timestamp for it in retrieval)

    def test_windows_use_encoder(self):
        its = make_interactions(range(6), users=[1] * 6, n_items=4)
        enc = tiny_encoder()
        store = build_datastore(its, enc, L=2)
        np.testing.assert_allclose(store.record(3).h_embedding, enc.encode_sequences([its[1:3]])[0])
        np.testing.assert_allclose(store.record(3).f_embedding, enc.encode_sequences([its[4:6]])[0])


class TestSerialization:
    def test_round_trip_equal(self, rng, tmp_path):
        store = small_store(random_index(rng, 60), v=3)
        save_datastore(store, tmp_path / "s.bin")
        back = load_datastore(tmp_path / "s.bin")
        assert back.records == store.records
        assert back.index.postings_map == store.index.postings_map
        assert dumps_datastore(back) == dumps_datastore(store)

    def test_loaded_store_searches_identically(self, rng):
        store = small_store(random_index(rng, 200), v=2)
        back = loads_datastore(dumps_datastore(store))
        q = rng.integers(1, 6, size=(10, 3))
        for a, b in zip(store.search(q, 5), back.search(q, 5)):
            np.testing.assert_array_equal(a, b)

    def test_header_layout(self, rng):
        buf = dumps_datastore(small_store(random_index(rng, 7), v=3))
        assert buf[:8] == STORE_MAGIC
        assert np.frombuffer(buf[8:20], "<u4").tolist() == [1, 3, 3]
        assert np.frombuffer(buf[20:28], "<u8").tolist() == [7]

    def test_empty_round_trip(self):
        store = Datastore(np.zeros(0), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3)))
        back = loads_datastore(dumps_datastore(store))
        assert len(back) == 0 and back.v == 3 and back.M == 2

    def test_truncated(self, rng):
        buf = dumps_datastore(small_store(random_index(rng, 20)))
        for cut in (len(buf) - 1, len(buf) // 2, 10):
            with pytest.raises(CorruptDatastoreError):
                loads_datastore(buf[:cut])

    def test_bad_magic(self, rng):
        buf = dumps_datastore(small_store(random_index(rng, 5)))
        with pytest.raises(CorruptDatastoreError, match="magic"):
            loads_datastore(b"NOTSTORE" + buf[8:])

    def test_bad_version(self, rng):
        buf = bytearray(dumps_datastore(small_store(random_index(rng, 5))))
        buf[8] = 9
        with pytest.raises(CorruptDatastoreError, match="version"):
            loads_datastore(bytes(buf))

    def test_flipped_byte(self, rng):
        buf = bytearray(dumps_datastore(small_store(random_index(rng, 5))))
        buf[40] ^= 0xFF
        with pytest.raises(CorruptDatastoreError, match="checksum"):
            loads_datastore(bytes(buf))

    def test_size_prediction_exact(self, rng):
        store = small_store(random_index(rng, 300, M=4, vocab=20), v=5)
        buf = dumps_datastore(store)
        assert len(buf) == predicted_file_size(len(store), store.M, store.v, store.index.n_terms)

    def test_size_of_large_store(self, rng):
        n, M, v = 10_000, 3, 64
        idx = random_index(rng, n, M=M, vocab=500)
        store = Datastore(idx.sample_ids, idx.sample_ids, idx.keys, rng.normal(size=(n, v)),
                          rng.normal(size=(n, v)), index=idx)
        size = len(dumps_datastore(store))
        # key bytes per record: id and timestamp, M (field, value) pairs, and M posting entries
        key_bytes = 8 + 8 + 6 * M + 8 * M
        approx = 28 + n * (key_bytes + 2 * v * 8)
        assert abs(size - approx) / approx < 0.02

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            Datastore([1], [1], [[1]], [[np.nan]], [[0.0]])
