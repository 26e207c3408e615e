import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from liftrec.domain import Interaction
from liftrec.encoder import EncoderConfig, SequenceEncoder
from liftrec.errors import EmptyDataset, ShapeError
from liftrec.ndcore import grad_check
from liftrec.predictor import (
    MODES,
    Predictor,
    PredictorBatch,
    PredictorConfig,
    aggregate_retrieved,
    batch_from_result,
    interaction_layer,
    key_attention,
    predict_forward,
    predict_prepared,
    prepare_examples,
    train_predictor,
    user_histories,
)
from liftrec.retriever import RetrievalResult, build_datastore

from conftest import make_interactions

VOCAB = (4, 6, 5)


def random_batch(rng, B=3, K=2, M=3, v=4, vocab=VOCAB, valid=None):
    target = np.stack([rng.integers(1, n, size=B) for n in vocab[:M]], axis=1)
    keys = np.stack([rng.integers(1, n, size=(B, K)) for n in vocab[:M]], axis=2)
    if valid is None:
        valid = np.ones((B, K), dtype=bool)
    return PredictorBatch(target, rng.normal(size=(B, v)), keys, rng.normal(size=(B, K, v)),
                          rng.normal(size=(B, K, v)), valid, rng.integers(0, 2, size=B).astype(float))


def model(mode="FULL", K=2, vocab=VOCAB, v=4, **kw):
    return Predictor(PredictorConfig(ablation_mode=mode, K=K, w=kw.pop("w", 3), mlp_hidden=kw.pop("mlp_hidden", (5,)),
                                     **kw), vocab, v)


class TestKeyAttention:
    def test_single_key(self, rng):
        a = key_attention(rng.normal(size=4), rng.normal(size=(1, 4)), rng.normal(size=(4, 4)))
        np.testing.assert_array_equal(a.data, [1.0])

    def test_zero_w_is_uniform(self, rng):
        a = key_attention(rng.normal(size=4), rng.normal(size=(5, 4)), np.zeros((4, 4)))
        np.testing.assert_allclose(a.data, np.full(5, 0.2), rtol=0, atol=1e-15)

    def test_identical_keys_uniform(self, rng):
        key = rng.normal(size=4)
        a = key_attention(rng.normal(size=4), np.tile(key, (3, 1)), rng.normal(size=(4, 4)))
        np.testing.assert_allclose(a.data, np.full(3, 1 / 3), rtol=0, atol=1e-15)

    def test_matches_direct_softmax(self, rng):
        x, keys, W = rng.normal(size=4), rng.normal(size=(6, 4)), rng.normal(size=(4, 4))
        s = keys @ W @ x
        expected = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        np.testing.assert_allclose(key_attention(x, keys, W).data, expected, rtol=1e-12)

    def test_masked_slots_get_zero(self, rng):
        a = key_attention(rng.normal(size=4), rng.normal(size=(3, 4)), rng.normal(size=(4, 4)),
                          np.array([True, False, True]))
        assert a.data[1] == 0.0
        assert a.data.sum() == pytest.approx(1.0, abs=1e-12)

    def test_no_keys_rejected(self, rng):
        with pytest.raises(ValueError):
            key_attention(rng.normal(size=4), np.zeros((0, 4)), np.eye(4))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 10_000), st.floats(0.1, 30))
    def test_simplex(self, k, seed, scale):
        r = np.random.default_rng(seed)
        a = key_attention(scale * r.normal(size=3), scale * r.normal(size=(k, 3)), r.normal(size=(3, 3))).data
        assert np.all(a >= 0)
        assert abs(a.sum() - 1) < 1e-9


class TestAggregate:
    def test_one_hot(self, rng):
        keys, h, f = rng.normal(size=(3, 4)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
        out = aggregate_retrieved(np.array([0.0, 1.0, 0.0]), keys, h, f)
        for got, src in zip(out, (keys, h, f)):
            np.testing.assert_array_equal(got.data, src[1])

    def test_uniform_identical(self, rng):
        k, h, f = rng.normal(size=4), rng.normal(size=2), rng.normal(size=2)
        out = aggregate_retrieved(np.full(3, 1 / 3), np.tile(k, (3, 1)), np.tile(h, (3, 1)), np.tile(f, (3, 1)))
        for got, src in zip(out, (k, h, f)):
            np.testing.assert_allclose(got.data, src, rtol=1e-14)

    def test_empty_returns_null(self):
        null = (np.ones(4), np.full(2, 2.0), np.full(2, 3.0))
        out = aggregate_retrieved(np.zeros(0), np.zeros((0, 4)), np.zeros((0, 2)), np.zeros((0, 2)), null)
        for got, src in zip(out, null):
            np.testing.assert_array_equal(got.data, src)

    def test_length_mismatch(self, rng):
        with pytest.raises(ShapeError):
            aggregate_retrieved(np.full(2, 0.5), rng.normal(size=(3, 4)), rng.normal(size=(3, 2)),
                                rng.normal(size=(3, 2)))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(0, 10_000))
    def test_permutation_invariant(self, k, seed):
        r = np.random.default_rng(seed)
        alpha = r.dirichlet(np.ones(k))
        keys, h, f = r.normal(size=(k, 4)), r.normal(size=(k, 3)), r.normal(size=(k, 3))
        perm = r.permutation(k)
        a = aggregate_retrieved(alpha, keys, h, f)
        b = aggregate_retrieved(alpha[perm], keys[perm], h[perm], f[perm])
        for x, y in zip(a, b):
            np.testing.assert_allclose(x.data, y.data, rtol=1e-12, atol=1e-14)


class TestInteraction:
    def test_orthogonal(self):
        np.testing.assert_array_equal(interaction_layer(np.eye(2)).data, [0.0])

    def test_pair_order(self):
        emb = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
        np.testing.assert_array_equal(interaction_layer(emb).data, [2.0, 3.0, 6.0])

    def test_matches_double_loop(self, rng):
        emb = rng.normal(size=(4, 8))
        expected = [emb[i] @ emb[j] for i in range(4) for j in range(i + 1, 4)]
        np.testing.assert_allclose(interaction_layer(emb).data, expected, rtol=1e-12)

    def test_single_field_is_empty(self):
        assert interaction_layer(np.ones((1, 3))).data.shape == (0,)


class TestForward:
    @pytest.mark.parametrize("mode", MODES)
    def test_width_per_mode(self, mode, rng):
        m = model(mode)
        P, v = 3, 4
        expected = {"FULL": 2 * P + 3 * v, "HISTORY_ONLY": 2 * P + 2 * v,
                    "FUTURE_ONLY": 2 * P + 2 * v, "NO_CONTEXT": P + v}[mode]
        assert m.input_width == expected
        p = m.predict(random_batch(rng))
        assert np.all((p > 0) & (p < 1))

    def test_zero_head_gives_half(self, rng):
        m = model(zero_init_head=True)
        np.testing.assert_array_equal(m.predict(random_batch(rng)), 0.5)

    def test_no_context_ignores_retrieval(self, rng):
        m = model("NO_CONTEXT")
        a = random_batch(np.random.default_rng(1))
        b = random_batch(np.random.default_rng(1))
        b.ret_keys, b.ret_h, b.ret_f = b.ret_keys[:, ::-1] % 3 + 1, -b.ret_h, b.ret_f * 7
        b.ret_valid = np.zeros_like(b.ret_valid)
        np.testing.assert_array_equal(m.predict(a), m.predict(b))

    def test_future_only_ignores_history_values(self, rng):
        m = model("FUTURE_ONLY")
        a = random_batch(np.random.default_rng(2))
        b = random_batch(np.random.default_rng(2))
        b.ret_h = b.ret_h * 5 + 1
        np.testing.assert_array_equal(m.predict(a), m.predict(b))
        b.ret_f = b.ret_f + 1
        assert not np.array_equal(m.predict(a), m.predict(b))

    def test_history_only_ignores_future_values(self, rng):
        m = model("HISTORY_ONLY")
        a = random_batch(np.random.default_rng(3))
        b = random_batch(np.random.default_rng(3))
        b.ret_f = b.ret_f * 5 + 1
        np.testing.assert_array_equal(m.predict(a), m.predict(b))

    def test_empty_retrieval_uses_null_vectors(self, rng):
        m = model("FULL")
        x_t, h_t = [1, 2, 3], rng.normal(size=4)
        empty = RetrievalResult((), ())
        p = predict_forward(x_t, h_t, empty, m)
        assert 0 < p < 1
        assert p == predict_forward(x_t, h_t, empty, m)
        # padded slots with arbitrary content give the same value as the null path
        batch = random_batch(rng, B=1, valid=np.zeros((1, 2), dtype=bool))
        batch.target, batch.h_t = np.array([x_t]), h_t[None, :]
        assert m.predict(batch)[0] == pytest.approx(p, abs=1e-15)
        # and the null vectors actually feed the output
        m.params["null.h"].data += 1.0
        assert predict_forward(x_t, h_t, empty, m) != p

    def test_partial_retrieval_ignores_padding(self, rng):
        m = model("FULL")
        a = random_batch(np.random.default_rng(4), valid=np.array([[True, False]] * 3))
        b = random_batch(np.random.default_rng(4), valid=np.array([[True, False]] * 3))
        b.ret_h[:, 1] += 9.0
        b.ret_keys[:, 1] = 1
        np.testing.assert_array_equal(m.predict(a), m.predict(b))

    def test_width_mismatch(self, rng):
        m = model(v=4)
        batch = random_batch(rng, v=5)
        with pytest.raises(ShapeError):
            m.predict(batch)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            PredictorConfig(ablation_mode="BOTH")
        with pytest.raises(ValueError):
            PredictorConfig(K=0)
        PredictorConfig(ablation_mode="NO_CONTEXT", K=0)


class TestGradient:
    def test_full_mode_grad_check(self, rng):
        m = Predictor(PredictorConfig(ablation_mode="FULL", K=2, w=2, mlp_hidden=(3,), seed=5), (4, 5), 4)
        batch = random_batch(rng, B=4, K=2, M=2, v=4, vocab=(4, 5),
                             valid=np.array([[True, True], [True, False], [True, True], [False, False]]))
        report = grad_check(lambda: m.loss(batch), m.params)
        for name in ("attn.W", "emb.0", "emb.1", "mlp.0.w", "mlp.1.w", "null.h", "null.f", "null.key"):
            assert name in report.errors
        assert report.passed, str(report)

    def test_grad_reaches_every_parameter(self, rng):
        m = model("FULL")
        batch = random_batch(rng, B=6, valid=np.array([[True, True]] * 5 + [[False, False]]))
        m.params.zero_grad()
        m.loss(batch).backward()
        for name, t in m.params.items():
            assert np.abs(t.grad).sum() > 0, name


def prefix_dataset(n_users=6, per_user=12, seed=0):
    rng = np.random.default_rng(seed)
    its, i = [], 0
    for t in range(per_user):
        for u in range(1, n_users + 1):
            item = int(rng.integers(1, 6))
            its.append(Interaction(i, u, item, t, (u, item, item % 3 + 1), int(item % 2 == u % 2)))
            i += 1
    return its


def tiny_encoder(vocab):
    return SequenceEncoder(EncoderConfig(vocab, w=2, d_model=4, n_layers=1, n_heads=1, L_max=8), seed=0)


class TestTraining:
    def test_memorizes_single_example(self):
        it = Interaction(0, 1, 2, 0, (1, 2, 3), 1)
        enc = tiny_encoder(VOCAB)
        cfg = PredictorConfig(ablation_mode="NO_CONTEXT", K=0, lr=0.1, epochs=200, batch_size=1, mlp_hidden=(4,), w=2)
        res = train_predictor([it], None, enc, cfg, VOCAB)
        assert res.losses[-1] < 0.01
        prep = prepare_examples([it], [], enc, None, 1, 8)
        assert predict_prepared(res.model, prep, None)[0] > 0.99

    def test_encoder_unchanged(self):
        its = prefix_dataset()
        enc = tiny_encoder((8, 6, 4))
        store = build_datastore(its[:36], enc, 2)
        before = enc.params.checksum()
        res = train_predictor(its[36:], store, enc, PredictorConfig(K=2, L=2, epochs=2, w=2), (8, 6, 4),
                              history_pool=its)
        assert res.encoder_checksum == before == enc.params.checksum()

    def test_deterministic(self):
        its = prefix_dataset()
        enc = tiny_encoder((8, 6, 4))
        store = build_datastore(its[:36], enc, 2)
        cfg = PredictorConfig(K=2, L=2, epochs=3, w=2, seed=4)
        a = train_predictor(its[36:], store, enc, cfg, (8, 6, 4), history_pool=its)
        b = train_predictor(its[36:], store, enc, cfg, (8, 6, 4), history_pool=its)
        assert a.losses == b.losses
        assert a.model.params.checksum() == b.model.params.checksum()

    def test_empty_train(self):
        with pytest.raises(EmptyDataset):
            train_predictor([], None, tiny_encoder(VOCAB), PredictorConfig(), VOCAB)

    def test_early_stopping_restores_best(self):
        its = prefix_dataset(per_user=20)
        enc = tiny_encoder((8, 6, 4))
        cfg = PredictorConfig(ablation_mode="NO_CONTEXT", K=0, epochs=30, w=2, lr=0.02, patience=2)
        res = train_predictor(its[:90], None, enc, cfg, (8, 6, 4), val=its[90:])
        best = max(r.val_auc for r in res.log)
        assert res.log[res.best_epoch - 1].val_auc == best
        assert len(res.log) <= res.best_epoch + 2

    def test_log_csv(self, tmp_path):
        its = prefix_dataset()
        cfg = PredictorConfig(ablation_mode="NO_CONTEXT", K=0, epochs=2, w=2)
        train_predictor(its[:40], None, tiny_encoder((8, 6, 4)), cfg, (8, 6, 4), val=its[40:],
                        log_path=tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_auc,val_logloss"
        assert len(lines) == 3

    def test_checkpoint_round_trip(self, tmp_path, rng):
        m = model("HISTORY_ONLY")
        m.save(tmp_path / "p.ckpt")
        back = Predictor.load(tmp_path / "p.ckpt")
        batch = random_batch(rng)
        np.testing.assert_array_equal(m.predict(batch), back.predict(batch))


class TestHistories:
    def test_strictly_earlier_and_last_l(self):
        pool = make_interactions([1, 2, 3, 5, 5, 8], users=[1, 1, 1, 1, 2, 1])
        targets = [Interaction(100, 1, 1, 5, (1, 1, 2), 0), Interaction(101, 3, 1, 9, (3, 1, 2), 0)]
        hist = user_histories(targets, pool, L=2)
        assert [it.interaction_id for it in hist[0]] == [1, 2]
        assert hist[1] == ()

    def test_prepare_examples_shapes(self):
        its = prefix_dataset()
        enc = tiny_encoder((8, 6, 4))
        store = build_datastore(its[:36], enc, 2)
        prep = prepare_examples(its[36:], its, enc, store, K=3, L=2)
        assert prep.h_t.shape == (36, enc.config.v)
        assert prep.ret_pos.shape == (36, 3)
        assert np.all(prep.ret_pos < len(store))

    def test_batch_from_result_rejects_overflow(self, rng):
        with pytest.raises(ShapeError):
            batch_from_result([1, 2], np.zeros(4), RetrievalResult((object(),) * 3, (1.0,) * 3), K=2)
