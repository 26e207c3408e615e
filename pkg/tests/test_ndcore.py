import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liftrec.errors import CorruptCheckpointError, MissingGradError, NotScalarError, ShapeError, VocabError
from liftrec.ndcore import ParamStore, Tensor, grad_check, init_attention_matrix, no_grad, ops as F
from liftrec.ndcore.checkpoint import dumps, load_params, loads, save_params
from liftrec.ndcore.tensor import make_result


class TestForward:
    def test_softmax_uniform(self):
        np.testing.assert_allclose(F.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3))

    def test_matmul_identity(self, rng):
        a = rng.normal(size=(3, 4))
        np.testing.assert_array_equal(F.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)

    @pytest.mark.parametrize("y", [0.0, 1.0])
    def test_bce_half(self, y):
        assert F.bce_loss(Tensor(0.5), Tensor(y)).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_bce_clamps(self):
        assert np.isfinite(F.bce_loss(Tensor(0.0), Tensor(1.0)).item())
        assert F.bce_loss(Tensor(1.0), Tensor(1.0)).item() == pytest.approx(-math.log1p(-1e-12))

    def test_shape_errors_name_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            F.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError, match="add"):
            F.add(Tensor(np.ones(3)), Tensor(np.ones(4)))

    def test_embedding_out_of_range(self):
        with pytest.raises(VocabError):
            F.embedding_lookup(Tensor(np.ones((3, 2))), np.array([0, 3]))

    def test_concat(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 1))
        np.testing.assert_array_equal(F.concat([Tensor(a), Tensor(b)], axis=-1).data, np.hstack([a, b]))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-50, 50))
    def test_softmax_properties(self, xs, c):
        x = np.array(xs)
        p = F.softmax(Tensor(x)).data
        assert abs(p.sum() - 1) < 1e-9
        np.testing.assert_allclose(F.softmax(Tensor(x + c)).data, p, atol=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 16), st.integers(0, 10_000))
    def test_layer_norm_moments(self, d, seed):
        x = np.random.default_rng(seed).normal(size=(4, d)) * 3 + 1
        y = F.layer_norm(Tensor(x), eps=0.0).data
        assert np.abs(y.mean(axis=-1)).max() < 1e-9
        assert np.abs(y.var(axis=-1) - 1).max() < 1e-6


class TestBackward:
    def test_sum_grad_ones(self, rng):
        store = ParamStore()
        W = store.add("W", rng.normal(size=(3, 2)))
        F.sum(W).backward()
        np.testing.assert_array_equal(W.grad, np.ones((3, 2)))

    def test_logistic_grad(self, rng):
        w = Tensor(rng.normal(size=4), requires_grad=True)
        x = rng.normal(size=4)
        y = 1.0
        p = F.sigmoid(F.sum(F.mul(w, Tensor(x))))
        F.bce_loss(p, Tensor(y)).backward()
        s = 1 / (1 + np.exp(-w.data @ x))
        np.testing.assert_allclose(w.grad, (s - y) * x, rtol=1e-10)

    def test_non_scalar(self):
        with pytest.raises(NotScalarError):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_off_path_grads_untouched(self, rng):
        store = ParamStore()
        a = store.add("a", rng.normal(size=3))
        b = store.add("b", rng.normal(size=3))
        b.grad = np.full(3, 7.0)
        F.sum(F.mul(a, a)).backward()
        np.testing.assert_array_equal(b.grad, np.full(3, 7.0))

    def test_no_grad_records_nothing(self, rng):
        a = Tensor(rng.normal(size=3), requires_grad=True)
        with no_grad():
            out = F.mul(a, a)
        assert not out.requires_grad

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 4), st.integers(0, 10_000))
    def test_composite_graph_matches_finite_differences(self, n, d, k, seed):
        r = np.random.default_rng(seed)
        store = ParamStore()
        W = store.add("W", r.normal(size=(d, k)))
        g = store.add("g", 1 + 0.1 * r.normal(size=k))
        E = store.add("E", r.normal(size=(5, d)))
        ids = r.integers(5, size=n)
        y = Tensor(r.integers(2, size=n).astype(float))

        def fwd():
            h = F.matmul(F.embedding_lookup(E, ids), W)
            h = F.gelu(F.layer_norm(h, g, None)) if k > 1 else F.tanh(h)
            att = F.softmax(h, axis=-1)
            p = F.sigmoid(F.sum(F.mul(att, h), axis=-1))
            return F.mean(F.bce_loss(p, y))

        report = grad_check(fwd, store, tolerance=1e-4)
        assert report.passed, str(report)


class TestAdam:
    def test_first_step_closed_form(self, rng):
        store = ParamStore()
        w = store.add("w", rng.normal(size=5))
        start = w.data.copy()
        g = rng.normal(size=5)
        w.grad = g.copy()
        lr, b1, b2, eps = 0.01, 0.8, 0.95, 1e-8
        store.adam_step(lr, b1, b2, eps)
        # step 1: mhat = g, vhat = g^2
        np.testing.assert_allclose(w.data, start - lr * g / (np.abs(g) + eps), rtol=1e-12)
        np.testing.assert_array_equal(w.grad, np.zeros(5))

    def test_zero_grad_no_move(self, rng):
        store = ParamStore()
        w = store.add("w", rng.normal(size=5))
        start = w.data.copy()
        w.grad = np.zeros(5)
        store.adam_step(0.1)
        np.testing.assert_array_equal(w.data, start)

    def test_deterministic(self, rng):
        init, g = rng.normal(size=4), rng.normal(size=4)
        out = []
        for _ in range(2):
            store = ParamStore()
            w = store.add("w", init)
            for _ in range(2):
                w.grad = g.copy()
                store.adam_step(0.05)
            out.append(w.data.copy())
        np.testing.assert_array_equal(out[0], out[1])

    def test_missing_grad_named(self, rng):
        store = ParamStore()
        store.add("alpha", rng.normal(size=2))
        store.add("beta", rng.normal(size=2))
        store["alpha"].grad = np.ones(2)
        with pytest.raises(MissingGradError, match="beta"):
            store.adam_step()

    def test_decoupled_weight_decay(self, rng):
        store = ParamStore()
        w = store.add("w", rng.normal(size=3))
        start = w.data.copy()
        w.grad = np.zeros(3)
        store.adam_step(0.1, weight_decay=0.5)
        np.testing.assert_allclose(w.data, start * (1 - 0.05))


class TestGradCheck:
    def test_linear_model_tight(self, rng):
        store = ParamStore()
        W = store.add("W", rng.normal(size=(3, 1)))
        x = Tensor(rng.normal(size=(6, 3)))
        report = grad_check(lambda: F.mean(F.mul(F.matmul(x, W), F.matmul(x, W))), store, tolerance=1e-6)
        assert report.passed

    def test_corrupted_backward_is_caught(self, rng):
        def bad_square(a):
            return make_result(a.data**2, (a,), lambda g: (g * a.data,))  # missing factor 2

        store = ParamStore()
        good = store.add("good", rng.normal(size=3))
        broken = store.add("broken", rng.normal(size=3))
        report = grad_check(lambda: F.sum(F.add(F.mul(good, good), bad_square(broken))), store)
        assert report.failures == ["broken"]
        assert "broken" in str(report)


class TestInit:
    def test_attention_matrix(self, rng):
        W = init_attention_matrix(rng, 4)
        assert np.abs(W - 0.1 * np.eye(4)).max() <= 0.01


class TestCheckpoint:
    def state(self, rng):
        store = ParamStore()
        store.add("emb.0", rng.normal(size=(4, 3)))
        store.add("bias", rng.normal(size=(2,)))
        store.add("scalar", np.array(1.5))
        return store

    def test_round_trip_bytes(self, tmp_path, rng):
        store = self.state(rng)
        save_params(store, tmp_path / "a.lpm")
        back = load_params(tmp_path / "a.lpm")
        assert list(back) == store.names()
        for k, t in store.items():
            np.testing.assert_array_equal(back[k], t.data)
        assert dumps(back) == (tmp_path / "a.lpm").read_bytes()

    def test_header_layout(self, rng):
        buf = dumps(self.state(rng))
        assert buf[:8] == b"LIFTPARM"
        assert int.from_bytes(buf[8:12], "little") == 1
        assert int.from_bytes(buf[12:16], "little") == 3

    def test_rejects_bad_magic(self, rng):
        buf = bytearray(dumps(self.state(rng)))
        buf[0:8] = b"NOTPARMS"
        with pytest.raises(CorruptCheckpointError):
            loads(bytes(buf))

    def test_rejects_version(self, rng):
        buf = bytearray(dumps(self.state(rng)))
        buf[8] = 9
        with pytest.raises(CorruptCheckpointError, match="version"):
            loads(bytes(buf))

    @pytest.mark.parametrize("cut", [1, 8, 30])
    def test_rejects_truncation(self, rng, cut):
        buf = dumps(self.state(rng))
        with pytest.raises(CorruptCheckpointError):
            loads(buf[:-cut])

    def test_rejects_trailing_bytes(self, rng):
        with pytest.raises(CorruptCheckpointError, match="trailing"):
            loads(dumps(self.state(rng)) + b"\x00")
