import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacgrasp.errors import ContractError, DimensionError, ModelError, TrainingError
from tacgrasp.nn import (
    AdamState,
    AttentionParams,
    LinearLayer,
    adam_step,
    attention_backward,
    attention_forward,
    init_attention,
    init_linear,
    load_model,
    max_rel_err,
    mlp_backward,
    mlp_forward,
    mse_loss,
    numeric_grad,
    save_model,
    sgd_step,
    softmax_rows,
)


class TestSoftmax:
    def test_symmetry(self):
        np.testing.assert_allclose(softmax_rows(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_shift_invariance_large_values(self):
        np.testing.assert_allclose(softmax_rows(np.array([[1000.0, 1000.0]])), [[0.5, 0.5]])

    def test_log_ratio(self):
        out = softmax_rows(np.array([[math.log(1.0), math.log(3.0)]]))
        np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-12)

    @given(
        st.lists(
            st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=6),
            min_size=1,
            max_size=5,
        ).filter(lambda rows: len({len(r) for r in rows}) == 1)
    )
    @settings(max_examples=60, deadline=None)
    def test_rows_are_distributions(self, rows):
        out = softmax_rows(np.array(rows, dtype=float))
        assert np.all(out >= 0.0) and np.all(out <= 1.0)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def random_attention(rng, t=3, d_model=4, d_k=3):
    x = rng.normal(size=(t, d_model))
    params = AttentionParams(
        w_q=rng.normal(size=(d_model, d_k)),
        w_k=rng.normal(size=(d_model, d_k)),
        w_v=rng.normal(size=(d_model, d_k)),
    )
    return x, params


class TestAttentionForward:
    def test_single_token_returns_v(self):
        rng = np.random.default_rng(0)
        x, params = random_attention(rng, t=1)
        y, cache = attention_forward(x, params)
        np.testing.assert_allclose(y, x @ params.w_v, atol=1e-12)
        np.testing.assert_allclose(cache.weights, [[1.0]], atol=1e-15)

    def test_zero_keys_average_v(self):
        rng = np.random.default_rng(1)
        x, params = random_attention(rng, t=4)
        params = AttentionParams(w_q=params.w_q, w_k=np.zeros_like(params.w_k), w_v=params.w_v)
        y, _ = attention_forward(x, params)
        v = x @ params.w_v
        for row in y:
            np.testing.assert_allclose(row, v.mean(axis=0), atol=1e-12)

    def test_hand_worked_two_tokens(self):
        x = np.array([[1.0, 2.0], [0.0, 4.0]])
        params = AttentionParams(
            w_q=np.array([[1.0], [0.0]]),
            w_k=np.array([[1.0], [0.0]]),
            w_v=np.array([[0.0], [1.0]]),
        )
        y, cache = attention_forward(x, params)
        w0 = math.exp(1.0) / (math.exp(1.0) + 1.0)
        np.testing.assert_allclose(cache.weights[0], [w0, 1.0 - w0], atol=1e-12)
        assert y[0, 0] == pytest.approx(w0 * 2.0 + (1.0 - w0) * 4.0, abs=1e-9)
        assert y[0, 0] == pytest.approx(2.5378, abs=1e-4)

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        x, params = random_attention(rng)
        with pytest.raises(DimensionError, match="X"):
            attention_forward(x[:, :2], params)

    def test_permutation_equivariance_shared_qk(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 4))
        w = rng.normal(size=(4, 3))
        params = AttentionParams(w_q=w, w_k=w, w_v=rng.normal(size=(4, 3)))
        perm = rng.permutation(5)
        y, _ = attention_forward(x, params)
        y_perm, _ = attention_forward(x[perm], params)
        np.testing.assert_allclose(y_perm, y[perm], atol=1e-12)


def attention_fd_errors(rng, t=3, d_model=4, d_k=3):
    """Max relative FD error over all attention inputs for one random case."""
    x, params = random_attention(rng, t=t, d_model=d_model, d_k=d_k)
    d_y = rng.normal(size=(t, d_k))

    def loss_for(x_arr, wq, wk, wv):
        y, _ = attention_forward(x_arr, AttentionParams(w_q=wq, w_k=wk, w_v=wv))
        return float((y * d_y).sum())

    y, cache = attention_forward(x, params)
    d_x, d_wq, d_wk, d_wv = attention_backward(d_y, cache)
    errs = [
        max_rel_err(d_x, numeric_grad(lambda a: loss_for(a, params.w_q, params.w_k, params.w_v), x.copy())),
        max_rel_err(d_wq, numeric_grad(lambda a: loss_for(x, a, params.w_k, params.w_v), params.w_q.copy())),
        max_rel_err(d_wk, numeric_grad(lambda a: loss_for(x, params.w_q, a, params.w_v), params.w_k.copy())),
        max_rel_err(d_wv, numeric_grad(lambda a: loss_for(x, params.w_q, params.w_k, a), params.w_v.copy())),
    ]
    return max(errs)


class TestAttentionBackward:
    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(4)
        x, params = random_attention(rng)
        _, cache = attention_forward(x, params)
        d_x, d_wq, d_wk, d_wv = attention_backward(np.zeros((3, 3)), cache)
        for g in (d_x, d_wq, d_wk, d_wv):
            assert np.all(g == 0.0)

    def test_finite_difference(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            assert attention_fd_errors(rng) <= 1e-4

    def test_single_token_reduces_to_linear(self):
        rng = np.random.default_rng(6)
        x, params = random_attention(rng, t=1)
        d_y = rng.normal(size=(1, 3))
        _, cache = attention_forward(x, params)
        d_x, d_wq, d_wk, d_wv = attention_backward(d_y, cache)
        assert np.all(d_wq == 0.0) and np.all(d_wk == 0.0)
        np.testing.assert_allclose(d_wv, x.T @ d_y, atol=1e-12)
        np.testing.assert_allclose(d_x, d_y @ params.w_v.T, atol=1e-12)

    def test_stale_cache_rejected(self):
        rng = np.random.default_rng(7)
        x, params = random_attention(rng)
        _, cache = attention_forward(x, params)
        with pytest.raises(ContractError):
            attention_backward(np.zeros((5, 3)), cache)
        with pytest.raises(ContractError):
            attention_backward(np.zeros((3, 3)), cache="nope")


class TestMlp:
    def test_identity_layer(self):
        x = np.random.default_rng(8).normal(size=(4, 3))
        layer = LinearLayer(w=np.eye(3), b=np.zeros(3), activation="identity")
        y, _ = mlp_forward(x, [layer])
        np.testing.assert_array_equal(y, x)

    def test_relu_definition(self):
        x = np.array([[-1.0, 2.0]])
        layer = LinearLayer(w=np.eye(2), b=np.zeros(2), activation="relu")
        y, _ = mlp_forward(x, [layer])
        np.testing.assert_array_equal(y, [[0.0, 2.0]])

    def test_shape_mismatch_rejected(self):
        layer = LinearLayer(w=np.eye(3), b=np.zeros(3))
        with pytest.raises(DimensionError, match="layer 0"):
            mlp_forward(np.zeros((2, 4)), [layer])

    def test_finite_difference_two_layer(self):
        rng = np.random.default_rng(9)
        layers = [
            init_linear(rng, 4, 5, "relu"),
            init_linear(rng, 5, 2, "identity"),
        ]
        x = rng.normal(size=(3, 4))
        d_y = rng.normal(size=(3, 2))

        def loss_with(i, w_arr, b_arr):
            patched = list(layers)
            patched[i] = LinearLayer(w=w_arr, b=b_arr, activation=layers[i].activation)
            y, _ = mlp_forward(x, patched)
            return float((y * d_y).sum())

        y, cache = mlp_forward(x, layers)
        d_x, grads = mlp_backward(d_y, cache)
        fd_x = numeric_grad(lambda a: float((mlp_forward(a, layers)[0] * d_y).sum()), x.copy())
        assert max_rel_err(d_x, fd_x) <= 1e-4
        for i, (d_w, d_b) in enumerate(grads):
            fd_w = numeric_grad(lambda a: loss_with(i, a, layers[i].b), layers[i].w.copy())
            fd_b = numeric_grad(lambda a: loss_with(i, layers[i].w, a), layers[i].b.copy())
            assert max_rel_err(d_w, fd_w) <= 1e-4
            assert max_rel_err(d_b, fd_b) <= 1e-4


class TestMseLoss:
    def test_exact_match_zero(self):
        loss, d = mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))
        assert loss == 0.0
        np.testing.assert_array_equal(d, [0.0, 0.0])

    def test_single_sample(self):
        loss, d = mse_loss(np.array([2.0]), np.array([0.0]))
        assert loss == 2.0
        np.testing.assert_array_equal(d, [2.0])

    def test_two_samples(self):
        loss, d = mse_loss(np.array([1.0, -1.0]), np.array([0.0, 0.0]))
        assert loss == 0.5
        np.testing.assert_allclose(d, [0.5, -0.5])

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(10)
        pred = rng.normal(size=6)
        target = rng.normal(size=6)
        _, d = mse_loss(pred, target)
        fd = numeric_grad(lambda p: mse_loss(p, target)[0], pred.copy())
        assert max_rel_err(d, fd) <= 1e-4

    def test_empty_rejected(self):
        with pytest.raises(ContractError):
            mse_loss(np.array([]), np.array([]))


class TestOptimizers:
    def test_sgd_zero_grad_no_change(self):
        params = {"w": np.array([[1.0, 2.0]])}
        out = sgd_step(params, {"w": np.zeros((1, 2))}, lr=0.1)
        np.testing.assert_array_equal(out["w"], params["w"])

    def test_sgd_arithmetic(self):
        out = sgd_step({"w": np.array([1.0])}, {"w": np.array([2.0])}, lr=0.1)
        assert out["w"][0] == pytest.approx(0.8, abs=1e-15)

    def test_sgd_decreases_quadratic(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            a = rng.normal(size=(4, 4))
            h = a @ a.T + 0.1 * np.eye(4)  # PSD
            w = rng.normal(size=4)
            loss = lambda w_: 0.5 * float(w_ @ h @ w_)
            grad = h @ w
            if np.allclose(grad, 0):
                continue
            w_new = sgd_step({"w": w}, {"w": grad}, lr=1e-3)["w"]
            assert loss(w_new) < loss(w)

    def test_adam_zero_grad_no_change(self):
        params = {"w": np.array([3.0])}
        state = AdamState.fresh(params)
        out, state = adam_step(params, {"w": np.zeros(1)}, state, lr=0.1)
        np.testing.assert_array_equal(out["w"], params["w"])

    def test_adam_first_step_value(self):
        params = {"w": np.array([0.0])}
        out, state = adam_step(params, {"w": np.array([1.0])}, AdamState.fresh(params), lr=0.001)
        assert state.t == 1
        assert out["w"][0] == pytest.approx(-0.001 / (1.0 + 1e-8), abs=1e-15)
        assert out["w"][0] == pytest.approx(-0.000999999, abs=1e-8)

    def test_non_finite_gradient_rejected(self):
        params = {"w": np.array([0.0])}
        with pytest.raises(TrainingError, match="w"):
            sgd_step(params, {"w": np.array([np.nan])}, lr=0.1)
        with pytest.raises(TrainingError, match="step 1"):
            adam_step(params, {"w": np.array([np.inf])}, AdamState.fresh(params), lr=0.1)


class TestInit:
    def test_linear_init_bounds(self):
        rng = np.random.default_rng(12)
        layer = init_linear(rng, 16, 8, "relu")
        bound = 1.0 / math.sqrt(16)
        assert np.all(np.abs(layer.w) <= bound)
        assert np.all(layer.b == 0.0)

    def test_attention_init_deterministic(self):
        a = init_attention(np.random.default_rng(13), 34, 16)
        b = init_attention(np.random.default_rng(13), 34, 16)
        np.testing.assert_array_equal(a.w_q, b.w_q)
        np.testing.assert_array_equal(a.w_v, b.w_v)


class TestModelFile:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.model"
        arrays = {
            "layer0.w": np.arange(6, dtype=float).reshape(2, 3),
            "layer0.b": np.array([0.5, -1.5, 2.0]),
        }
        meta = {"topology": [2, 3], "lr": 0.001}
        save_model(path, "generator", meta, arrays)
        kind, meta2, arrays2 = load_model(path)
        assert kind == "generator"
        assert meta2 == meta
        assert set(arrays2) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(arrays2[k], arrays[k])

    def test_save_load_save_is_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.model", tmp_path / "b.model"
        rng = np.random.default_rng(14)
        arrays = {"w": rng.normal(size=(5, 7)), "b": rng.normal(size=7)}
        save_model(p1, "adapter", {"blocks": 2}, arrays)
        kind, meta, loaded = load_model(p1)
        save_model(p2, kind, meta, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.model"
        path.write_bytes(b"NOTAMODELFILE")
        with pytest.raises(ModelError, match="magic"):
            load_model(path)

    def test_truncation_rejected(self, tmp_path):
        path = tmp_path / "m.model"
        save_model(path, "gmm", {}, {"w": np.ones((4, 4))})
        blob = path.read_bytes()
        path.write_bytes(blob[:-16])
        with pytest.raises(ModelError, match="truncated"):
            load_model(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ModelError, match="not found"):
            load_model(tmp_path / "absent.model")
