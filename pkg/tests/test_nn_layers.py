import numpy as np
import pytest

from ctpe.errors import ShapeError
from ctpe.nn import (
    Adam,
    BatchNorm3d,
    Conv3d,
    Dense,
    MaxPool3d,
    bce_loss,
    dropout_backward,
    dropout_forward,
    gap_backward,
    gap_forward,
    relu_backward,
    relu_forward,
    sigmoid_backward,
    sigmoid_forward,
)
from ctpe.rng import Stream


def rel_err(numeric: float, analytic: float, atol: float = 1e-8) -> float:
    """Relative error with an absolute floor for near-zero gradients."""
    diff = abs(numeric - analytic)
    scale = max(abs(numeric), abs(analytic))
    if scale < atol:
        return 0.0
    return diff / scale


def central_difference(f, arr: np.ndarray, indices, h: float = 1e-6):
    """Central finite differences of scalar f at selected flat indices."""
    flat = arr.ravel()
    out = []
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2 * h))
    return out


def probe_indices(rng: np.random.Generator, size: int, count: int):
    return rng.choice(size, size=min(count, size), replace=False)


class TestConv3d:
    def test_shape_arithmetic(self):
        conv = Conv3d(1, 64, stream=Stream(0))
        out = conv.forward(np.zeros((1, 1, 16, 12, 8), dtype=np.float32))
        assert out.shape == (1, 64, 14, 10, 6)

    def test_zero_weights_constant_bias(self):
        conv = Conv3d(2, 3)
        conv.b[:] = 4.5
        out = conv.forward(np.random.default_rng(0).random((2, 2, 5, 5, 5)).astype(np.float32))
        assert np.allclose(out, 4.5)

    def test_all_ones_filter_sums_window(self):
        conv = Conv3d(1, 1)
        conv.w[:] = 1.0
        x = np.random.default_rng(1).random((1, 1, 3, 3, 3)).astype(np.float32)
        out = conv.forward(x)
        assert out.shape == (1, 1, 1, 1, 1)
        assert out[0, 0, 0, 0, 0] == pytest.approx(x.sum(), rel=1e-6)

    def test_channel_mismatch(self):
        conv = Conv3d(2, 4)
        with pytest.raises(ShapeError):
            conv.forward(np.zeros((1, 3, 5, 5, 5), dtype=np.float32))

    def test_too_small_spatial(self):
        conv = Conv3d(1, 1)
        with pytest.raises(ShapeError):
            conv.forward(np.zeros((1, 1, 2, 5, 5), dtype=np.float32))

    def test_zero_grad_out_gives_zero_grads(self):
        conv = Conv3d(2, 3, stream=Stream(1), dtype=np.float64)
        x = np.random.default_rng(2).random((1, 2, 5, 5, 5))
        gx, gw, gb = conv.backward(x, np.zeros((1, 3, 3, 3, 3)))
        assert not gx.any() and not gw.any() and not gb.any()

    def test_bias_gradient_is_channel_sum(self):
        conv = Conv3d(2, 3, stream=Stream(1), dtype=np.float64)
        x = np.random.default_rng(3).random((2, 2, 5, 5, 5))
        gy = np.random.default_rng(4).random((2, 3, 3, 3, 3))
        _, _, gb = conv.backward(x, gy)
        assert np.allclose(gb, gy.sum(axis=(0, 2, 3, 4)))

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(5)
        conv = Conv3d(2, 3, stream=Stream(7), dtype=np.float64)
        x = rng.random((1, 2, 5, 5, 5))
        seed_grad = rng.random((1, 3, 3, 3, 3))

        def loss():
            return float((conv.forward(x) * seed_grad).sum())

        gx, gw, gb = conv.backward(x, seed_grad)
        for arr, grad in ((x, gx), (conv.w, gw), (conv.b, gb)):
            idx = probe_indices(rng, arr.size, 20)
            numeric = central_difference(loss, arr, idx)
            for i, num in zip(idx, numeric):
                assert rel_err(num, grad.ravel()[i]) <= 1e-5


class TestMaxPool:
    def test_shape_halving(self):
        pool = MaxPool3d()
        out, idx = pool.forward(np.zeros((1, 64, 126, 126, 62), dtype=np.float32))
        assert out.shape == (1, 64, 63, 63, 31)

    def test_floor_semantics_on_odd_extents(self):
        pool = MaxPool3d()
        out, _ = pool.forward(np.zeros((1, 64, 61, 61, 29), dtype=np.float32))
        assert out.shape == (1, 64, 30, 30, 14)

    def test_constant_input(self):
        pool = MaxPool3d()
        out, _ = pool.forward(np.full((1, 2, 4, 4, 4), 3.25, dtype=np.float32))
        assert np.all(out == 3.25)

    def test_rejects_tiny_spatial(self):
        with pytest.raises(ShapeError):
            MaxPool3d().forward(np.zeros((1, 1, 1, 4, 4), dtype=np.float32))

    def test_backward_routes_to_argmax(self):
        rng = np.random.default_rng(6)
        x = rng.random((2, 3, 5, 6, 4))
        pool = MaxPool3d()
        out, idx = pool.forward(x)
        gy = rng.random(out.shape)
        gx = pool.backward(idx, x.shape, gy)
        # total gradient mass is conserved and lands only on window maxima
        assert gx.sum() == pytest.approx(gy.sum(), rel=1e-12)
        assert np.count_nonzero(gx) == gy.size

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.random((1, 2, 4, 4, 4))
        pool = MaxPool3d()
        seed_grad = rng.random((1, 2, 2, 2, 2))

        def loss():
            return float((pool.forward(x)[0] * seed_grad).sum())

        _, idx = pool.forward(x)
        gx = pool.backward(idx, x.shape, seed_grad)
        probes = probe_indices(rng, x.size, 30)
        numeric = central_difference(loss, x, probes)
        for i, num in zip(probes, numeric):
            assert rel_err(num, gx.ravel()[i]) <= 1e-5


class TestBatchNorm:
    def test_train_mode_standardizes(self):
        rng = np.random.default_rng(8)
        bn = BatchNorm3d(3, dtype=np.float64)
        x = rng.normal(2.0, 3.0, (4, 3, 5, 5, 5))
        out, _ = bn.forward(x, train=True)
        assert np.allclose(out.mean(axis=(0, 2, 3, 4)), 0.0, atol=1e-6)
        # biased variance lands just under 1 because of epsilon
        assert np.allclose(out.var(axis=(0, 2, 3, 4)), 1.0, atol=2e-3)

    def test_constant_channel_outputs_beta(self):
        bn = BatchNorm3d(2, dtype=np.float64)
        bn.beta[:] = 5.0
        x = np.full((2, 2, 4, 4, 4), 7.0)
        out, _ = bn.forward(x, train=True)
        assert np.allclose(out, 5.0, atol=1e-9)

    def test_running_stats_blend(self):
        bn = BatchNorm3d(1, momentum=0.9, dtype=np.float64)
        x = np.full((1, 1, 4, 4, 4), 10.0)
        bn.forward(x, train=True)
        assert bn.running_mean[0] == pytest.approx(0.9 * 0.0 + 0.1 * 10.0)
        assert bn.running_var[0] == pytest.approx(0.9 * 1.0 + 0.1 * 0.0)

    def test_infer_uses_running_stats(self):
        bn = BatchNorm3d(1, dtype=np.float64)
        bn.running_mean[:] = 4.0
        bn.running_var[:] = 9.0
        x = np.full((1, 1, 2, 2, 2), 7.0)
        out, cache = bn.forward(x, train=False)
        assert cache is None
        assert np.allclose(out, (7.0 - 4.0) / np.sqrt(9.0 + bn.epsilon))

    def test_corrupted_stats_raise(self):
        from ctpe.errors import StateError

        bn = BatchNorm3d(1)
        bn.running_var[:] = -1.0
        with pytest.raises(StateError):
            bn.forward(np.zeros((1, 1, 2, 2, 2), dtype=np.float32), train=False)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(9)
        bn = BatchNorm3d(2, dtype=np.float64)
        bn.gamma[:] = rng.random(2) + 0.5
        bn.beta[:] = rng.random(2)
        x = rng.random((2, 2, 4, 4, 4))
        seed_grad = rng.random(x.shape)

        def loss():
            out, _ = bn.forward(x.copy(), train=True)
            return float((out * seed_grad).sum())

        out, cache = bn.forward(x, train=True)
        gx, dgamma, dbeta = bn.backward(cache, seed_grad)
        for arr, grad in ((x, gx), (bn.gamma, dgamma), (bn.beta, dbeta)):
            idx = probe_indices(rng, arr.size, 15)
            numeric = central_difference(loss, arr, idx)
            for i, num in zip(idx, numeric):
                assert rel_err(num, grad.ravel()[i]) <= 1e-4


class TestDenseAndActivations:
    def test_dense_gradients(self):
        rng = np.random.default_rng(10)
        dense = Dense(6, 4, stream=Stream(11), dtype=np.float64)
        x = rng.random((3, 6))
        seed_grad = rng.random((3, 4))

        def loss():
            return float((dense.forward(x) * seed_grad).sum())

        gx, gw, gb = dense.backward(x, seed_grad)
        for arr, grad in ((x, gx), (dense.w, gw), (dense.b, gb)):
            idx = probe_indices(rng, arr.size, 12)
            numeric = central_difference(loss, arr, idx)
            for i, num in zip(idx, numeric):
                assert rel_err(num, grad.ravel()[i]) <= 1e-6

    def test_relu(self):
        x = np.array([-1.0, 0.0, 2.0])
        assert np.array_equal(relu_forward(x), [0.0, 0.0, 2.0])
        assert np.array_equal(relu_backward(x, np.ones(3)), [0.0, 0.0, 1.0])

    def test_gap_shapes_and_mean(self):
        x = np.full((1, 256, 6, 6, 2), 3.0)
        out = gap_forward(x)
        assert out.shape == (1, 256)
        assert np.all(out == 3.0)

    def test_gap_backward_distributes(self):
        g = gap_backward((1, 2, 2, 2, 2), np.array([[8.0, 16.0]]))
        assert g.shape == (1, 2, 2, 2, 2)
        assert np.all(g[0, 0] == 1.0) and np.all(g[0, 1] == 2.0)

    def test_sigmoid_values(self):
        assert sigmoid_forward(np.array([0.0]))[0] == 0.5
        assert sigmoid_forward(np.array([100.0]))[0] == pytest.approx(1.0)
        assert sigmoid_forward(np.array([-100.0]))[0] == pytest.approx(0.0, abs=1e-30)

    def test_sigmoid_backward(self):
        y = sigmoid_forward(np.array([0.3]))
        assert sigmoid_backward(y, np.ones(1))[0] == pytest.approx(float(y[0] * (1 - y[0])))


class TestDropout:
    def test_infer_mode_is_identity(self):
        x = np.random.default_rng(12).random((4, 10))
        out, mask = dropout_forward(x, 0.3, seed=5, train=False)
        assert mask is None and out is x

    def test_kept_fraction_concentrates(self):
        x = np.ones((1, 100_000), dtype=np.float32)
        _, mask = dropout_forward(x, 0.3, seed=99, train=True)
        kept = mask.mean()
        assert abs(kept - 0.7) <= 0.01

    def test_scaling_preserves_expectation(self):
        x = np.ones((1, 200_000), dtype=np.float32)
        out, _ = dropout_forward(x, 0.3, seed=3, train=True)
        assert out.mean() == pytest.approx(1.0, abs=0.02)

    def test_same_seed_same_mask(self):
        x = np.random.default_rng(13).random((2, 50))
        a, _ = dropout_forward(x, 0.3, seed=42, train=True)
        b, _ = dropout_forward(x, 0.3, seed=42, train=True)
        assert np.array_equal(a, b)

    def test_backward_uses_same_mask(self):
        x = np.random.default_rng(14).random((2, 20))
        out, mask = dropout_forward(x, 0.4, seed=7, train=True)
        g = dropout_backward(mask, 0.4, np.ones_like(x))
        assert np.array_equal(g != 0, out != 0)


class TestBceLoss:
    def test_half_probability(self):
        loss, _ = bce_loss(np.array([0.5]), np.array([1.0]))
        assert loss == pytest.approx(np.log(2), rel=1e-9)

    def test_confident_correct_is_near_zero(self):
        loss, _ = bce_loss(np.array([1.0 - 1e-7]), np.array([1.0]))
        assert loss == pytest.approx(0.0, abs=1e-6)

    def test_label_validation(self):
        with pytest.raises(ValueError):
            bce_loss(np.array([0.5]), np.array([0.4]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(15)
        p = rng.uniform(0.05, 0.95, 12)
        y = rng.integers(0, 2, 12).astype(np.float64)
        _, grad = bce_loss(p, y)

        def loss():
            return bce_loss(p, y)[0]

        idx = probe_indices(rng, p.size, 12)
        numeric = central_difference(loss, p, idx, h=1e-7)
        for i, num in zip(idx, numeric):
            assert rel_err(num, grad[i]) <= 1e-6


class TestAdam:
    def test_zero_gradient_keeps_parameters(self):
        params = {"w": np.ones(4, dtype=np.float64)}
        Adam(learning_rate=0.5).step(params, {"w": np.zeros(4)})
        assert np.array_equal(params["w"], np.ones(4))

    def test_first_step_magnitude_bias_corrected(self):
        params = {"w": np.array([0.0])}
        opt = Adam(learning_rate=0.1)
        opt.step(params, {"w": np.array([1.0])})
        assert params["w"][0] == pytest.approx(-0.1, rel=1e-6)

    def test_quadratic_bowl_converges(self):
        w = {"w": np.array([1.0])}
        opt = Adam(learning_rate=0.05)
        for _ in range(200):
            opt.step(w, {"w": 2.0 * w["w"]})
        assert abs(w["w"][0]) < 1e-2

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            Adam().step({"w": np.zeros(3)}, {"w": np.zeros(4)})
