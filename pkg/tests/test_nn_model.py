import io

import numpy as np
import pytest

from ctpe.errors import FormatError, ShapeError
from ctpe.nn import (
    Adam,
    Architecture,
    Cnn3d,
    DEFAULT_TOTAL_PARAMS,
    DEFAULT_TRAINABLE_PARAMS,
    load_model,
    save_model,
)
from test_nn_layers import central_difference, probe_indices, rel_err

TINY = Architecture(widths=(4, 8), dense_units=8, input_dims=(32, 32, 16))


class TestParamCount:
    def test_default_counts(self):
        model = Cnn3d(Architecture())
        trainable, total = model.param_count()
        assert trainable == DEFAULT_TRAINABLE_PARAMS == 1_351_873
        assert total == DEFAULT_TOTAL_PARAMS == 1_352_897

    def test_layerwise_breakdown(self):
        model = Cnn3d(Architecture())
        params = model.parameters()
        conv_sizes = [
            params["block0.conv.w"].size + params["block0.conv.b"].size,
            params["block1.conv.w"].size + params["block1.conv.b"].size,
            params["block2.conv.w"].size + params["block2.conv.b"].size,
            params["block3.conv.w"].size + params["block3.conv.b"].size,
        ]
        assert conv_sizes == [1_792, 110_656, 221_312, 884_992]
        bn = sum(params[f"block{i}.bn.{p}"].size for i in range(4) for p in ("gamma", "beta"))
        assert bn == 1_024
        assert params["dense1.w"].size + params["dense1.b"].size == 131_584
        assert params["dense2.w"].size + params["dense2.b"].size == 513

    def test_widened_first_conv_shifts_by_closed_form(self):
        base = Cnn3d(Architecture()).param_count()[0]
        widened = Cnn3d(Architecture(widths=(65, 64, 128, 256))).param_count()[0]
        # +1 filter: 27 weights + 1 bias + 2 bn params, plus 64*27 weights in conv2
        assert widened - base == (27 + 1 + 2) + 64 * 27

    def test_gap_adds_no_parameters(self):
        small = Cnn3d(TINY).param_count()
        # remove the dense head contribution and batch norm: what remains is conv-only
        params = Cnn3d(TINY).parameters()
        named = sum(v.size for v in params.values())
        assert named == small[0]


class TestShapeTrace:
    def test_reported_trace_for_default_input(self):
        trace = Architecture().spatial_trace()
        assert trace == [
            (126, 126, 62),
            (63, 63, 31),
            (61, 61, 29),
            (30, 30, 14),
            (28, 28, 12),
            (14, 14, 6),
            (12, 12, 4),
            (6, 6, 2),
        ]

    def test_forward_matches_analytic_trace(self):
        from ctpe.nn import layers as L

        model = Cnn3d(Architecture(widths=(2, 2, 2, 2), dense_units=4), init_seed=1)
        x = np.zeros((1, 1, 128, 128, 64), dtype=np.float32)
        observed = []
        h = x
        for conv, pool, bn in model.blocks:
            h = L.relu_forward(conv.forward(h))
            observed.append(h.shape[2:])
            h, _ = pool.forward(h)
            observed.append(h.shape[2:])
            h, _ = bn.forward(h, train=False)
        feats = L.gap_forward(h)
        assert observed == Architecture().spatial_trace()
        assert feats.shape == (1, 2)

    def test_incompatible_input_rejected_at_construction(self):
        with pytest.raises(ShapeError):
            Architecture(input_dims=(32, 32, 16)).spatial_trace()
        with pytest.raises(ShapeError):
            Cnn3d(Architecture(input_dims=(32, 32, 16)))

    def test_batch_shape_checked(self):
        model = Cnn3d(TINY)
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 1, 16, 16, 16), dtype=np.float32))


class TestForward:
    def test_probabilities_shape_and_range(self):
        model = Cnn3d(TINY, init_seed=3)
        x = np.random.default_rng(0).random((2, 1, 32, 32, 16), dtype=np.float32)
        probs = model.forward(x)
        assert probs.shape == (2,)
        assert np.all((probs > 0) & (probs < 1))

    def test_infer_is_deterministic_and_side_effect_free(self):
        model = Cnn3d(TINY, init_seed=4)
        x = np.random.default_rng(1).random((2, 1, 32, 32, 16), dtype=np.float32)
        stats_before = {k: v.copy() for k, v in model.running_stats().items()}
        a = model.forward(x)
        b = model.forward(x)
        assert np.array_equal(a, b)
        for k, v in model.running_stats().items():
            assert np.array_equal(v, stats_before[k])

    def test_train_forward_deterministic_given_dropout_seed(self):
        x = np.random.default_rng(2).random((2, 1, 32, 32, 16), dtype=np.float32)
        y = np.array([1.0, 0.0], dtype=np.float32)
        runs = []
        for _ in range(2):
            model = Cnn3d(TINY, init_seed=5)
            loss, probs, grads = model.backward(x, y, dropout_seed=77)
            runs.append((loss, probs.copy(), {k: g.copy() for k, g in grads.items()}))
        assert runs[0][0] == runs[1][0]
        assert np.array_equal(runs[0][1], runs[1][1])
        for k in runs[0][2]:
            assert np.array_equal(runs[0][2][k], runs[1][2][k])

    def test_same_init_seed_same_weights(self):
        a = Cnn3d(TINY, init_seed=9).parameters()
        b = Cnn3d(TINY, init_seed=9).parameters()
        c = Cnn3d(TINY, init_seed=10).parameters()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)


class TestWholeModelGradients:
    def test_finite_difference_spot_check(self):
        rng = np.random.default_rng(42)
        model = Cnn3d(TINY, init_seed=3, dtype=np.float64)
        x = rng.random((2, 1, 32, 32, 16))
        y = np.array([1.0, 0.0])
        _, _, grads = model.backward(x, y, dropout_seed=9)

        def loss():
            return model.backward(x, y, dropout_seed=9)[0]

        checked = 0
        for name, p in model.parameters().items():
            idx = probe_indices(rng, p.size, 2)
            numeric = central_difference(loss, p, idx)
            for i, num in zip(idx, numeric):
                assert rel_err(num, grads[name].ravel()[i]) <= 1e-4, name
                checked += 1
        assert checked >= 16

    def test_single_step_decreases_loss_at_small_lr(self):
        model = Cnn3d(TINY, init_seed=6)
        opt = Adam(learning_rate=1e-5)
        x = np.random.default_rng(3).random((1, 1, 32, 32, 16), dtype=np.float32)
        y = np.array([1.0], dtype=np.float32)
        loss0, _, grads = model.backward(x, y, dropout_seed=1)
        opt.step(model.parameters(), grads)
        loss1, _, _ = model.backward(x, y, dropout_seed=1)
        assert loss1 < loss0


class TestCheckpoint:
    def test_roundtrip_restores_everything(self):
        model = Cnn3d(TINY, init_seed=7)
        opt = Adam(learning_rate=1e-3)
        x = np.random.default_rng(4).random((2, 1, 32, 32, 16), dtype=np.float32)
        y = np.array([1.0, 0.0], dtype=np.float32)
        for step in range(3):
            _, _, grads = model.backward(x, y, dropout_seed=step)
            opt.step(model.parameters(), grads)

        buf = io.BytesIO()
        save_model(buf, model, opt, counters={"epoch": 2})
        buf.seek(0)

        restored = Cnn3d(TINY, init_seed=0)
        opt2 = Adam(learning_rate=1e-3)
        counters = load_model(buf, restored, opt2)
        assert counters == {"epoch": 2}
        for k, v in model.parameters().items():
            assert np.array_equal(v, restored.parameters()[k]), k
        for k, v in model.running_stats().items():
            assert np.array_equal(v, restored.running_stats()[k]), k
        assert opt2.step_count == opt.step_count
        for k in opt.m:
            assert np.array_equal(opt.m[k], opt2.m[k])

    def test_resume_is_bit_exact(self):
        x = np.random.default_rng(5).random((2, 1, 32, 32, 16), dtype=np.float32)
        y = np.array([1.0, 0.0], dtype=np.float32)

        def train(model, opt, steps, start=0):
            for step in range(start, start + steps):
                _, _, grads = model.backward(x, y, dropout_seed=step)
                opt.step(model.parameters(), grads)

        straight = Cnn3d(TINY, init_seed=8)
        opt_a = Adam(learning_rate=1e-3)
        train(straight, opt_a, 6)

        half = Cnn3d(TINY, init_seed=8)
        opt_b = Adam(learning_rate=1e-3)
        train(half, opt_b, 3)
        buf = io.BytesIO()
        save_model(buf, half, opt_b)
        buf.seek(0)
        resumed = Cnn3d(TINY, init_seed=0)
        opt_c = Adam(learning_rate=1e-3)
        load_model(buf, resumed, opt_c)
        train(resumed, opt_c, 3, start=3)

        for k, v in straight.parameters().items():
            assert np.array_equal(v, resumed.parameters()[k]), k
        for k, v in straight.running_stats().items():
            assert np.array_equal(v, resumed.running_stats()[k]), k

    def test_architecture_hash_mismatch_rejected(self):
        model = Cnn3d(TINY)
        buf = io.BytesIO()
        save_model(buf, model)
        buf.seek(0)
        other = Cnn3d(Architecture(widths=(4, 4), dense_units=8, input_dims=(32, 32, 16)))
        with pytest.raises(FormatError, match="hash"):
            load_model(buf, other)

    def test_bad_magic_rejected(self):
        with pytest.raises(FormatError):
            load_model(io.BytesIO(b"NOPE" + b"\x00" * 100), Cnn3d(TINY))
