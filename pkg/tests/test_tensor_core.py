"""Numeric core: layer math against finite differences and hand arithmetic."""

import numpy as np
import pytest

from stanza.tensor_core import (Conv2d, CorruptCheckpoint, Flatten,
                                FullyConnected, MaxPool2d, OptimizerState,
                                ReLU, ShapeMismatch, SoftmaxCrossEntropy,
                                backward, block_backward, block_forward,
                                deserialize_params, forward, out_shape,
                                param_count, param_shapes, seeded_init,
                                serialize_params, sgd_step)

from oracles import finite_diff_grad, rel_err


def check_grads(layer, params, x, rng, labels=None, tol=1e-3, eps=1e-3):
    """Finite-difference check of input and parameter gradients.

    Reduces the layer output to a scalar through a fixed random projection so
    backward() can be driven with a known upstream gradient.
    """
    y0, cache = forward(layer, params, x, labels=labels)
    if isinstance(layer, SoftmaxCrossEntropy):
        proj = None
        gy = None

        def f():
            y, _ = forward(layer, params, x, labels=labels)
            return float(np.asarray(y, dtype=np.float64).sum())
    else:
        proj = rng.standard_normal(y0.shape)

        def f():
            y, _ = forward(layer, params, x, labels=labels)
            return float((np.asarray(y, dtype=np.float64) * proj).sum())

        gy = proj.astype(np.float32)

    gx, gparams = backward(layer, params, cache, gy)
    assert rel_err(gx, finite_diff_grad(f, x, eps)) < tol, type(layer).__name__
    for p, gp in zip(params, gparams):
        assert rel_err(gp, finite_diff_grad(f, p, eps)) < tol, type(layer).__name__


class TestHandArithmetic:
    def test_conv_single_window(self):
        """2x2 identity-corner kernel over a 2x2 image: 1*1 + 4*1 + 0.5."""
        layer = Conv2d(1, 1, 2)
        w = np.array([[[[1.0, 0.0], [0.0, 1.0]]]], dtype=np.float32)
        b = np.array([0.5], dtype=np.float32)
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
        y, _ = forward(layer, [w, b], x)
        assert y.shape == (1, 1, 1, 1)
        assert y[0, 0, 0, 0] == pytest.approx(5.5)

    def test_fully_connected(self):
        layer = FullyConnected(2, 2)
        w = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        b = np.array([0.5, -0.5], dtype=np.float32)
        x = np.array([[1.0, 1.0]], dtype=np.float32)
        y, _ = forward(layer, [w, b], x)
        np.testing.assert_allclose(y, [[4.5, 5.5]])

    def test_maxpool_picks_max(self):
        layer = MaxPool2d(2, 2)
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        y, _ = forward(layer, [], x)
        np.testing.assert_array_equal(y[0, 0], [[5, 7], [13, 15]])

    def test_softmax_ce_uniform_logits(self):
        """Logits [0, 0] with label 0: loss ln 2, per-sample grad [-0.5, 0.5]."""
        layer = SoftmaxCrossEntropy()
        x = np.zeros((1, 2), dtype=np.float32)
        labels = np.array([0])
        losses, cache = forward(layer, [], x, labels=labels)
        assert losses[0] == pytest.approx(np.log(2.0), rel=1e-6)
        g, _ = backward(layer, [], cache, None)
        np.testing.assert_allclose(g, [[-0.5, 0.5]], atol=1e-7)

    def test_relu(self):
        x = np.array([[-1.0, 0.0, 2.0]], dtype=np.float32)
        y, cache = forward(ReLU(), [], x)
        np.testing.assert_array_equal(y, [[0.0, 0.0, 2.0]])
        gx, _ = backward(ReLU(), [], cache, np.ones_like(x))
        np.testing.assert_array_equal(gx, [[0.0, 0.0, 1.0]])


class TestFiniteDifferences:
    def test_conv2d(self, rng):
        layer = Conv2d(3, 4, 3, stride=1, padding=1)
        params = seeded_init([layer], 0)[0]
        x = rng.standard_normal((2, 3, 5, 5)).astype(np.float32)
        check_grads(layer, params, x, rng)

    def test_conv2d_strided_unpadded(self, rng):
        layer = Conv2d(2, 3, 3, stride=2, padding=0)
        params = seeded_init([layer], 1)[0]
        x = rng.standard_normal((2, 2, 7, 7)).astype(np.float32)
        check_grads(layer, params, x, rng)

    def test_fully_connected(self, rng):
        layer = FullyConnected(11, 7)
        params = seeded_init([layer], 2)[0]
        x = rng.standard_normal((3, 11)).astype(np.float32)
        check_grads(layer, params, x, rng)

    def test_relu(self, rng):
        # keep inputs away from the kink at zero
        x = rng.uniform(0.1, 1.0, (4, 9)).astype(np.float32)
        x *= rng.choice([-1.0, 1.0], x.shape).astype(np.float32)
        check_grads(ReLU(), [], x, rng)

    def test_maxpool(self, rng):
        # distinct values with gaps far above eps so the argmax never flips
        vals = rng.permutation(np.arange(2 * 2 * 6 * 6, dtype=np.float32)) * 0.1
        x = vals.reshape(2, 2, 6, 6)
        check_grads(MaxPool2d(2, 2), [], x, rng)

    def test_maxpool_overlapping_windows(self, rng):
        vals = rng.permutation(np.arange(1 * 2 * 5 * 5, dtype=np.float32)) * 0.1
        x = vals.reshape(1, 2, 5, 5)
        check_grads(MaxPool2d(3, 2), [], x, rng)

    def test_flatten(self, rng):
        x = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
        check_grads(Flatten(), [], x, rng)

    def test_softmax_ce(self, rng):
        x = rng.standard_normal((5, 7)).astype(np.float32)
        labels = rng.integers(0, 7, 5)
        check_grads(SoftmaxCrossEntropy(), [], x, rng, labels=labels)


class TestBatchSemantics:
    def test_param_grads_are_batch_sums(self, rng):
        """Backward over a batch equals the sum of per-sample backward passes."""
        layers = [Conv2d(2, 3, 3, 1, 1), ReLU(), MaxPool2d(2, 2), Flatten(),
                  FullyConnected(3 * 3 * 3, 8), SoftmaxCrossEntropy()]
        params = seeded_init(layers, 3)
        x = rng.standard_normal((6, 2, 6, 6)).astype(np.float32)
        labels = rng.integers(0, 8, 6)
        out, caches = block_forward(layers, params, x, labels=labels)
        _, grads = block_backward(layers, params, caches, None)

        summed = None
        for i in range(6):
            _, c1 = block_forward(layers, params, x[i:i + 1], labels=labels[i:i + 1])
            _, g1 = block_backward(layers, params, c1, None)
            if summed is None:
                summed = g1
            else:
                summed = [[a + b for a, b in zip(la, lb)]
                          for la, lb in zip(summed, g1)]
        for la, lb in zip(grads, summed):
            for a, b in zip(la, lb):
                assert rel_err(a, b) < 1e-5

    def test_forward_finite_on_finite_inputs(self, rng):
        layers = [Conv2d(3, 4, 3, 1, 1), ReLU(), MaxPool2d(2, 2), Flatten(),
                  FullyConnected(4 * 4 * 4, 10), SoftmaxCrossEntropy()]
        params = seeded_init(layers, 4)
        x = (rng.standard_normal((8, 3, 8, 8)) * 50).astype(np.float32)
        labels = rng.integers(0, 10, 8)
        out, caches = block_forward(layers, params, x, labels=labels)
        assert np.isfinite(out).all()
        gx, grads = block_backward(layers, params, caches, None)
        assert np.isfinite(gx).all()
        assert all(np.isfinite(t).all() for layer in grads for t in layer)


class TestShapeChecks:
    def test_conv_wrong_channels(self):
        layer = Conv2d(3, 8, 3)
        params = seeded_init([layer], 0)[0]
        with pytest.raises(ShapeMismatch):
            forward(layer, params, np.zeros((1, 4, 8, 8), dtype=np.float32))

    def test_fc_wrong_dim(self):
        layer = FullyConnected(4, 2)
        params = seeded_init([layer], 0)[0]
        with pytest.raises(ShapeMismatch):
            forward(layer, params, np.zeros((1, 5), dtype=np.float32))

    def test_pool_too_large(self):
        with pytest.raises(ShapeMismatch):
            forward(MaxPool2d(4, 4), [], np.zeros((1, 1, 3, 3), dtype=np.float32))

    def test_out_shape_chain(self):
        shape = (3, 16, 16)
        shape = out_shape(Conv2d(3, 8, 3, 1, 1), shape)
        assert shape == (8, 16, 16)
        shape = out_shape(MaxPool2d(2, 2), shape)
        assert shape == (8, 8, 8)
        assert out_shape(Flatten(), shape) == (512,)


class TestSgdStep:
    def test_momentum_two_steps_hand_computed(self):
        """v=g/n then 0.9v+g/n; w follows 2.0 -> 1.9 -> 1.71."""
        params = [[np.array([2.0], dtype=np.float32)]]
        opt = OptimizerState.for_params(params, lr=0.1, momentum=0.9)
        g = [[np.array([4.0], dtype=np.float32)]]
        sgd_step(params, g, 4, opt)
        assert params[0][0][0] == pytest.approx(1.9, rel=1e-6)
        sgd_step(params, g, 4, opt)
        assert params[0][0][0] == pytest.approx(1.71, rel=1e-6)

    def test_zero_momentum_is_plain_sgd(self, rng):
        w0 = rng.standard_normal(10).astype(np.float32)
        g = rng.standard_normal(10).astype(np.float32)
        params = [[w0.copy()]]
        opt = OptimizerState.for_params(params, lr=0.05, momentum=0.0)
        sgd_step(params, [[g.copy()]], 8, opt)
        expected = w0 - np.float32(0.05) * (g * (np.float32(1.0) / np.float32(8)))
        np.testing.assert_array_equal(params[0][0], expected)

    def test_momentum_range_checked(self):
        with pytest.raises(ValueError):
            OptimizerState(lr=0.1, momentum=1.0)

    def test_grad_shape_checked(self):
        params = [[np.zeros(3, dtype=np.float32)]]
        opt = OptimizerState.for_params(params, lr=0.1)
        with pytest.raises(ShapeMismatch):
            sgd_step(params, [[np.zeros(4, dtype=np.float32)]], 1, opt)


class TestSeededInit:
    def test_deterministic(self):
        layers = [Conv2d(3, 8, 3, 1, 1), ReLU(), FullyConnected(16, 4)]
        a = seeded_init(layers, 42)
        b = seeded_init(layers, 42)
        for la, lb in zip(a, b):
            for ta, tb in zip(la, lb):
                np.testing.assert_array_equal(ta, tb)
        c = seeded_init(layers, 43)
        assert any(not np.array_equal(ta, tc)
                   for la, lc in zip(a, c) for ta, tc in zip(la, lc))

    def test_fan_in_bounds(self):
        layers = [FullyConnected(100, 50)]
        (w, b), = seeded_init(layers, 0)
        s = np.sqrt(1.0 / 100)
        assert np.abs(w).max() <= s
        assert np.abs(b).max() <= s
        assert w.dtype == np.float32
        # uniform on [-s, s] has std s/sqrt(3)
        assert np.std(w) == pytest.approx(s / np.sqrt(3), rel=0.05)

    def test_param_shapes(self):
        assert param_shapes(Conv2d(3, 8, 5)) == [(8, 3, 5, 5), (8,)]
        assert param_shapes(FullyConnected(9216, 4096)) == [(9216, 4096), (4096,)]
        assert param_count(FullyConnected(9216, 4096)) == 37_752_832
        assert param_shapes(ReLU()) == []


class TestSerialization:
    def test_roundtrip_bit_exact(self, rng):
        layers = [Conv2d(3, 4, 3), ReLU(), FullyConnected(8, 2)]
        params = seeded_init(layers, 7)
        blob = serialize_params(params)
        back = deserialize_params(blob)
        assert len(back) == len(params)
        for la, lb in zip(params, back):
            assert len(la) == len(lb)
            for ta, tb in zip(la, lb):
                assert ta.shape == tb.shape
                np.testing.assert_array_equal(ta, tb)

    def test_deterministic_bytes(self):
        params = seeded_init([FullyConnected(6, 3)], 9)
        assert serialize_params(params) == serialize_params(params)

    def test_bad_magic(self):
        blob = serialize_params([[np.ones(3, dtype=np.float32)]])
        with pytest.raises(CorruptCheckpoint):
            deserialize_params(b"XXXX" + blob[4:])

    def test_truncated(self):
        blob = serialize_params([[np.ones(100, dtype=np.float32)]])
        with pytest.raises(CorruptCheckpoint):
            deserialize_params(blob[:-10])

    def test_trailing_garbage(self):
        blob = serialize_params([[np.ones(3, dtype=np.float32)]])
        with pytest.raises(CorruptCheckpoint):
            deserialize_params(blob + b"\x00\x00")
