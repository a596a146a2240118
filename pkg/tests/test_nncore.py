import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fundoscope.nncore import (Network, OptimizerState, ShapeError, gradient_check, sgd_step,
                               softmax, softmax_cross_entropy)
from fundoscope.nncore import functional as F
from fundoscope.nncore.gradcheck import relative_error, roundoff_floor
from fundoscope.nncore.network import batchnorm, conv, dropout, fc, maxpool, relu, softmax_output


def naive_conv(x, W, b, stride, pad):
    """Six nested loops straight from the definition (cross-correlation)."""
    n, c, hgt, wid = x.shape
    k, _, kh, kw = W.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (hgt + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, oh, ow))
    for i in range(n):
        for o in range(k):
            for y in range(oh):
                for z in range(ow):
                    acc = 0.0 if b is None else b[o]
                    for ci in range(c):
                        for dy in range(kh):
                            for dz in range(kw):
                                acc += xp[i, ci, y * stride + dy, z * stride + dz] * W[o, ci, dy, dz]
                    out[i, o, y, z] = acc
    return out


def brute_pool(x, k, s):
    n, c, hgt, wid = x.shape
    oh = F.pool_output_size(hgt, k, s, True)
    ow = F.pool_output_size(wid, k, s, True)
    out = np.empty((n, c, oh, ow))
    for y in range(oh):
        for z in range(ow):
            out[:, :, y, z] = x[:, :, y * s:min(y * s + k, hgt), z * s:min(z * s + k, wid)].max(axis=(2, 3))
    return out


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


class TestConv:
    @pytest.mark.parametrize("stride,pad", [(1, 1), (1, 0), (2, 1), (2, 0)])
    def test_matches_naive_loops(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x = rng.normal(size=(2, 3, 7, 6))
        W = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out, _ = F.conv2d_forward(x, W, b, stride, pad)
        np.testing.assert_allclose(out, naive_conv(x, W, b, stride, pad), atol=1e-12)

    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 1, 5, 5))
        W = np.zeros((1, 1, 3, 3))
        W[0, 0, 1, 1] = 1
        out, _ = F.conv2d_forward(x, W, None, 1, 1)
        np.testing.assert_array_equal(out, x)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 2, 5, 5))
        W = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        g = rng.normal(size=(2, 3, 3, 3))

        def f():
            return float(np.sum(F.conv2d_forward(x, W, b, 2, 1)[0] * g))

        _, cache = F.conv2d_forward(x, W, b, 2, 1)
        dx, dW, db = F.conv2d_backward(g, cache)
        np.testing.assert_allclose(dx, numeric_grad(f, x), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(dW, numeric_grad(f, W), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(db, numeric_grad(f, b), rtol=1e-6, atol=1e-8)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            F.conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)), None, 1, 1)

    def test_backward_without_cache(self):
        with pytest.raises(ValueError):
            F.conv2d_backward(np.zeros((1, 1, 2, 2)), None)


class TestPool:
    @pytest.mark.parametrize("size", [4, 5, 7, 1])
    def test_ceil_mode_matches_brute_force(self, size):
        x = np.random.default_rng(size).normal(size=(2, 3, size, size))
        out, _ = F.maxpool_forward(x, 2, 2, True)
        np.testing.assert_array_equal(out, brute_pool(x, 2, 2))

    def test_output_sizes(self):
        assert F.pool_output_size(5, 2, 2, True) == 3
        assert F.pool_output_size(5, 2, 2, False) == 2
        assert F.pool_output_size(1, 2, 2, True) == 1

    def test_gradient_routes_to_argmax(self):
        x = np.array([[[[1.0, 5.0], [3.0, 2.0]]]])
        out, cache = F.maxpool_forward(x, 2, 2, True)
        dx = F.maxpool_backward(np.ones_like(out) * 7, cache)
        np.testing.assert_array_equal(dx, [[[[0, 7], [0, 0]]]])

    def test_ties_send_gradient_to_one_entry(self):
        x = np.ones((1, 1, 2, 2))
        out, cache = F.maxpool_forward(x, 2, 2, True)
        dx = F.maxpool_backward(np.ones_like(out), cache)
        assert dx.sum() == 1.0 and (dx >= 0).all()


class TestBatchNorm:
    def test_train_mode_normalises(self):
        rng = np.random.default_rng(0)
        x = rng.normal(3, 2, size=(16, 4, 5, 5))
        gamma, beta = np.ones(4), np.zeros(4)
        out, _ = F.batchnorm_forward(x, gamma, beta, np.zeros(4), np.ones(4), "train", 0.9, 1e-5, False)
        np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_running_statistics_update(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, 3))
        rm, rv = np.zeros(3), np.ones(3)
        F.batchnorm_forward(x, np.ones(3), np.zeros(3), rm, rv, "train", 0.9, 1e-5, True)
        np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1))

    def test_infer_mode_uses_running_statistics(self):
        x = np.array([[1.0], [3.0]])
        out, _ = F.batchnorm_forward(x, np.array([2.0]), np.array([1.0]), np.array([1.0]),
                                     np.array([4.0]), "infer", 0.9, 0.0, False)
        np.testing.assert_allclose(out, [[1.0], [3.0]])

    def test_train_mode_rejects_single_sample(self):
        with pytest.raises(ValueError):
            F.batchnorm_forward(np.zeros((1, 3)), np.ones(3), np.zeros(3), np.zeros(3), np.ones(3),
                                "train", 0.9, 1e-5, False)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 3, 2, 2))
        gamma, beta = rng.normal(size=3), rng.normal(size=3)
        g = rng.normal(size=x.shape)

        def f():
            out, _ = F.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), "train", 0.9, 1e-5, False)
            return float(np.sum(out * g))

        _, cache = F.batchnorm_forward(x, gamma, beta, np.zeros(3), np.ones(3), "train", 0.9, 1e-5, False)
        dx, dg, db = F.batchnorm_backward(g, cache)
        np.testing.assert_allclose(dx, numeric_grad(f, x), rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(dg, numeric_grad(f, gamma), rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(db, numeric_grad(f, beta), rtol=1e-6, atol=1e-8)


class TestPointwise:
    def test_relu(self):
        out, cache = F.relu_forward(np.array([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out, [0, 0, 2])
        np.testing.assert_array_equal(F.relu_backward(np.ones(3), cache), [0, 0, 1])

    def test_dropout_preserves_expectation(self):
        rng = np.random.default_rng(0)
        x = np.ones(400_000)
        out, mask = F.dropout(x, 0.5, "train", rng)
        assert abs(out.mean() - 1.0) < 0.01  # law of large numbers, sd ≈ 0.0016
        assert set(np.unique(out)) <= {0.0, 2.0}

    def test_dropout_is_identity_at_inference(self):
        x = np.arange(5.0)
        out, _ = F.dropout(x, 0.5, "infer", np.random.default_rng(0))
        np.testing.assert_array_equal(out, x)

    def test_softmax_cross_entropy(self):
        logits = np.array([[2.0, 1.0, 0.1], [0.0, 0.0, 0.0]])
        loss, grad = softmax_cross_entropy(logits, np.array([0, 2]))
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        assert loss == pytest.approx(-(np.log(p[0, 0]) + np.log(p[1, 2])) / 2, rel=1e-12)
        onehot = np.array([[1, 0, 0], [0, 0, 1]])
        np.testing.assert_allclose(grad, (p - onehot) / 2)

    def test_softmax_is_shift_invariant_and_stable(self):
        z = np.array([[1000.0, 1001.0]])
        np.testing.assert_allclose(softmax(z), softmax(z - 1000))
        assert np.isfinite(softmax(z)).all()

    @pytest.mark.parametrize("labels", [[0, 3], [-1, 0]])
    def test_label_range(self, labels):
        with pytest.raises(ValueError):
            softmax_cross_entropy(np.zeros((2, 3)), np.array(labels))


def _tiny(seed=0, dtype=np.float64):
    layers = [conv(4, bias=False), batchnorm(), relu(), maxpool(), conv(4), relu(),
              fc(6, bias=False), batchnorm(), relu(), dropout(0.5), fc(3), softmax_output()]
    return Network(layers, (2, 6, 6), dtype=dtype, seed=seed)


class TestNetwork:
    def test_shape_trace(self):
        net = _tiny()
        assert net.output_dim == 3
        assert net.shapes[3] == (4, 3, 3)

    def test_rejects_wrong_input(self):
        with pytest.raises(ShapeError):
            _tiny().forward(np.zeros((2, 3, 6, 6)))

    def test_gradient_check_passes(self):
        net = _tiny(3)
        rng = np.random.default_rng(3)
        rep = gradient_check(net, rng.normal(size=(5, 2, 6, 6)), rng.integers(0, 3, 5))
        assert rep.passed, rep.errors

    def test_gradient_check_catches_a_wrong_gradient(self):
        from fundoscope.nncore import compare_gradients
        from fundoscope.nncore.gradcheck import analytic_gradients

        net = _tiny(4)
        rng = np.random.default_rng(4)
        x, y = rng.normal(size=(5, 2, 6, 6)), rng.integers(0, 3, 5)
        grads, _ = analytic_gradients(net, x, y)
        grads[0]["W"] = grads[0]["W"] * 1.01
        assert not compare_gradients(net, x, y, grads).passed

    def test_branch_digest_tracks_gates(self):
        net = _tiny(6, dtype=np.float64)
        x, y = np.random.default_rng(6).normal(size=(4, 2, 6, 6)), np.array([0, 1, 2, 0])
        with net.deterministic():
            loss, digest = net.loss_and_branches(x, y)
            assert net.loss_and_branches(x.copy(), y) == (loss, digest)
            assert net.loss_and_branches(-x, y)[1] != digest
            assert loss == pytest.approx(net.loss(x, y), abs=0)

    def test_gradient_check_requires_float64(self):
        net = _tiny(dtype=np.float32)
        with pytest.raises(ValueError):
            gradient_check(net, np.zeros((2, 2, 6, 6)), np.array([0, 1]))

    def test_state_dict_round_trip(self):
        a, b = _tiny(1), _tiny(2)
        b.load_state_dict(a.state_dict())
        x = np.random.default_rng(0).normal(size=(3, 2, 6, 6))
        a.eval(), b.eval()
        np.testing.assert_array_equal(a.forward(x), b.forward(x))

    def test_eval_forward_is_deterministic(self):
        net = _tiny(5)
        net.eval()
        x = np.random.default_rng(0).normal(size=(3, 2, 6, 6))
        np.testing.assert_array_equal(net.forward(x), net.forward(x))


class TestSGD:
    def test_momentum_recurrence(self):
        net = Network([fc(2), softmax_output()], (3,), dtype=np.float64, seed=0)
        w0 = net.params[0]["W"].copy()
        g = np.full_like(w0, 0.5)
        state = OptimizerState(0.1, 0.9)
        v = np.zeros_like(w0)
        w = w0.copy()
        for _ in range(4):
            grads = [{"W": g, "b": np.zeros(2)}, {}]
            sgd_step(net, grads, state)
            v = 0.9 * v - 0.1 * g
            w = w + v
        np.testing.assert_allclose(net.params[0]["W"], w, rtol=1e-14)

    def test_training_lowers_loss(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(64, 4))
        y = (x[:, 0] > 0).astype(int)
        net = Network([fc(8), relu(), fc(2), softmax_output()], (4,), dtype=np.float64, seed=0)
        state = OptimizerState(0.1, 0.9)
        first = net.loss(x, y)
        for _ in range(50):
            _, grads = net.loss_and_grads(x, y)
            sgd_step(net, grads, state)
        assert net.loss(x, y) < first / 2


class TestNumericHelpers:
    def test_relative_error(self):
        assert relative_error(1.0, 1.0) == 0
        assert relative_error(0.0, 0.0) == 0
        assert relative_error(2.0, 1.0) == pytest.approx(0.5)

    def test_roundoff_floor_scales_with_step(self):
        assert roundoff_floor(1.0, 1e-6) == pytest.approx(10 * roundoff_floor(1.0, 1e-5))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2), st.integers(1, 2))
def test_conv_output_shape_property(n, hgt, wid, pad, stride):
    x = np.ones((n, 2, hgt, wid))
    W = np.ones((3, 2, 3, 3))
    if hgt + 2 * pad < 3 or wid + 2 * pad < 3:
        with pytest.raises(ShapeError):
            F.conv2d_forward(x, W, None, stride, pad)
        return
    out, _ = F.conv2d_forward(x, W, None, stride, pad)
    assert out.shape == (n, 3, (hgt + 2 * pad - 3) // stride + 1, (wid + 2 * pad - 3) // stride + 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2**31))
def test_ceil_pool_never_vanishes_property(size, seed):
    x = np.random.default_rng(seed).normal(size=(1, 1, size, size))
    out, _ = F.maxpool_forward(x, 2, 2, True)
    assert out.shape[-1] == -(-size // 2) >= 1
    assert out.max() == x.max()
