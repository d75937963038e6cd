"""Tensor core: forward values, gradients vs central differences, detach."""

import numpy as np
import pytest

from lsqnet.tensor import Tensor, conv2d, log_softmax, softmax_cross_entropy


def fd_grad(f, x, eps=1e-5):
    """Central-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
        it.iternext()
    return g


def check_grad(op, x, eps=1e-5, rtol=1e-4):
    t = Tensor(x, requires_grad=True)
    op(t).sum().backward()
    want = fd_grad(lambda v: op(Tensor(v)).sum().item(), x, eps)
    np.testing.assert_allclose(t.grad, want, rtol=rtol, atol=1e-8)


class TestArithmetic:
    def test_add_mul_values(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
        np.testing.assert_array_equal((a + b).data, [4.0, 6.0])
        np.testing.assert_array_equal((a * b).data, [3.0, 8.0])
        np.testing.assert_array_equal((a - b).data, [-2.0, -2.0])
        np.testing.assert_array_equal((a / b).data, [1 / 3, 0.5])

    def test_scalar_coercion(self):
        a = Tensor([1.0, 2.0], requires_grad=True)
        (2.0 * a + 1.0).sum().backward()
        np.testing.assert_array_equal(a.grad, [2.0, 2.0])

    @pytest.mark.parametrize("op", [
        lambda t: t * t,
        lambda t: t / 3.0,
        lambda t: 2.0 / (t + 5.0),
        lambda t: (t + 1.0) * (t - 2.0),
        lambda t: t.sqrt(),
        lambda t: t.relu(),
        lambda t: t.mean(),
        lambda t: t.mean(axis=0),
        lambda t: t.reshape(6),
    ])
    def test_grad_matches_finite_differences(self, op, rng):
        check_grad(op, rng.uniform(0.5, 2.0, size=(2, 3)))

    def test_broadcast_grad(self, rng):
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4,)), requires_grad=True)
        (a * b).sum().backward()
        np.testing.assert_allclose(b.grad, a.data.sum(axis=0))
        np.testing.assert_allclose(a.grad, np.broadcast_to(b.data, (3, 4)))

    def test_loss_sum_grad_is_ones(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones(5))

    def test_loss_half_sum_squares_grad_is_x(self, rng):
        x = Tensor(rng.normal(size=5), requires_grad=True)
        ((x * x).sum() * 0.5).backward()
        np.testing.assert_allclose(x.grad, x.data)


class TestMatmul:
    def test_identity(self):
        eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal((eye @ b).data, b.data)

    def test_hand_arithmetic(self):
        out = Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_grad_vs_finite_differences(self, rng):
        a = rng.normal(size=(3, 4))
        b = rng.normal(size=(4, 2))
        ta = Tensor(a, requires_grad=True)
        tb = Tensor(b, requires_grad=True)
        (ta @ tb).sum().backward()
        np.testing.assert_allclose(
            ta.grad, fd_grad(lambda v: (Tensor(v) @ Tensor(b)).sum().item(), a),
            rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(
            tb.grad, fd_grad(lambda v: (Tensor(a) @ Tensor(v)).sum().item(), b),
            rtol=1e-4, atol=1e-8)
        # grad w.r.t. a of sum(a@b) is ones @ b.T
        np.testing.assert_allclose(ta.grad, np.ones((3, 2)) @ b.T)

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))
        with pytest.raises(ValueError):
            Tensor(np.ones(3)) @ Tensor(np.ones((3, 2)))


def naive_conv2d(x, w, stride, pad):
    """Direct-loop cross-correlation oracle."""
    n, c, h, wid = x.shape
    f, _, kh, kw = w.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wid + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for b in range(n):
        for j in range(f):
            for y in range(oh):
                for z in range(ow):
                    patch = x[b, :, y * stride:y * stride + kh,
                              z * stride:z * stride + kw]
                    out[b, j, y, z] = (patch * w[j]).sum()
    return out


class TestConv2d:
    def test_scalar_kernel_doubles_input(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 3, 3)))
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        np.testing.assert_allclose(conv2d(x, w).data, 2.0 * x.data)

    def test_all_ones_window_sum(self):
        x = Tensor(np.ones((1, 1, 2, 2)))
        w = Tensor(np.ones((1, 1, 2, 2)))
        np.testing.assert_array_equal(conv2d(x, w).data, [[[[4.0]]]])

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
    def test_matches_naive_oracle(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), stride, pad)
        np.testing.assert_allclose(out.data, naive_conv2d(x, w, stride, pad),
                                   rtol=1e-12, atol=1e-12)

    def test_grad_vs_finite_differences(self, rng):
        x = rng.normal(size=(2, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        tx = Tensor(x, requires_grad=True)
        tw = Tensor(w, requires_grad=True)
        conv2d(tx, tw, stride=2, padding=1).sum().backward()
        np.testing.assert_allclose(
            tx.grad,
            fd_grad(lambda v: conv2d(Tensor(v), Tensor(w), 2, 1).sum().item(), x),
            rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(
            tw.grad,
            fd_grad(lambda v: conv2d(Tensor(x), Tensor(v), 2, 1).sum().item(), w),
            rtol=1e-4, atol=1e-8)

    def test_config_errors(self):
        x, w = Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3)))
        with pytest.raises(ValueError):
            conv2d(x, w)  # channel mismatch
        with pytest.raises(ValueError):
            conv2d(x, Tensor(np.ones((1, 2, 3, 3))), stride=0)


class TestDetach:
    def test_blocks_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = x.detach()
        assert not y.requires_grad
        np.testing.assert_array_equal(y.data, x.data)

    def test_cancellation_identity(self):
        # y = detach(x1 - x2) + x2 equals x1 in forward; gradient flows
        # only through the x2 term. Values chosen so the float
        # subtraction cancels exactly.
        x1 = Tensor([3.0, 8.0], requires_grad=True)
        x2 = Tensor([1.5, 2.0], requires_grad=True)
        y = (x1 - x2).detach() + x2
        np.testing.assert_array_equal(y.data, x1.data)
        y.sum().backward()
        assert x1.grad is None
        np.testing.assert_array_equal(x2.grad, [1.0, 1.0])


class TestClipRound:
    def test_clip_values(self):
        out = Tensor([-2.0, 0.5, 9.0]).clip(0, 3)
        np.testing.assert_array_equal(out.data, [0.0, 0.5, 3.0])

    def test_clip_wide_is_identity(self, rng):
        x = rng.normal(size=8)
        np.testing.assert_array_equal(Tensor(x).clip(-1e18, 1e18).data, x)

    def test_clip_grad_mask(self):
        x = Tensor([-2.0, 0.5, 9.0], requires_grad=True)
        x.clip(0, 3).sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_clip_boundary_passes_gradient(self):
        # values exactly on the bounds pass gradient through
        x = Tensor([0.0, 3.0], requires_grad=True)
        x.clip(0, 3).sum().backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])

    def test_clip_bounds_order_error(self):
        with pytest.raises(ValueError):
            Tensor([1.0]).clip(3, 0)

    def test_round_nearest(self):
        out = Tensor([1.4, 1.6, -1.4]).round_nearest()
        np.testing.assert_array_equal(out.data, [1.0, 2.0, -1.0])

    def test_round_ties_to_even(self):
        out = Tensor([0.5, 1.5, 2.5]).round_nearest()
        np.testing.assert_array_equal(out.data, [0.0, 2.0, 2.0])

    def test_round_integers_fixed(self):
        x = np.array([-3.0, 0.0, 7.0])
        np.testing.assert_array_equal(Tensor(x).round_nearest().data, x)

    def test_round_has_no_gradient(self):
        x = Tensor([1.4], requires_grad=True)
        x.round_nearest().sum().backward()
        assert x.grad is None


class TestSoftmaxCrossEntropy:
    def test_uniform_logits_is_log_k(self):
        logits = Tensor(np.zeros((4, 7)))
        loss = softmax_cross_entropy(logits, np.zeros(4, dtype=int))
        assert loss.item() == pytest.approx(np.log(7))

    def test_large_margin_loss_vanishes(self):
        logits = np.zeros((1, 3))
        logits[0, 1] = 50.0
        loss = softmax_cross_entropy(Tensor(logits), [1])
        assert loss.item() < 1e-9

    def test_grad_vs_finite_differences(self, rng):
        logits = rng.normal(size=(4, 3))
        labels = np.array([0, 2, 1, 2])
        t = Tensor(logits, requires_grad=True)
        softmax_cross_entropy(t, labels).backward()
        want = fd_grad(
            lambda v: softmax_cross_entropy(Tensor(v), labels).item(), logits)
        np.testing.assert_allclose(t.grad, want, rtol=1e-4, atol=1e-8)

    def test_soft_targets_match_onehot(self, rng):
        logits = rng.normal(size=(3, 4))
        labels = np.array([1, 3, 0])
        onehot = np.zeros((3, 4))
        onehot[np.arange(3), labels] = 1.0
        hard = softmax_cross_entropy(Tensor(logits), labels).item()
        soft = softmax_cross_entropy(Tensor(logits), onehot).item()
        assert hard == pytest.approx(soft)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_log_softmax_normalizes(self, rng):
        lp = log_softmax(rng.normal(size=(5, 4)))
        np.testing.assert_allclose(np.exp(lp).sum(axis=1), np.ones(5))


class TestBackwardContract:
    def test_non_scalar_loss_errors(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(RuntimeError, match="scalar"):
            (x * 2).backward()

    def test_stale_gradient_errors(self):
        x = Tensor([1.0], requires_grad=True)
        (x * 2).sum().backward()
        with pytest.raises(RuntimeError, match="still populated"):
            (x * 3).sum().backward()
        x.zero_grad()
        (x * 3).sum().backward()  # fine after reset
        np.testing.assert_array_equal(x.grad, [3.0])

    def test_no_grad_without_requires_grad(self):
        x = Tensor([1.0, 2.0])
        y = Tensor([1.0, 2.0], requires_grad=True)
        (x * y).sum().backward()
        assert x.grad is None

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * 3
        (y + y).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0])

    def test_determinism(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
            ((x @ w).relu() * x).sum().backward()
            return x.grad.copy(), w.grad.copy()

        gx1, gw1 = run()
        gx2, gw2 = run()
        assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)
