"""Tape mechanics and finite-difference gradient checks for every primitive."""

import numpy as np
import pytest

from icr.nn import functional as F
from icr.nn.losses import bce_loss, dice_bce_loss, dice_loss
from icr.nn.tensor import Tensor, no_grad


def finite_diff_check(make_loss, arrays, rng, samples=10, eps=1e-6):
    """Central differences at float64 against the tape gradient."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = make_loss(*tensors)
    loss.backward()
    worst = 0.0
    for t, a in zip(tensors, arrays):
        flat = a.ravel()
        grad = t.grad.ravel()
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + eps
            up = make_loss(*[Tensor(v) for v in arrays]).item()
            flat[idx] = orig - eps
            down = make_loss(*[Tensor(v) for v in arrays]).item()
            flat[idx] = orig
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(grad[idx]), 1e-8)
            worst = max(worst, abs(fd - grad[idx]) / denom)
    return worst


class TestTapeMechanics:
    def test_backward_requires_scalar(self):
        t = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (t * 2.0).backward()

    def test_double_backward_errors(self):
        t = Tensor(np.ones(3), requires_grad=True)
        loss = (t * 2.0).sum()
        loss.backward()
        with pytest.raises(RuntimeError):
            loss.backward()

    def test_backward_without_graph_errors(self):
        with pytest.raises(RuntimeError):
            Tensor(np.float64(1.0)).backward()

    def test_unused_parameter_gradient_is_zero(self):
        used = Tensor(np.ones(4), requires_grad=True)
        unused = Tensor(np.ones(4), requires_grad=True)
        (used * 3.0).sum().backward()
        assert np.array_equal(unused.grad, np.zeros(4))
        assert np.array_equal(used.grad, np.full(4, 3.0))

    def test_gradient_accumulates_until_zeroed(self):
        t = Tensor(np.ones(2), requires_grad=True)
        (t * 1.0).sum().backward()
        (t * 1.0).sum().backward()
        assert np.array_equal(t.grad, np.full(2, 2.0))
        t.zero_grad()
        assert np.array_equal(t.grad, np.zeros(2))

    def test_shared_node_accumulates(self):
        t = Tensor(np.full(2, 3.0), requires_grad=True)
        loss = (t * t).sum()
        loss.backward()
        assert np.allclose(t.grad, 2 * 3.0)

    def test_no_grad_skips_graph(self):
        t = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            out = (t * 2.0).sum()
        assert out._parents == ()
        assert not out.requires_grad


class TestShapesAndSpecialValues:
    def test_conv_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 6, 6, 6))
        k = np.zeros((3, 3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1, 1] = 1.0
        with no_grad():
            out = F.conv3d(Tensor(x), Tensor(k), 1)
        assert np.allclose(out.data, x)

    def test_conv_ones_kernel_interior(self):
        x = np.ones((1, 5, 5, 5))
        k = np.ones((1, 1, 3, 3, 3))
        with no_grad():
            out = F.conv3d(Tensor(x), Tensor(k), 1)
        assert out.data[0, 2, 2, 2] == pytest.approx(27.0)
        assert out.data[0, 0, 0, 0] == pytest.approx(8.0)  # corner sees 2^3

    def test_conv_stride_2_shape(self):
        with no_grad():
            out = F.conv3d(Tensor(np.zeros((2, 8, 8, 8))), Tensor(np.zeros((4, 2, 3, 3, 3))), 2)
        assert out.data.shape == (4, 4, 4, 4)

    def test_conv_channel_mismatch(self):
        with pytest.raises(ValueError):
            F.conv3d(Tensor(np.zeros((2, 4, 4, 4))), Tensor(np.zeros((4, 3, 3, 3, 3))), 1)

    def test_tconv_shape_and_zero(self):
        with no_grad():
            out = F.conv3d_transpose(Tensor(np.zeros((3, 4, 4, 4))), Tensor(np.zeros((3, 2, 3, 3, 3))), 2)
        assert out.data.shape == (2, 8, 8, 8)
        assert np.all(out.data == 0.0)

    def test_tconv_adjoint_identity(self):
        rng = np.random.default_rng(1)
        for stride in (1, 2):
            x = rng.normal(size=(2, 8, 8, 8))
            k = rng.normal(size=(4, 2, 3, 3, 3))
            with no_grad():
                y = F.conv3d(Tensor(x), Tensor(k), stride).data
                probe = rng.normal(size=y.shape)
                back = F.conv3d_transpose(Tensor(probe), Tensor(k), stride).data
            lhs = float((y * probe).sum())
            rhs = float((x * back).sum())
            assert lhs == pytest.approx(rhs, rel=1e-10)

    def test_instance_norm_constant_channel(self):
        x = np.full((2, 4, 4, 4), 7.0)
        with no_grad():
            out = F.instance_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        assert np.allclose(out.data, 0.0, atol=1e-3)

    def test_instance_norm_moments_and_affine(self):
        rng = np.random.default_rng(2)
        x = rng.normal(3.0, 2.0, size=(3, 6, 6, 6))
        with no_grad():
            normed = F.instance_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
            affine = F.instance_norm(Tensor(x), Tensor(np.full(3, 2.0)), Tensor(np.ones(3)))
        for c in range(3):
            assert abs(normed.data[c].mean()) < 1e-5
            assert abs(normed.data[c].std() - 1.0) < 1e-3
        assert np.allclose(affine.data, 2.0 * normed.data + 1.0, atol=1e-6)

    def test_leaky_relu_values(self):
        x = np.array([-2.0, 0.0, 3.0])
        with no_grad():
            out = F.leaky_relu(Tensor(x), 0.01)
        assert np.allclose(out.data, [-0.02, 0.0, 3.0])

    def test_concat_and_bias(self):
        a = Tensor(np.ones((2, 2, 2, 2)))
        b = Tensor(np.zeros((3, 2, 2, 2)))
        with no_grad():
            cat = F.concat_channels(a, b)
            biased = F.add_channel_bias(cat, Tensor(np.arange(5.0)))
        assert cat.data.shape == (5, 2, 2, 2)
        assert biased.data[4, 0, 0, 0] == pytest.approx(4.0)


class TestGradients:
    """Central finite differences, float64, < 1e-4 relative error."""

    TOL = 1e-4

    def test_conv3d(self):
        rng = np.random.default_rng(10)
        for stride in (1, 2):
            for _ in range(3):
                x = rng.normal(size=(2, 5, 5, 5))
                k = rng.normal(size=(3, 2, 3, 3, 3)) * 0.5
                proj_shape = (3, *[-(-5 // stride)] * 3)
                proj = rng.normal(size=proj_shape)
                err = finite_diff_check(
                    lambda xt, kt: (F.conv3d(xt, kt, stride) * Tensor(proj)).sum(),
                    [x, k], rng,
                )
                assert err < self.TOL

    def test_conv3d_transpose(self):
        rng = np.random.default_rng(11)
        for _ in range(3):
            y = rng.normal(size=(2, 4, 4, 4))
            k = rng.normal(size=(2, 3, 3, 3, 3)) * 0.5
            proj = rng.normal(size=(3, 8, 8, 8))
            err = finite_diff_check(
                lambda yt, kt: (F.conv3d_transpose(yt, kt, 2) * Tensor(proj)).sum(),
                [y, k], rng,
            )
            assert err < self.TOL

    def test_pointwise(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(3, 4, 4, 4))
        w = rng.normal(size=(2, 3))
        proj = rng.normal(size=(2, 2, 2, 2))
        err = finite_diff_check(
            lambda xt, wt: (F.pointwise_conv3d(xt, wt, 2) * Tensor(proj)).sum(), [x, w], rng
        )
        assert err < self.TOL

    def test_instance_norm(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 4, 4, 4))
        g = rng.normal(size=2)
        b = rng.normal(size=2)
        proj = rng.normal(size=(2, 4, 4, 4))
        err = finite_diff_check(
            lambda xt, gt, bt: (F.instance_norm(xt, gt, bt) * Tensor(proj)).sum(),
            [x, g, b], rng,
        )
        assert err < self.TOL

    def test_activations(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(2, 3, 3, 3))
        proj = rng.normal(size=(2, 3, 3, 3))
        for fn in (lambda t: F.leaky_relu(t, 0.01), F.sigmoid):
            err = finite_diff_check(lambda xt: (fn(xt) * Tensor(proj)).sum(), [x.copy()], rng)
            assert err < self.TOL

    def test_losses(self):
        rng = np.random.default_rng(15)
        target = (rng.random((1, 4, 4, 4)) > 0.6).astype(np.float64)
        z = rng.normal(size=(1, 4, 4, 4))
        assert finite_diff_check(lambda zt: bce_loss(zt, target), [z.copy()], rng) < self.TOL
        assert (
            finite_diff_check(lambda zt: dice_loss(F.sigmoid(zt), target), [z.copy()], rng)
            < self.TOL
        )
        assert finite_diff_check(lambda zt: dice_bce_loss(zt, target), [z.copy()], rng) < self.TOL
