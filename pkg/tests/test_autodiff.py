"""Backward-pass correctness: tape mechanics plus finite-difference checks
for every differentiable primitive."""

import numpy as np
import pytest

from favae.gradcheck import check_gradients
from favae.tensor import (
    BatchNormState,
    RngStream,
    Tape,
    Tensor,
    abs_,
    add,
    affine,
    backward,
    batch_norm,
    clip,
    exp,
    mul,
    relu,
    reparameterize,
    scale,
    square,
    sub,
    sum_all,
    time_conv,
    time_deconv,
)


def p(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


class TestTapeMechanics:
    def test_sum_gradient_is_ones(self):
        x = p(np.arange(6.0).reshape(2, 3))
        with Tape() as tape:
            loss = sum_all(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones((2, 3)))

    def test_fanout_accumulates(self):
        x = p([1.0, 2.0])
        with Tape() as tape:
            loss = sum_all(add(x, x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_raises(self):
        x = p([1.0, 2.0])
        with Tape() as tape:
            y = add(x, x)
        with pytest.raises(ValueError, match="scalar"):
            backward(y, tape)

    def test_no_tape_records_nothing(self):
        x = p([1.0])
        tape = Tape()
        add(x, x)  # outside the context: plain evaluation
        assert len(tape) == 0

    def test_untracked_constants_get_no_grad(self):
        x = p([1.0, 2.0])
        c = Tensor(np.array([3.0, 4.0]))
        with Tape() as tape:
            loss = sum_all(mul(x, c))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [3.0, 4.0])
        assert c.grad is None

    def test_relu_masks_gradient(self):
        x = p([-1.0, 0.0, 2.0])
        with Tape() as tape:
            loss = sum_all(relu(x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def _fd_ok(loss_fn, params, **kw):
    report = check_gradients(loss_fn, params, **kw)
    assert report.ok(1e-4), f"worst: {report.worst}, skipped {report.n_skipped}"
    return report


class TestFiniteDifferences:
    def test_elementwise_chain(self):
        rng = np.random.default_rng(0)
        x = p(rng.standard_normal((3, 4)) + 2.0)
        y = p(rng.standard_normal((3, 4)))
        r = Tensor(rng.standard_normal((3, 4)))

        def loss():
            h = mul(square(x), exp(scale(y, 0.5)))
            h = add(h, abs_(sub(x, y)))
            return sum_all(mul(h, r))

        _fd_ok(loss, {"x": x, "y": y})

    def test_broadcast_mul(self):
        rng = np.random.default_rng(1)
        gate = p(rng.standard_normal((3, 5)))
        x = p(rng.standard_normal((2, 3, 5)))

        def loss():
            return sum_all(square(mul(x, gate)))

        _fd_ok(loss, {"gate": gate, "x": x})

    def test_clip_interior_and_exterior(self):
        x = p([-3.0, -0.5, 0.5, 3.0])
        r = Tensor(np.array([1.0, 2.0, 3.0, 4.0]))

        def loss():
            return sum_all(mul(clip(x, -1.0, 1.0), r))

        _fd_ok(loss, {"x": x})
        np.testing.assert_array_equal(x.grad, [0.0, 2.0, 3.0, 0.0])

    def test_affine(self):
        rng = np.random.default_rng(2)
        x = p(rng.standard_normal((4, 3)))
        w = p(rng.standard_normal((5, 3)))
        b = p(rng.standard_normal(5))
        r = Tensor(rng.standard_normal((4, 5)))

        def loss():
            return sum_all(mul(affine(x, w, b), r))

        _fd_ok(loss, {"x": x, "w": w, "b": b})

    @pytest.mark.parametrize("stride", [1, 2])
    def test_time_conv(self, stride):
        rng = np.random.default_rng(3)
        x = p(rng.standard_normal((2, 3, 7)))
        w = p(rng.standard_normal((4, 3, 3)))
        b = p(rng.standard_normal(4))
        t_out = -(-7 // stride)
        r = Tensor(rng.standard_normal((2, 4, t_out)))

        def loss():
            return sum_all(mul(time_conv(x, w, b, stride=stride), r))

        _fd_ok(loss, {"x": x, "w": w, "b": b})

    @pytest.mark.parametrize("stride,target", [(1, 7), (2, 13), (2, 14)])
    def test_time_deconv(self, stride, target):
        rng = np.random.default_rng(4)
        x = p(rng.standard_normal((2, 4, 7)))
        w = p(rng.standard_normal((4, 3, 3)))
        b = p(rng.standard_normal(3))
        r = Tensor(rng.standard_normal((2, 3, target)))

        def loss():
            return sum_all(mul(time_deconv(x, w, b, stride=stride, target_t=target), r))

        _fd_ok(loss, {"x": x, "w": w, "b": b})

    @pytest.mark.parametrize("train", [True, False])
    def test_batch_norm(self, train):
        rng = np.random.default_rng(5)
        x = p(rng.standard_normal((4, 3, 6)))
        g = p(rng.standard_normal(3) + 1.5)
        s = p(rng.standard_normal(3))
        state = BatchNormState(3, dtype=np.float64)
        state.running_mean = rng.standard_normal(3)
        state.running_var = rng.random(3) + 0.5
        r = Tensor(rng.standard_normal((4, 3, 6)))

        def loss():
            y = batch_norm(x, g, s, state, train=train, update_running=False)
            return sum_all(mul(y, r))

        _fd_ok(loss, {"x": x, "gamma": g, "shift": s})

    def test_reparameterize(self):
        rng = np.random.default_rng(6)
        mu = p(rng.standard_normal((3, 4)))
        ls = p(rng.standard_normal((3, 4)) * 0.5)
        r = Tensor(rng.standard_normal((3, 4)))

        def loss():
            z = reparameterize(mu, ls, RngStream(99))
            return sum_all(mul(z, r))

        _fd_ok(loss, {"mu": mu, "log_sigma": ls})

    def test_conv_bn_relu_affine_stack(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((2, 2, 8)))
        w1 = p(rng.standard_normal((4, 2, 3)) * 0.7)
        b1 = p(rng.standard_normal(4) * 0.1)
        g = p(np.ones(4))
        s = p(np.zeros(4))
        w2 = p(rng.standard_normal((3, 16)) * 0.5)
        b2 = p(np.zeros(3))
        state = BatchNormState(4, dtype=np.float64)
        r = Tensor(rng.standard_normal((2, 3)))

        def loss():
            h = time_conv(x, w1, b1, stride=2)
            h = relu(batch_norm(h, g, s, state, train=True, update_running=False))
            from favae.tensor import reshape
            flat = reshape(h, (2, 16))
            return sum_all(mul(affine(flat, w2, b2), r))

        report = _fd_ok(loss, {"w1": w1, "b1": b1, "gamma": g, "shift": s,
                               "w2": w2, "b2": b2})
        assert report.n_checked > 20


class TestDeterminism:
    def test_forward_backward_bit_identical(self):
        def run():
            rng = RngStream(11)
            x = Tensor(rng.standard_normal((2, 3, 10)))
            w = Tensor(rng.standard_normal((4, 3, 3)), requires_grad=True)
            b = Tensor(np.zeros(4), requires_grad=True)
            with Tape() as tape:
                h = relu(time_conv(x, w, b, stride=2))
                z = reparameterize(h, Tensor(np.zeros(h.shape)), RngStream(12))
                loss = sum_all(square(z))
            backward(loss, tape)
            return loss.data.copy(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1.tobytes() == l2.tobytes()
        assert g1.tobytes() == g2.tobytes()
