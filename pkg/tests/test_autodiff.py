import numpy as np
import pytest

from stereorefine.autodiff import GradientTape, Tensor, grad_check


def brute_conv(x, w, b=None, stride=1, pad=0):
    """Direct-summation convolution oracle."""
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    y = np.zeros((B, F, Ho, Wo))
    for bb in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[bb, :, i * stride:i * stride + kh,
                               j * stride:j * stride + kw]
                    y[bb, f, i, j] = (patch * w[f]).sum()
                    if b is not None:
                        y[bb, f, i, j] += b[f]
    return y


class TestForwardOps:
    def test_conv_1x1_kernel_scales(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        w = Tensor(np.full((1, 1, 1, 1), 2.0))
        y = GradientTape().conv2d(x, w)
        np.testing.assert_array_equal(y.data[0, 0], [[2.0, 4.0], [6.0, 8.0]])

    def test_conv_box_kernel_against_summation(self):
        x = Tensor(np.ones((1, 1, 3, 3)))
        w = Tensor(np.ones((1, 1, 3, 3)))
        y = GradientTape().conv2d(x, w, stride=1, padding=1).data[0, 0]
        np.testing.assert_array_equal(
            y, [[4.0, 6.0, 4.0], [6.0, 9.0, 6.0], [4.0, 6.0, 4.0]])

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 0)])
    def test_conv_random_against_oracle(self, stride, pad):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((2, 3, 8, 9))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        y = GradientTape().conv2d(Tensor(x), Tensor(w), Tensor(b),
                                  stride=stride, padding=pad)
        np.testing.assert_allclose(y.data, brute_conv(x, w, b, stride, pad),
                                   rtol=1e-12, atol=1e-12)

    def test_mul_by_ones_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 2, 3, 3))
        y = GradientTape().mul(Tensor(x), Tensor(np.ones_like(x)))
        np.testing.assert_array_equal(y.data, x)

    def test_upsample_nearest(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, None])
        y = GradientTape().upsample_nearest2(x)
        np.testing.assert_array_equal(
            y.data[0, 0],
            [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_concat_channels(self):
        a = Tensor(np.zeros((1, 2, 2, 2)))
        b = Tensor(np.ones((1, 3, 2, 2)))
        y = GradientTape().concat_channels([a, b])
        assert y.data.shape == (1, 5, 2, 2)
        assert (y.data[:, :2] == 0).all() and (y.data[:, 2:] == 1).all()

    def test_leaky_relu(self):
        x = Tensor(np.array([-2.0, 0.0, 3.0]))
        y = GradientTape().leaky_relu(x, 0.1)
        np.testing.assert_allclose(y.data, [-0.2, 0.0, 3.0])

    def test_masked_mean_abs(self):
        x = Tensor(np.array([1.0, -2.0, 100.0]))
        mask = np.array([True, True, False])
        y = GradientTape().mean_abs(x, mask)
        assert float(y.data) == 1.5

    def test_mean_abs_empty_mask_is_zero(self):
        tape = GradientTape()
        x = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        y = tape.mean_abs(x, np.zeros(2, bool))
        assert float(y.data) == 0.0
        assert (tape.gradients(y, [x])[0] == 0.0).all()

    def test_shape_mismatch_is_fault(self):
        tape = GradientTape()
        with pytest.raises(ValueError):
            tape.add(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))
        with pytest.raises(ValueError):
            tape.conv2d(Tensor(np.zeros((1, 2, 4, 4))),
                        Tensor(np.zeros((1, 3, 3, 3))))

    def test_rank_limit(self):
        with pytest.raises(ValueError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_nonfinite_result_is_fault(self):
        tape = GradientTape()
        big = Tensor(np.array([1e308]))
        with pytest.raises(FloatingPointError):
            tape.mul(big, big)


class TestBackward:
    def test_mean_of_squares_gradient(self):
        # mean |x * x| has gradient 2 x / n away from zero
        rng = np.random.default_rng(3)
        xv = rng.standard_normal(8) + 3.0
        x = Tensor(xv, requires_grad=True)
        tape = GradientTape()
        loss = tape.mean_abs(tape.mul(x, x))
        (g,) = tape.gradients(loss, [x])
        np.testing.assert_allclose(g, 2.0 * xv / 8.0, rtol=1e-12)

    def test_leaky_relu_negative_branch(self):
        x = Tensor(np.array([-5.0]), requires_grad=True)
        tape = GradientTape()
        loss = tape.mean_abs(tape.leaky_relu(x, 0.1))
        (g,) = tape.gradients(loss, [x])
        # d|y|/dx = sign(y) * 0.1 = -0.1
        np.testing.assert_allclose(g, [-0.1], rtol=1e-12)

    def test_off_path_parameter_gets_zeros(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        unused = Tensor(np.arange(4.0), requires_grad=True)
        tape = GradientTape()
        loss = tape.mean_abs(x)
        gx, gu = tape.gradients(loss, [x, unused])
        assert gx[0] == 1.0
        assert gu.shape == (4,) and (gu == 0.0).all()

    def test_non_scalar_loss_is_fault(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        tape = GradientTape()
        y = tape.add(x, x)
        with pytest.raises(ValueError):
            tape.gradients(y, [x])

    def test_fanout_accumulates(self):
        # x used twice: loss = mean|x + x| -> grad 2 * sign
        x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
        tape = GradientTape()
        loss = tape.mean_abs(tape.add(x, x))
        (g,) = tape.gradients(loss, [x])
        np.testing.assert_allclose(g, [1.0, -1.0])


def _random_graph(seed):
    """Small graph exercising every primitive; returns (fn, params, kinks).

    kinks collects the values whose sign would flip under perturbation
    (leaky-relu pre-activations, the mean_abs integrand over its mask);
    callers reject seeds that put any of them too close to 0.
    """
    rng = np.random.default_rng(seed)
    h = w = 4
    c = 2
    x0 = Tensor(rng.standard_normal((1, c, h, w)))
    x1 = Tensor(rng.standard_normal((1, 1, h, w)))
    p1 = Tensor(rng.standard_normal((1, c, h, w)) * 0.5, requires_grad=True)
    p2 = Tensor(rng.standard_normal((1, c, h, w)) * 0.5 + 1.5, requires_grad=True)
    w1 = Tensor(rng.standard_normal((c, c, 3, 3)) * 0.4, requires_grad=True)
    b1 = Tensor(rng.standard_normal(c) * 0.2, requires_grad=True)
    w2 = Tensor(rng.standard_normal((1, 2 * c, 3, 3)) * 0.4, requires_grad=True)
    b2 = Tensor(rng.standard_normal(1) * 0.2, requires_grad=True)
    alpha = float(rng.uniform(0.5, 2.0))
    mask = rng.random((1, 1, h, w)) < 0.8
    params = [p1, p2, w1, b1, w2, b2]
    kinks = []

    def fn(tape):
        kinks.clear()
        a = tape.add(x0, p1)
        b = tape.mul(a, p2)
        pre1 = tape.conv2d(b, w1, b1, stride=2, padding=1)
        kinks.append(pre1.data)
        e1 = tape.leaky_relu(pre1, 0.1)
        up = tape.upsample_nearest2(e1)
        cat = tape.concat_channels([up, x0])
        pre2 = tape.conv2d(cat, w2, b2, stride=1, padding=1)
        kinks.append(pre2.data)
        e2 = tape.leaky_relu(pre2, 0.1)
        diff = tape.sub(e2, x1)
        scaled = tape.scalar_mul(diff, alpha)
        kinks.append(scaled.data[mask])
        return tape.mean_abs(scaled, mask)

    return fn, params, kinks


def _margin(kinks):
    return min(np.abs(k).min() for k in kinks)


def test_grad_check_randomized_graphs_every_primitive():
    # >= 100 accepted graphs; seeds whose values sit on a relu/abs kink are
    # nudged away by reseeding, the documented non-smooth exclusion
    accepted = 0
    worst = 0.0
    seed = 0
    while accepted < 100:
        seed += 1
        assert seed < 3000, "too many rejected seeds"
        fn, params, kinks = _random_graph(seed)
        fn(GradientTape())
        if _margin(kinks) < 4e-2:
            continue
        worst = max(worst, grad_check(fn, params, h=1e-3))
        accepted += 1
    assert worst < 1e-4, f"worst relative gradient error {worst:.3e}"


def test_grad_check_two_layer_conv_net():
    # fixed seed with compfortable kink margins, stated step size h=1e-3
    for seed in range(1, 200):
        fn, params, kinks = _random_graph(seed)
        fn(GradientTape())
        if _margin(kinks) > 5e-2:
            break
    assert grad_check(fn, params, h=1e-3) < 1e-4


def test_grad_check_linear_map_exact():
    rng = np.random.default_rng(9)
    xv = rng.standard_normal((1, 1, 4, 4)) + 2.0
    x = Tensor(xv)
    w = Tensor(rng.standard_normal((1, 1, 1, 1)), requires_grad=True)

    def fn(tape):
        return tape.mean_abs(tape.conv2d(x, w))

    assert grad_check(fn, [w], h=1e-3) < 1e-10


def test_backward_linearity():
    fn, params, _ = _random_graph(42)
    tape1 = GradientTape()
    g1 = tape1.gradients(fn(tape1), params)
    for a in (0.25, 3.0, -7.5):
        tape2 = GradientTape()
        loss2 = tape2.scalar_mul(fn(tape2), a)
        g2 = tape2.gradients(loss2, params)
        for u, v in zip(g1, g2):
            np.testing.assert_allclose(v, a * u, rtol=1e-12, atol=1e-12)


def test_forward_backward_determinism():
    def run():
        fn, params, _ = _random_graph(7)
        tape = GradientTape()
        loss = fn(tape)
        return float(loss.data), tape.gradients(loss, params)

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    for a, b in zip(g1, g2):
        np.testing.assert_array_equal(a, b)


def test_grad_check_rejects_bad_h():
    fn, params, _ = _random_graph(1)
    with pytest.raises(ValueError):
        grad_check(fn, params, h=0.0)
