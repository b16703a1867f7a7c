import numpy as np
import pytest

from prkit import numerics as nm
from prkit.errors import ShapeError


def rand(shape, seed, lo=-1.0, hi=1.0):
    return np.random.default_rng(seed).uniform(lo, hi, shape)


class TestConv2d:
    def test_1x1_scaling_kernel(self):
        x = nm.Tensor(rand((2, 4, 5), 0))
        k = nm.Tensor(np.full((2, 2, 1, 1), 0.0))
        k.data[0, 0, 0, 0] = 2.0
        k.data[1, 1, 0, 0] = 2.0
        out = nm.conv2d(x, k, 1, 0)
        np.testing.assert_allclose(out.data, 2.0 * x.data)

    def test_identity_delta_kernel(self):
        x = nm.Tensor(rand((3, 6, 6), 1))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        out = nm.conv2d(x, nm.Tensor(k), 1, 1)
        np.testing.assert_array_equal(out.data, x.data)

    def test_receptive_field_sum_is_nine(self):
        out = nm.conv2d(nm.Tensor(np.ones((1, 3, 3))), nm.Tensor(np.ones((1, 1, 3, 3))), 1, 0)
        assert out.data.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 9.0

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            nm.conv2d(nm.Tensor(np.ones((2, 4, 4))), nm.Tensor(np.ones((1, 3, 3, 3))), 1, 1)

    def test_non_integer_output_rejected(self):
        # (4 + 0 - 3) = 1 does not divide by stride 2
        with pytest.raises(ShapeError):
            nm.conv2d(nm.Tensor(np.ones((1, 4, 4))), nm.Tensor(np.ones((1, 1, 3, 3))), 2, 0)

    def test_strided_output_shape(self):
        out = nm.conv2d(nm.Tensor(np.ones((1, 5, 7))), nm.Tensor(np.ones((2, 1, 3, 3))), 2, 0)
        assert out.data.shape == (2, 2, 3)


class TestBilinearResample:
    def test_full_roi_identity(self):
        x = nm.Tensor(rand((3, 5, 8), 2))
        out = nm.bilinear_resample(x, nm.FULL_ROI, 5, 8)
        assert np.array_equal(out.data, x.data)

    def test_constant_preserved(self):
        x = nm.Tensor(np.full((2, 6, 6), 3.25))
        out = nm.bilinear_resample(x, (0.13, 0.07, 0.8, 0.6), 9, 4)
        np.testing.assert_allclose(out.data, 3.25)

    def test_center_of_2x2_upsample(self):
        x = nm.Tensor(np.array([[[0.0, 1.0], [2.0, 3.0]]]))
        out = nm.bilinear_resample(x, nm.FULL_ROI, 3, 3)
        assert out.data[0, 1, 1] == pytest.approx(1.5)

    def test_pixel_aligned_crop_is_exact_subarray(self):
        x = nm.Tensor(rand((2, 12, 9), 3))
        # rows 3..8, cols 2..7 of a 12x9 grid
        roi = (3 / 12, 2 / 9, 5 / 12, 5 / 9)
        out = nm.bilinear_resample(x, roi, 5, 5)
        assert np.array_equal(out.data, x.data[:, 3:8, 2:7])

    def test_roi_outside_unit_square_rejected(self):
        x = nm.Tensor(np.ones((1, 4, 4)))
        with pytest.raises(ShapeError):
            nm.bilinear_resample(x, (0.5, 0.5, 0.6, 0.2), 2, 2)


class TestConcat:
    def test_shapes(self):
        out = nm.concat_channels(nm.Tensor(np.ones((2, 4, 4))), nm.Tensor(np.ones((3, 4, 4))))
        assert out.data.shape == (5, 4, 4)

    def test_zero_channel_neutral(self):
        x = nm.Tensor(rand((2, 3, 3), 4))
        out = nm.concat_channels(x, nm.Tensor(np.zeros((0, 3, 3))))
        np.testing.assert_array_equal(out.data, x.data)

    def test_spatial_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            nm.concat_channels(nm.Tensor(np.ones((1, 4, 4))), nm.Tensor(np.ones((1, 5, 4))))

    def test_gradient_of_sum_splits_to_ones(self):
        a = nm.Tensor(rand((2, 3, 3), 5), requires_grad=True)
        b = nm.Tensor(rand((1, 3, 3), 6), requires_grad=True)
        nm.backward(nm.sum_all(nm.concat_channels(a, b)))
        np.testing.assert_array_equal(a.grad, np.ones_like(a.data))
        np.testing.assert_array_equal(b.grad, np.ones_like(b.data))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = nm.Tensor(rand((7,), 7), requires_grad=True)
        nm.backward(nm.sum_all(x))
        np.testing.assert_array_equal(x.grad, np.ones(7))

    def test_mean_square_hand_gradient(self):
        x = nm.Tensor(np.array([1.0, 2.0]), requires_grad=True)
        nm.backward(nm.mean_all(nm.square(x)))
        np.testing.assert_allclose(x.grad, [1.0, 2.0])

    def test_non_scalar_loss_rejected(self):
        x = nm.Tensor(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ShapeError):
            nm.backward(nm.square(x))

    def test_three_layer_conv_stack_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = nm.Tensor(rng.uniform(-1, 1, (2, 6, 6)), requires_grad=True)
        k1 = nm.Tensor(rng.uniform(-1, 1, (3, 2, 3, 3)) * 0.5, requires_grad=True)
        k2 = nm.Tensor(rng.uniform(-1, 1, (3, 3, 3, 3)) * 0.5, requires_grad=True)
        k3 = nm.Tensor(rng.uniform(-1, 1, (1, 3, 1, 1)), requires_grad=True)

        def f():
            h1 = nm.leaky_relu(nm.conv2d(x, k1, 1, 1))
            h2 = nm.leaky_relu(nm.conv2d(h1, k2, 1, 1))
            return nm.mean_all(nm.square(nm.conv2d(h2, k3, 1, 0)))

        assert nm.gradcheck(f, [x, k1, k2, k3]) <= 1e-5

    def test_backward_linearity(self):
        rng = np.random.default_rng(12)
        base = rng.uniform(-1, 1, (3, 4))

        def grad_of(a, b):
            x = nm.Tensor(base.copy(), requires_grad=True)
            l1 = nm.mean_all(nm.square(x))
            l2 = nm.sum_all(nm.absolute(x))
            nm.backward(nm.add(nm.mul(l1, a), nm.mul(l2, b)))
            return x.grad

        g_combined = grad_of(2.5, -0.75)
        g1 = grad_of(1.0, 0.0)
        g2 = grad_of(0.0, 1.0)
        np.testing.assert_allclose(g_combined, 2.5 * g1 - 0.75 * g2, atol=1e-12)

    def test_determinism_bit_identical(self):
        def run():
            rng = np.random.default_rng(21)
            x = nm.Tensor(rng.uniform(-1, 1, (2, 8, 8)), requires_grad=True)
            k = nm.Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)), requires_grad=True)
            y = nm.softplus(nm.conv2d(x, k, 1, 1))
            loss = nm.mean_all(nm.square(y))
            nm.backward(loss)
            return loss.data.copy(), x.grad.copy(), k.grad.copy()

        a = run()
        b = run()
        for u, v in zip(a, b):
            assert np.array_equal(u, v)


OP_CASES = {
    "add": lambda t: nm.add(t[0], t[1]),
    "sub": lambda t: nm.sub(t[0], t[1]),
    "mul": lambda t: nm.mul(t[0], t[1]),
    "div": lambda t: nm.div(t[0], nm.add(nm.square(t[1]), 0.5)),
    "square": lambda t: nm.square(t[0]),
    "log": lambda t: nm.log(nm.add(nm.square(t[0]), 0.2)),
    "exp": lambda t: nm.exp(t[0]),
    "sqrt": lambda t: nm.sqrt(nm.add(nm.square(t[0]), 0.2)),
    "abs": lambda t: nm.absolute(t[0]),
    "leaky_relu": lambda t: nm.leaky_relu(t[0], 0.01),
    "softplus": lambda t: nm.softplus(t[0]),
    "clamp_min": lambda t: nm.clamp_min(t[0], -0.4),
    "gather": lambda t: nm.gather_flat(t[0], [0, 3, 3, 7]),
    "reshape": lambda t: nm.reshape(t[0], (3, 4)),
    "concat": lambda t: nm.concat_channels(nm.reshape(t[0], (3, 2, 2)),
                                           nm.reshape(t[1], (3, 2, 2))),
    "bias": lambda t: nm.add_channel_bias(nm.reshape(t[0], (3, 2, 2)),
                                          nm.gather_flat(t[1], [0, 1, 2])),
    "resample": lambda t: nm.bilinear_resample(nm.reshape(t[0], (1, 3, 4)),
                                               (0.1, 0.05, 0.8, 0.9), 5, 3),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_elementwise_op_gradients(name):
    # random inputs in [-1, 1]; domain-restricted ops shift inside their builder
    op = OP_CASES[name]
    worst = 0.0
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)
        leaves = [nm.Tensor(rng.uniform(-1, 1, (12,)), requires_grad=True) for _ in range(2)]
        worst = max(worst, nm.gradcheck(lambda: nm.mean_all(nm.square(op(leaves))), leaves))
    assert worst <= 1e-5


def test_conv_and_resample_gradients_wrt_both_args():
    worst = 0.0
    for seed in range(3):
        rng = np.random.default_rng(200 + seed)
        x = nm.Tensor(rng.uniform(-1, 1, (2, 5, 5)), requires_grad=True)
        k = nm.Tensor(rng.uniform(-1, 1, (2, 2, 3, 3)), requires_grad=True)

        def f():
            y = nm.conv2d(x, k, 2, 1)
            y = nm.bilinear_resample(y, (0.0, 0.1, 0.9, 0.8), 4, 6)
            return nm.mean_all(nm.square(y))

        worst = max(worst, nm.gradcheck(f, [x, k]))
    assert worst <= 1e-5


def test_forward_values_finite_on_finite_inputs():
    rng = np.random.default_rng(31)
    x = nm.Tensor(rng.uniform(-50, 50, (2, 6, 6)))
    for t in (nm.softplus(x), nm.leaky_relu(x), nm.absolute(x),
              nm.conv2d(x, nm.Tensor(rng.uniform(-1, 1, (2, 2, 3, 3))), 1, 1)):
        assert np.all(np.isfinite(t.data))
