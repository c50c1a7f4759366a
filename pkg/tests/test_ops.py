"""Forward-operator contracts checked against independent brute-force oracles.

Every oracle here is a direct loop transcription of the operator's
definition and never calls back into the code it checks.
"""

import numpy as np
import pytest

from gridcast.engine import (
    ShapeError,
    concat_channels,
    conv2d,
    conv_transpose2d,
    crop_to,
    group_norm,
    maxpool2,
    mse,
    pad_to_multiple,
    relu,
)


def conv2d_oracle(x, w, b, pad):
    """Six-loop cross-correlation."""
    c_out, c_in, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = x.shape[1] + 2 * pad - k + 1
    w_out = x.shape[2] + 2 * pad - k + 1
    y = np.zeros((c_out, h_out, w_out), dtype=np.float64)
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                acc = 0.0
                for c in range(c_in):
                    for a in range(k):
                        for d in range(k):
                            acc += xp[c, i + a, j + d] * w[o, c, a, d]
                y[o, i, j] = acc + b[o]
    return y


def conv_transpose2d_oracle(x, w, b):
    """Scatter form: out[o, 2h+i, 2w+j] += x[c,h,w] * w[c,o,i,j]."""
    c_in, h, wd = x.shape
    c_out = w.shape[1]
    y = np.zeros((c_out, 2 * h, 2 * wd), dtype=np.float64)
    for c in range(c_in):
        for o in range(c_out):
            for r in range(h):
                for s in range(wd):
                    for i in range(2):
                        for j in range(2):
                            y[o, 2 * r + i, 2 * s + j] += x[c, r, s] * w[c, o, i, j]
    return y + b[:, None, None]


def stride2_conv_oracle(y, w):
    """Stride-2 correlation of y (C_out,2H,2W) with w (C_in,C_out,2,2)."""
    c_in, c_out = w.shape[0], w.shape[1]
    h, wd = y.shape[1] // 2, y.shape[2] // 2
    out = np.zeros((c_in, h, wd), dtype=np.float64)
    for c in range(c_in):
        for r in range(h):
            for s in range(wd):
                acc = 0.0
                for o in range(c_out):
                    for i in range(2):
                        for j in range(2):
                            acc += y[o, 2 * r + i, 2 * s + j] * w[c, o, i, j]
                out[c, r, s] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.array([[[5.0]]])
        w = np.zeros((1, 1, 3, 3))
        w[0, 0, 1, 1] = 1.0
        y = conv2d(x, w, np.zeros(1), pad=1)
        assert np.array_equal(y, [[[5.0]]])

    def test_all_ones_kernel_2x2_input(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        w = np.ones((1, 1, 3, 3))
        y = conv2d(x, w, np.zeros(1), pad=1)
        assert np.array_equal(y, [[[10.0, 10.0], [10.0, 10.0]]])

    @pytest.mark.parametrize("pad,k", [(1, 3), (0, 3), (0, 1), (1, 1)])
    def test_matches_six_loop_oracle(self, pad, k):
        rng = np.random.default_rng(101 + pad * 10 + k)
        x = rng.standard_normal((3, 5, 7))
        w = rng.standard_normal((4, 3, k, k))
        b = rng.standard_normal(4)
        y = conv2d(x, w, b, pad=pad)
        assert np.max(np.abs(y - conv2d_oracle(x, w, b, pad))) <= 1e-12

    def test_batched_matches_per_sample(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 3, 4, 4))
        w = rng.standard_normal((5, 3, 3, 3))
        b = rng.standard_normal(5)
        y = conv2d(x, w, b, pad=1)
        for n in range(2):
            assert np.allclose(y[n], conv2d(x[n], w, b, pad=1), atol=1e-13)

    def test_preserves_spatial_shape_k3_pad1(self):
        x = np.zeros((2, 9, 13))
        y = conv2d(x, np.zeros((4, 2, 3, 3)), np.zeros(4), pad=1)
        assert y.shape == (4, 9, 13)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="channels"):
            conv2d(np.zeros((4, 8, 8)), np.zeros((2, 3, 3, 3)), np.zeros(2), pad=1)

    def test_bad_kernel_and_pad_rejected(self):
        with pytest.raises(ShapeError):
            conv2d(np.zeros((1, 8, 8)), np.zeros((1, 1, 5, 5)), np.zeros(1), pad=1)
        with pytest.raises(ShapeError):
            conv2d(np.zeros((1, 8, 8)), np.zeros((1, 1, 3, 3)), np.zeros(1), pad=2)


class TestConvTranspose2d:
    def test_single_pixel_broadcast(self):
        x = np.array([[[1.0]]])
        w = np.ones((1, 1, 2, 2))
        y = conv_transpose2d(x, w, np.zeros(1))
        assert np.array_equal(y, [[[1.0, 1.0], [1.0, 1.0]]])

    def test_constant_blocks(self):
        x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        w = np.ones((1, 1, 2, 2))
        y = conv_transpose2d(x, w, np.zeros(1))
        expected = np.kron(x[0], np.ones((2, 2)))[None]
        assert np.array_equal(y, expected)

    def test_matches_scatter_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 4, 5))
        w = rng.standard_normal((3, 2, 2, 2))
        b = rng.standard_normal(2)
        y = conv_transpose2d(x, w, b)
        assert y.shape == (2, 8, 10)
        assert np.max(np.abs(y - conv_transpose2d_oracle(x, w, b))) <= 1e-12

    def test_adjoint_of_stride2_conv(self):
        # <convT(x), y> == <x, stride2_conv(y)> with shared weights.
        rng = np.random.default_rng(12)
        for trial in range(5):
            x = rng.standard_normal((3, 4, 6))
            w = rng.standard_normal((3, 5, 2, 2))
            y = rng.standard_normal((5, 8, 12))
            lhs = float(np.sum(conv_transpose2d(x, w, np.zeros(5)) * y))
            rhs = float(np.sum(x * stride2_conv_oracle(y, w)))
            assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))

    def test_doubles_spatial_dims(self):
        y = conv_transpose2d(np.zeros((4, 3, 9)), np.zeros((4, 2, 2, 2)), np.zeros(2))
        assert y.shape == (2, 6, 18)


class TestMaxpool2:
    def test_2x2_window(self):
        y, idx = maxpool2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
        assert np.array_equal(y, [[[4.0]]])
        assert idx[0, 0, 0] == 3  # flat index of element (0, 1, 1)

    def test_tie_break_first_in_row_major_order(self):
        x = np.full((2, 4, 4), 7.0)
        y, idx = maxpool2(x)
        assert np.all(y == 7.0)
        # winner of each window is its own top-left corner
        expected = np.array([[0, 2], [8, 10]])
        assert np.array_equal(idx[0], expected)
        assert np.array_equal(idx[1], expected + 16)

    def test_matches_window_scan_oracle(self):
        rng = np.random.default_rng(21)
        x = rng.standard_normal((2, 4, 6))
        y, idx = maxpool2(x)
        assert y.shape == (2, 2, 3)
        for c in range(2):
            for i in range(2):
                for j in range(3):
                    window = x[c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                    assert y[c, i, j] == window.max()
                    assert x.reshape(-1)[idx[c, i, j]] == window.max()

    def test_odd_dims_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            maxpool2(np.zeros((1, 3, 4)))
        with pytest.raises(ShapeError, match="even"):
            maxpool2(np.zeros((1, 4, 5)))

    def test_halves_spatial_dims(self):
        y, _ = maxpool2(np.zeros((3, 8, 12)))
        assert y.shape == (3, 4, 6)


class TestGroupNorm:
    def test_constant_input_gives_zeros(self):
        x = np.full((8, 3, 3), 4.2)
        y = group_norm(x, np.ones(8), np.zeros(8), channels_per_group=8)
        assert np.max(np.abs(y)) <= 1e-6

    def test_zero_gamma_collapses_to_beta(self):
        rng = np.random.default_rng(31)
        x = rng.standard_normal((8, 4, 4))
        beta = rng.standard_normal(8)
        y = group_norm(x, np.zeros(8), beta, channels_per_group=4)
        assert np.allclose(y, np.broadcast_to(beta[:, None, None], y.shape), atol=1e-12)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(32)
        x = rng.standard_normal((8, 3, 3))
        gamma = rng.standard_normal(8)
        beta = rng.standard_normal(8)
        eps = 1e-5
        y = group_norm(x, gamma, beta, channels_per_group=8, eps=eps)
        mu = x.mean()
        var = x.var()
        expected = (x - mu) / np.sqrt(var + eps) * gamma[:, None, None] + beta[:, None, None]
        assert np.max(np.abs(y - expected)) <= 1e-12

    def test_multiple_groups_normalized_independently(self):
        rng = np.random.default_rng(33)
        x = rng.standard_normal((6, 4, 5)) * 3.0 + 1.0
        y = group_norm(x, np.ones(6), np.zeros(6), channels_per_group=2)
        for g in range(3):
            block = y[2 * g : 2 * g + 2]
            assert abs(block.mean()) <= 1e-6
            assert abs(block.var() - 1.0) <= 1e-4

    def test_indivisible_channels_rejected(self):
        with pytest.raises(ShapeError, match="divisible"):
            group_norm(np.zeros((6, 2, 2)), np.ones(6), np.zeros(6), channels_per_group=4)


class TestPointwise:
    def test_relu_basic(self):
        assert np.array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_relu_all_negative(self):
        x = -np.abs(np.random.default_rng(41).standard_normal((3, 4))) - 0.1
        assert np.array_equal(relu(x), np.zeros_like(x))

    def test_relu_masks_like_oracle(self):
        x = np.random.default_rng(42).standard_normal((2, 3, 4))
        assert np.array_equal(relu(x), x * (x > 0))

    def test_concat_channel_layout(self):
        rng = np.random.default_rng(43)
        a = rng.standard_normal((96, 4, 5))
        b = rng.standard_normal((9, 4, 5))
        y = concat_channels(a, b)
        assert y.shape == (105, 4, 5)
        for i in range(9):
            assert np.array_equal(y[96 + i], b[i])
        assert np.array_equal(y[:96], a)

    def test_concat_empty_is_identity(self):
        a = np.random.default_rng(44).standard_normal((3, 2, 2))
        y = concat_channels(a, np.zeros((0, 2, 2)))
        assert np.array_equal(y, a)

    def test_concat_spatial_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="spatial"):
            concat_channels(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


class TestMse:
    def test_equal_inputs_zero(self):
        x = np.random.default_rng(51).standard_normal((4, 5))
        assert mse(x, x) == 0.0

    def test_single_differing_element(self):
        pred = np.zeros((3, 4, 2))
        target = np.zeros((3, 4, 2))
        pred[1, 2, 0] = 2.0
        assert mse(pred, target) == pytest.approx(4.0 / 24.0, abs=1e-15)

    def test_matches_accumulation_oracle(self):
        rng = np.random.default_rng(52)
        pred = rng.standard_normal((2, 3, 4))
        target = rng.standard_normal((2, 3, 4))
        acc = 0.0
        for i in range(2):
            for j in range(3):
                for k in range(4):
                    acc += (pred[i, j, k] - target[i, j, k]) ** 2
        assert mse(pred, target) == pytest.approx(acc / 24.0, rel=1e-12)

    def test_symmetric_and_nonnegative(self):
        rng = np.random.default_rng(53)
        for _ in range(10):
            a = rng.standard_normal((3, 3))
            b = rng.standard_normal((3, 3))
            assert mse(a, b) == pytest.approx(mse(b, a), rel=1e-14)
            assert mse(a, b) >= 0.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            mse(np.zeros((2, 2)), np.zeros((2, 3)))


class TestPadToMultiple:
    def test_already_multiple_is_identity(self):
        x = np.random.default_rng(61).standard_normal((2, 64, 64))
        y, rec = pad_to_multiple(x, 16)
        assert y.shape == (2, 64, 64)
        assert np.array_equal(crop_to(y, rec), x)

    def test_495_to_496(self):
        x = np.zeros((1, 495, 436))
        y, _ = pad_to_multiple(x, 16)
        assert y.shape == (1, 496, 448)

    def test_pad_crop_round_trip(self):
        rng = np.random.default_rng(62)
        for h, w, m in [(49, 43, 16), (5, 5, 2), (7, 9, 4), (1, 1, 8)]:
            x = rng.standard_normal((3, h, w))
            y, rec = pad_to_multiple(x, m)
            assert y.shape[1] % m == 0 and y.shape[2] % m == 0
            assert np.array_equal(crop_to(y, rec), x)
            # padding is zeros on bottom/right
            assert np.all(y[:, h:, :] == 0) and np.all(y[:, :, w:] == 0)
