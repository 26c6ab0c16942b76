"""Kernel lanes: brute-force conv oracle and compiled/numpy parity."""

import numpy as np
import pytest

from worldloop import kernels
from worldloop.kernels import numpy_ref


def conv_brute(x, w, b, stride, pad):
    """Direct quadruple-loop convolution, the independent oracle."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, f, ho, wo))
    for bi in range(n):
        for fi in range(f):
            for oy in range(ho):
                for ox in range(wo):
                    patch = xp[bi, :, oy * stride : oy * stride + kh, ox * stride : ox * stride + kw]
                    out[bi, fi, oy, ox] = np.sum(patch * w[fi]) + (b[fi] if b is not None else 0.0)
    return out


@pytest.mark.parametrize("stride,pad,h", [(1, 0, 6), (1, 1, 6), (2, 1, 8), (2, 0, 9), (1, 2, 5)])
def test_conv2d_matches_brute_force(stride, pad, h):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((2, 3, h, h))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    got = kernels.conv2d(x, w, b, stride, pad)
    ref = conv_brute(x, w, b, stride, pad)
    assert got.shape == ref.shape
    assert np.abs(got - ref).max() < 1e-12


def test_lanes_bit_identical():
    if kernels.BACKEND != "compiled":
        pytest.skip("native extension not built")
    rng = np.random.default_rng(0)
    for stride, pad in [(1, 1), (2, 1), (1, 0)]:
        x = rng.standard_normal((3, 5, 10, 10))
        cols_c = kernels._impl.im2col(x, 3, 3, stride, pad)
        cols_n = numpy_ref.im2col(x, 3, 3, stride, pad)
        assert np.array_equal(cols_c, cols_n)
        g = np.ascontiguousarray(rng.standard_normal(cols_c.shape))
        back_c = kernels._impl.col2im(g, 3, 3, stride, pad, 10, 10)
        back_n = numpy_ref.col2im(g, 3, 3, stride, pad, 10, 10)
        assert np.array_equal(back_c, back_n)


def test_conv2d_backward_matches_fd():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    gy = rng.standard_normal((1, 3, 5, 5))
    gx, gw, gb = kernels.conv2d_backward(x, w, gy, 1, 1)
    # numerical check of a few coordinates through the scalar <gy, conv(x, w)>
    h = 1e-6

    def obj(xx, ww):
        return float((gy * kernels.conv2d(xx, ww, None, 1, 1)).sum())

    for idx in [(0, 0, 0, 0), (0, 1, 2, 3), (0, 1, 4, 4)]:
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        fd = (obj(xp, w) - obj(xm, w)) / (2 * h)
        assert abs(fd - gx[idx]) < 1e-5
    for idx in [(0, 0, 0, 0), (2, 1, 2, 2)]:
        wp = w.copy()
        wp[idx] += h
        wm = w.copy()
        wm[idx] -= h
        fd = (obj(x, wp) - obj(x, wm)) / (2 * h)
        assert abs(fd - gw[idx]) < 1e-5
    assert np.allclose(gb, gy.sum(axis=(0, 2, 3)))
