"""Pure-numpy kernel lane.

Same contracts as the compiled lane in ``_native.pyx``. col2im accumulates
in ascending (ki, kj) order, matching the compiled lane exactly, so both
lanes produce bit-identical float64 results.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def conv_out_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Gather conv patches: (N,C,H,W) -> (N, Ho*Wo, C*kh*kw)."""
    n, c, h, w = x.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    sn, sc, sh, sw = xp.strides
    win = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    return np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(n, ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, kh: int, kw: int, stride: int, pad: int, h: int, w: int) -> np.ndarray:
    """Scatter-add conv patches back: (N, Ho*Wo, C*kh*kw) -> (N,C,H,W)."""
    n, p, k = cols.shape
    c = k // (kh * kw)
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(w, kw, stride, pad)
    cols6 = cols.reshape(n, ho, wo, c, kh, kw)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + stride * ho : stride, kj : kj + stride * wo : stride] += (
                cols6[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            )
    if pad:
        out = np.ascontiguousarray(out[:, :, pad : pad + h, pad : pad + w])
    return out
