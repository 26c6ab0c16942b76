"""Kernel backend selection.

The conv patch gather/scatter loops dominate diffusion-model runtime, so
they exist twice: a Cython extension (``_native``) and a pure-numpy
reference (``numpy_ref``). The compiled lane is picked at import when
available; ``WORLDLOOP_KERNELS=numpy|compiled|auto`` overrides. Both lanes
are bit-identical in float64 (see benchmarks/bench_kernels.py for the
speed comparison), so the choice never affects results, only wall time.

The matrix products around these kernels go through numpy's BLAS in both
lanes.
"""

import os

import numpy as np

from . import numpy_ref

_choice = os.environ.get("WORLDLOOP_KERNELS", "auto").lower()

if _choice == "numpy":
    _impl = numpy_ref
    BACKEND = "numpy"
elif _choice in ("auto", "compiled"):
    try:
        from . import _native as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        if _choice == "compiled":
            raise ImportError(
                "WORLDLOOP_KERNELS=compiled but the native extension is not built; "
                "run `pip install -e . --no-build-isolation`"
            )
        _impl = numpy_ref
        BACKEND = "numpy"
else:
    raise ValueError(f"WORLDLOOP_KERNELS must be auto, compiled or numpy, got {_choice!r}")

conv_out_size = numpy_ref.conv_out_size


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, kh, kw, stride, pad, h, w):
    return _impl.col2im(cols, kh, kw, stride, pad, h, w)


def conv2d(x, w, b, stride, pad):
    """Cross-correlation of (N,C,H,W) with (F,C,kh,kw) plus bias (F,)."""
    n, _, h, wd = x.shape
    f, _, kh, kw = w.shape
    ho = conv_out_size(h, kh, stride, pad)
    wo = conv_out_size(wd, kw, stride, pad)
    cols = im2col(x, kh, kw, stride, pad)
    y = cols @ w.reshape(f, -1).T
    if b is not None:
        y += b
    return y.transpose(0, 2, 1).reshape(n, f, ho, wo)


def conv2d_backward(x, w, gy, stride, pad, need_gx=True):
    """Gradients of conv2d. Recomputes im2col instead of retaining it."""
    n, _, h, wd = x.shape
    f = w.shape[0]
    kh, kw = w.shape[2], w.shape[3]
    gy_mat = gy.reshape(n, f, -1).transpose(0, 2, 1)  # (N, Ho*Wo, F)
    cols = im2col(x, kh, kw, stride, pad)
    gw = np.tensordot(gy_mat, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    gb = gy.sum(axis=(0, 2, 3))
    gx = None
    if need_gx:
        gcols = gy_mat @ w.reshape(f, -1)
        gx = col2im(np.ascontiguousarray(gcols), kh, kw, stride, pad, h, wd)
    return gx, gw, gb
