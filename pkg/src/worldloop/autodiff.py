"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and records the op that produced it.
``backward()`` on a scalar walks the recorded graph in reverse topological
order and accumulates d(loss)/d(leaf) into every ``requires_grad`` tensor.
Gradient accumulation is additive: calling backward twice without
``zero_grad`` sums both passes.

Everything is float64 and deterministic: equal inputs and seeds give
bit-identical results in single-threaded mode. There is no shared mutable
global state apart from per-thread mode flags, so independent graphs can
run on separate threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from . import WorldloopError, kernels


class ShapeError(WorldloopError):
    """Operand shapes do not conform for the requested op."""


class NonFiniteError(WorldloopError):
    """An op produced NaN or Inf, which is an error state."""


class MissingGradError(WorldloopError):
    """A parameter update was requested but no gradient is populated."""


class _Mode(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.finite_checks = True


_mode = _Mode()


class no_grad:
    """Context manager: ops inside do not record the graph."""

    def __enter__(self):
        self._saved = _mode.grad_enabled
        _mode.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _mode.grad_enabled = self._saved
        return False


class finite_checks:
    """Context manager toggling per-op NaN/Inf checking (default on)."""

    def __init__(self, enabled: bool):
        self._enabled = enabled

    def __enter__(self):
        self._saved = _mode.finite_checks
        _mode.finite_checks = self._enabled
        return self

    def __exit__(self, *exc):
        _mode.finite_checks = self._saved
        return False


def _as_array(x) -> np.ndarray:
    if isinstance(x, np.ndarray):
        return x.astype(np.float64, copy=False)
    return np.asarray(x, dtype=np.float64)


class _GradStore:
    """Gradient buffers during one backward pass.

    Arrays handed over by op backwards are borrowed read-only; they are
    only promoted to owned (freshly allocated) buffers when a second
    contribution arrives. This avoids copying every gradient while staying
    safe when one op passes the same array to several parents.
    """

    def __init__(self):
        self._bufs: dict[int, np.ndarray] = {}
        self._owned: set[int] = set()

    def add(self, parent: "Tensor", g: np.ndarray):
        key = id(parent)
        cur = self._bufs.get(key)
        if cur is None:
            self._bufs[key] = g
        elif key in self._owned:
            cur += g
        else:
            self._bufs[key] = cur + g
            self._owned.add(key)

    def seed(self, node: "Tensor", g: np.ndarray):
        self._bufs[id(node)] = g
        self._owned.add(id(node))

    def pop(self, node: "Tensor") -> np.ndarray | None:
        self._owned.discard(id(node))
        return self._bufs.pop(id(node), None)


class Tensor:
    """A float64 array plus an optional gradient and graph record."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray, _GradStore], None] | None = None
        self._op = "leaf"

    # -- basics ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        """Reset the accumulated gradient to zeros (explicit, per contract)."""
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    # -- graph ----------------------------------------------------------

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad tensor.

        ``self`` must be scalar (size 1). Repeated calls accumulate
        additively; call ``zero_grad`` on the leaves to reset.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        store = _GradStore()
        store.seed(self, np.ones_like(self.data))
        for node in reversed(topo):
            g = store.pop(node)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                node._backward(g, store)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        if not isinstance(other, Tensor):
            other = Tensor(-_as_array(other))
            return add(self, other)
        return add(self, mul(other, -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _needs_grad(t: Tensor) -> bool:
    """Constants (no requires_grad, no parents) need no gradient buffers."""
    return t.requires_grad or bool(t._parents)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _mode.finite_checks and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op}: output contains NaN or Inf")
    out = Tensor(data)
    out._op = op
    if _mode.grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise --------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g, store):
        if _needs_grad(a):
            store.add(a, _unbroadcast(g, a.data.shape))
        if _needs_grad(b):
            store.add(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g, store):
        if _needs_grad(a):
            store.add(a, _unbroadcast(g * b.data, a.data.shape))
        if _needs_grad(b):
            store.add(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward, "mul")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-form gelu: 0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3)))."""
    xd = x.data
    t = xd * xd
    t *= xd
    t *= 0.044715
    t += xd
    t *= _GELU_C
    np.tanh(t, out=t)
    data = t + 1.0
    data *= 0.5
    half_1pt = data.copy()
    data *= xd

    def backward(g, store):
        du = xd * xd
        du *= 3 * 0.044715
        du += 1.0
        du *= _GELU_C
        local = 1.0 - t * t
        local *= du
        local *= xd
        local *= 0.5
        local += half_1pt
        local *= g
        store.add(x, local)

    return _make(data, (x,), backward, "gelu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def backward(g, store):
        store.add(x, g * (1.0 - t * t))

    return _make(t, (x,), backward, "tanh")


# -- shape ops -----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None

    def backward(g, store):
        store.add(x, g.reshape(x.data.shape))

    return _make(data, (x,), backward, "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(x.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def backward(g, store):
        store.add(x, np.ascontiguousarray(g.transpose(inv)))

    return _make(data, (x,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: shapes {[t.shape for t in tensors]} do not align on axis {axis}"
        ) from None
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g, store):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            store.add(t, np.ascontiguousarray(g[tuple(idx)]))

    return _make(data, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_coerce(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g, store):
        for i, t in enumerate(tensors):
            store.add(t, np.ascontiguousarray(np.take(g, i, axis=axis)))

    return _make(data, tensors, backward, "stack")


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    data = np.ascontiguousarray(x.data[tuple(idx)])

    def backward(g, store):
        full = np.zeros_like(x.data)
        full[tuple(idx)] = g
        store.add(x, full)

    return _make(data, (x,), backward, "slice")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = x.data.size
    else:
        count = int(np.prod([x.data.shape[a] for a in np.atleast_1d(axis)]))

    def backward(g, store):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        store.add(x, np.broadcast_to(gg, x.data.shape) / count)

    return _make(data, (x,), backward, "mean")


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def backward(g, store):
        gg = np.asarray(g)
        if not keepdims and axis is not None:
            gg = np.expand_dims(gg, axis)
        store.add(x, np.broadcast_to(gg, x.data.shape).copy())

    return _make(data, (x,), backward, "sum")


# -- linear algebra ------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g, store):
        if _needs_grad(a):
            store.add(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if _needs_grad(b):
            store.add(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(data, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Fused x @ w + b for (..., in) inputs; weight grad via one tensordot."""
    if x.data.shape[-1] != w.data.shape[0] or w.data.ndim != 2:
        raise ShapeError(f"linear: shapes {x.shape} @ {w.shape} do not conform")
    data = x.data @ w.data
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} vs weight {w.shape}")
        data += b.data
    parents = (x, w) if b is None else (x, w, b)
    lead = tuple(range(x.data.ndim - 1))

    def backward(g, store):
        if _needs_grad(x):
            store.add(x, g @ w.data.T)
        store.add(w, np.tensordot(x.data, g, axes=(lead, lead)))
        if b is not None:
            store.add(b, g.sum(axis=lead))

    return _make(data, parents, backward, "linear")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, stride in {1, 2}, symmetric zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need (N,C,H,W) and (F,C,kh,kw), got {x.shape} and {w.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch, input {x.shape} vs weight {w.shape}")
    if stride not in (1, 2):
        raise ShapeError(f"conv2d: stride must be 1 or 2, got {stride}")
    parents = (x, w) if b is None else (x, w, b)
    data = kernels.conv2d(x.data, w.data, None if b is None else b.data, stride, padding)

    def backward(g, store):
        need_gx = bool(x.requires_grad or x._parents)
        gx, gw, gb = kernels.conv2d_backward(x.data, w.data, g, stride, padding, need_gx=need_gx)
        if need_gx:
            store.add(x, gx)
        store.add(w, gw)
        if b is not None:
            store.add(b, gb)

    return _make(data, parents, backward, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of the trailing two axes."""
    data = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(g, store):
        s = g.shape
        gg = g.reshape(*s[:-2], s[-2] // 2, 2, s[-1] // 2, 2).sum(axis=(-3, -1))
        store.add(x, gg)

    return _make(data, (x,), backward, "upsample2x")


# -- normalization and attention pieces -----------------------------------


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if gain.data.shape != (x.data.shape[-1],) or bias.data.shape != (x.data.shape[-1],):
        raise ShapeError(
            f"layernorm: gain/bias must be ({x.data.shape[-1]},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = x.data - mu
    xhat *= inv
    data = xhat * gain.data
    data += bias.data

    def backward(g, store):
        axes = tuple(range(g.ndim - 1))
        gxh = g * xhat
        store.add(gain, gxh.sum(axis=axes))
        store.add(bias, g.sum(axis=axes))
        if _needs_grad(x):
            gh = g * gain.data
            m2 = gh * xhat
            m2 = m2.mean(axis=-1, keepdims=True)
            gx = gh
            gx -= gh.mean(axis=-1, keepdims=True)
            np.multiply(xhat, m2, out=gxh)
            gx -= gxh
            gx *= inv
            store.add(x, gx)

    return _make(data, (x, gain, bias), backward, "layernorm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    data = x.data - x.data.max(axis=axis, keepdims=True)
    np.exp(data, out=data)
    data /= data.sum(axis=axis, keepdims=True)

    def backward(g, store):
        gx = g * data
        gx -= data * gx.sum(axis=axis, keepdims=True)
        store.add(x, gx)

    return _make(data, (x,), backward, "softmax")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: ids (...,) of ints into table (V, d) -> (..., d)."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding: ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(
            f"embedding: id out of range [0, {table.data.shape[0]}), got min {ids.min()} max {ids.max()}"
        )
    data = table.data[ids]

    def backward(g, store):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        store.add(table, gt)

    return _make(data, (table,), backward, "embedding")


# -- losses ---------------------------------------------------------------


def mse_loss(pred: Tensor, target) -> Tensor:
    target = _coerce(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(f"mse_loss: shapes {pred.shape} and {target.shape} differ")
    diff = pred.data - target.data
    data = np.asarray((diff * diff).mean())

    def backward(g, store):
        scale = 2.0 / diff.size
        if _needs_grad(pred):
            store.add(pred, g * scale * diff)
        if _needs_grad(target):
            store.add(target, -g * scale * diff)

    return _make(data, (pred, target), backward, "mse_loss")


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Masked mean cross-entropy over the last axis of ``logits``.

    ``targets`` holds class ids with the same leading shape as ``logits``.
    Positions with mask 0 contribute exactly zero to the loss and to all
    gradients. The result is the mean over masked positions.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.data.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: targets shape {targets.shape} vs logits {logits.data.shape}"
        )
    if mask is None:
        mask = np.ones(targets.shape, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != targets.shape:
        raise ShapeError(f"cross_entropy: mask shape {mask.shape} vs targets {targets.shape}")
    denom = mask.sum()
    if denom <= 0:
        raise ShapeError("cross_entropy: mask selects no positions")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    tgt = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    data = np.asarray(-(tgt * mask).sum() / denom)

    def backward(g, store):
        p = np.exp(logp)
        idx = targets[..., None]
        np.put_along_axis(p, idx, np.take_along_axis(p, idx, axis=-1) - 1.0, axis=-1)
        store.add(logits, g * p * (mask[..., None] / denom))

    return _make(data, (logits,), backward, "cross_entropy")


# -- gradient checking -----------------------------------------------------


class GradCheckReport:
    """Per-parameter comparison of autodiff vs central finite differences."""

    def __init__(self, tolerance: float, step: float, floor: float):
        self.tolerance = tolerance
        self.step = step
        self.floor = floor
        self.per_param: dict[str, float] = {}
        self.worst: tuple[str, int, float, float, float] | None = None

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def summary(self) -> str:
        lines = [
            f"grad check: {'PASS' if self.passed else 'FAIL'} "
            f"(max rel err {self.max_rel_error:.3e}, tol {self.tolerance:.1e}, h {self.step:.1e})"
        ]
        for name, err in sorted(self.per_param.items()):
            lines.append(f"  {name}: {err:.3e}")
        if self.worst is not None:
            name, idx, ad, fd, err = self.worst
            lines.append(f"  worst: {name}[{idx}] autodiff {ad:.6e} fd {fd:.6e} rel {err:.3e}")
        return "\n".join(lines)


def grad_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-4,
    floor: float = 1e-3,
    samples_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients with central finite differences.

    ``loss_fn`` must be a deterministic closure over ``params`` returning a
    scalar Tensor. With ``samples_per_param`` set, only that many seeded
    random coordinates per tensor are probed (assembled models need this to
    stay inside runtime budgets); otherwise every coordinate is checked.
    Relative error is |ad - fd| / max(|ad|, |fd|, floor), so for near-zero
    gradients the check degrades to an absolute bound of tolerance * floor.
    Failures are carried in the report, never raised.
    """
    report = GradCheckReport(tolerance, step, floor)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    if rng is None:
        rng = np.random.default_rng(0)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if samples_per_param is None or samples_per_param >= n:
            coords: Iterable[int] = range(n)
        else:
            coords = sorted(rng.choice(n, size=samples_per_param, replace=False).tolist())
        worst_param = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                f_plus = loss_fn().item()
            flat[i] = orig - step
            with no_grad():
                f_minus = loss_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * step)
            ad = float(analytic[name].reshape(-1)[i])
            err = abs(ad - fd) / max(abs(ad), abs(fd), floor)
            if err > worst_param:
                worst_param = err
            if report.worst is None or err > report.worst[4]:
                report.worst = (name, i, ad, fd, err)
        report.per_param[name] = worst_param
    return report
