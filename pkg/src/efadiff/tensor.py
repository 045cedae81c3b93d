"""Minimal reverse-mode tensor math on top of numpy.

Every operation the denoiser, attention layers, and losses need is defined
here with an explicit backward closure; gradients are checked against central
finite differences (``grad_check``), which is the single source of truth for
backward correctness. Tensors are immutable values once returned from an op;
``backward`` walks the recorded tape once per loss evaluation.

Double precision is the default; training code may pass float32 data and all
ops preserve the input dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import EvaluationError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """N-d array of real scalars with optional gradient tracking.

    ``data`` is a flat-compatible row-major numpy array; ``grad`` (same shape)
    is populated by ``backward``. Tensors produced by ops are treated as
    immutable; sharing them across threads for reading is safe.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad=False, dtype=np.float64):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad)

    @staticmethod
    def ones(shape, requires_grad=False, dtype=np.float64):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad)

    # -- metadata --------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- autodiff engine -------------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep from this tensor; accumulates into ``.grad``."""
        if not self.requires_grad:
            return
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed gradient requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def square(a: Tensor) -> Tensor:
    a = _wrap(a)

    def bw(g):
        a._accumulate(2.0 * a.data * g)

    return _make(a.data * a.data, (a,), bw)


def absolute(a: Tensor) -> Tensor:
    a = _wrap(a)

    def bw(g):
        a._accumulate(np.sign(a.data) * g)

    return _make(np.abs(a.data), (a,), bw)


def silu(x) -> Tensor:
    """Elementwise x * sigmoid(x)."""
    x = _wrap(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * s

    def bw(g):
        x._accumulate(g * (s * (1.0 + x.data * (1.0 - s))))

    return _make(y, (x,), bw)


# -- reductions ------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            ax = axis if isinstance(axis, tuple) else (axis,)
            for i in sorted(a_ % a.ndim for a_ in ax):
                g = np.expand_dims(g, i)
        a._accumulate(np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False))

    return _make(np.asarray(out), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / float(n))


# -- linear algebra ----------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; 2-d or identically batched stacks of 2-d operands."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(out, (a, b), bw)


def softmax_lastdim(x) -> Tensor:
    """Stabilized softmax along the final axis; rows sum to one."""
    x = _wrap(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax over an empty last dimension")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        x._accumulate(s * (g - dot))

    return _make(s, (x,), bw)


# -- shape manipulation ---------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _wrap(a)
    out = a.data.reshape(shape)

    def bw(g):
        a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), bw)


def transpose(a: Tensor, axes=None) -> Tensor:
    a = _wrap(a)
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = np.argsort(ax)

    def bw(g):
        a._accumulate(np.transpose(g, inv))

    return _make(np.transpose(a.data, ax), (a,), bw)


def concat(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        offset = 0
        for t, n in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + n)
                t._accumulate(g[tuple(sl)])
            offset += n

    return _make(out, tuple(tensors), bw)


def stack(tensors, axis=0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return _make(out, tuple(tensors), bw)


def getitem(a: Tensor, idx) -> Tensor:
    a = _wrap(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        a._accumulate(full)

    return _make(np.array(out, copy=True), (a,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row gather from an embedding table with scatter-add backward."""
    table = _wrap(table)
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accumulate(full)

    return _make(np.array(out, copy=True), (table,), bw)


# -- spatial ops -------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, h: int, w: int) -> np.ndarray:
    b, c = xp.shape[0], xp.shape[1]
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, h, w), (s[0], s[1], s[2], s[3], s[2], s[3]), writeable=False
    )
    return np.ascontiguousarray(win).reshape(b, c * kh * kw, h * w)


def conv2d(x, weights, bias) -> Tensor:
    """Same-padded cross-correlation.

    ``x`` is [c_in, h, w] or batched [n, c_in, h, w]; ``weights`` is
    [c_out, c_in, kh, kw] with odd kernel dims; ``bias`` is [c_out]. Spatial
    size is preserved.
    """
    x, weights, bias = _wrap(x), _wrap(weights), _wrap(bias)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects [c,h,w] or [n,c,h,w] input and [o,c,kh,kw] weights, got {x.shape} and {weights.shape}")
    n, c_in, h, w = xd.shape
    c_out, c_w, kh, kw = weights.shape
    if c_w != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in}, weights expect {c_w}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d kernel dims must be odd for same padding, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({c_out},)")
    ph, pw = kh // 2, kw // 2
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(xp, kh, kw, h, w)  # [n, ckk, hw]
    wflat = weights.data.reshape(c_out, -1)
    out = np.matmul(wflat, cols) + bias.data[:, None]
    out = out.reshape(n, c_out, h, w)

    def bw(g):
        gf = g[None] if squeeze and g.ndim == 3 else g
        gf = gf.reshape(n, c_out, h * w)
        if bias.requires_grad:
            bias._accumulate(gf.sum(axis=(0, 2)))
        if weights.requires_grad:
            gw = np.einsum("nop,nkp->ok", gf, cols)
            weights._accumulate(gw.reshape(weights.shape))
        if x.requires_grad:
            gcols = np.matmul(wflat.T, gf).reshape(n, c_in, kh, kw, h, w)
            gp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gp[:, :, i : i + h, j : j + w] += gcols[:, :, i, j]
            gx = gp[:, :, ph : ph + h, pw : pw + w]
            x._accumulate(gx[0] if squeeze else gx)

    return _make(out[0] if squeeze else out, (x, weights, bias), bw)


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    x = _wrap(x)
    n, c, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avgpool2d: spatial dims {h}x{w} not divisible by {k}")
    out = x.data.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def bw(g):
        gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
        x._accumulate(gx)

    return _make(out, (x,), bw)


def upsample_nearest(x: Tensor, k: int = 2) -> Tensor:
    x = _wrap(x)
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=2), k, axis=3)

    def bw(g):
        gx = g.reshape(n, c, h, k, w, k).sum(axis=(3, 5))
        x._accumulate(gx)

    return _make(out, (x,), bw)


# -- finite-difference oracle ------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients to central finite differences."""

    max_relative_error: float
    per_parameter_errors: dict[str, float] = field(default_factory=dict)
    epsilon: float = 1e-5


def grad_check(loss_fn, params: dict[str, Tensor], epsilon: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn(params)`` against central differences.

    ``loss_fn`` must be a deterministic scalar function of the named tensors.
    Relative error per element is |a - n| / max(|a|, |n|, 1e-12). Runs at the
    parameters' own precision; use float64 parameters for meaningful results.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn(params)
    if not np.isfinite(loss.data).all():
        raise EvaluationError("grad_check: loss is not finite")
    loss.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    def eval_loss() -> float:
        out = loss_fn(params)
        val = float(out.data)
        if not math.isfinite(val):
            raise EvaluationError("grad_check: loss is not finite during finite differencing")
        return val

    per_param: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = eval_loss()
            flat[i] = orig - epsilon
            lo = eval_loss()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            worst = max(worst, err)
        per_param[name] = worst
    return GradCheckReport(
        max_relative_error=max(per_param.values()) if per_param else 0.0,
        per_parameter_errors=per_param,
        epsilon=epsilon,
    )
