"""Dense-array numerics with a reverse-mode differentiation tape.

Everything downstream (resampling, saliency grids, losses, networks) is
built from the ops in this module.  Design points:

* Values are numpy arrays wrapped in :class:`Tensor`; float64 is used by
  oracle/gradient tests, float32 by training runs.  Ops propagate the
  input dtype and never mix widths silently.
* Differentiation is a dynamic tape (:class:`Graph`): ops executed while
  a graph is active append a backward closure; ``Graph.backward`` replays
  the closures in exact reverse execution order.
* No broadcasting except per-channel/per-column bias adds.  All other
  shapes must match exactly; mismatches raise :class:`DimensionError`.
* Every op output is checked for NaN/Inf and raises :class:`NumericError`
  instead of letting poison values propagate.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateVectorError, DimensionError, NumericError, ParameterError

_tls = threading.local()


def _graph_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_graph() -> "Graph | None":
    stack = _graph_stack()
    return stack[-1] if stack else None  # None entries mark no_grad scopes


class Graph:
    """Ordered record of executed differentiable ops (a reverse-mode tape).

    Use as a context manager; ops run inside the ``with`` block are
    recorded.  A graph must stay on the thread that built it.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._thread = threading.get_ident()

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _graph_stack().pop()
        assert popped is self

    def record(self, out: "Tensor", backward_fn: Callable[[np.ndarray], None]) -> None:
        if threading.get_ident() != self._thread:
            raise NumericError("graph used from a thread other than its builder")
        self._records.append((out, backward_fn))
        out._graph = self

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, loss: "Tensor") -> None:
        """Seed d(loss)/d(loss)=1 and replay the tape in reverse order."""
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if threading.get_ident() != self._thread:
            raise NumericError("graph used from a thread other than its builder")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)


class _NoGrad:
    def __enter__(self):
        _graph_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_stack().pop()


def no_grad() -> _NoGrad:
    """Context manager suppressing tape recording inside an active Graph."""
    return _NoGrad()


def _check_finite(arr: np.ndarray, op: str) -> None:
    # A single reduction: any NaN/Inf poisons the sum. Cheaper than isfinite().all().
    if not math.isfinite(float(arr.sum())):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A dense n-d array with optional gradient tracking.

    ``grad`` is populated by ``Graph.backward`` for every tensor that was
    recorded on the tape (leaves with ``requires_grad`` and intermediates
    on the loss path).
    """

    __slots__ = ("data", "requires_grad", "grad", "_graph")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        _check_finite(arr, "tensor()")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._graph: Graph | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self._graph is None:
            raise NumericError("tensor was not recorded on any graph")
        self._graph.backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are python numbers, tensors must match shape.
    def __add__(self, other):
        return add_scalar(self, other) if _is_number(other) else add(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return add_scalar(self, -other) if _is_number(other) else sub(self, other)

    def __mul__(self, other):
        return mul_scalar(self, other) if _is_number(other) else mul(self, other)

    def __rmul__(self, other):
        return mul_scalar(self, other)

    def __truediv__(self, other):
        return mul_scalar(self, 1.0 / other) if _is_number(other) else div(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def _is_number(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _same_dtype(*tensors: Tensor) -> None:
    dts = {t.data.dtype for t in tensors}
    if len(dts) > 1:
        raise DimensionError(f"mixed dtypes in op: {sorted(str(d) for d in dts)}")


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # own the buffer: vjps may hand us views or arrays shared with siblings
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _make_out(data: np.ndarray, op: str, *inputs: Tensor) -> tuple[Tensor, "Graph | None"]:
    """Wrap op output; return (out, graph) with graph=None when not recording."""
    _check_finite(data, op)
    graph = active_graph()
    track = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = track
    out.grad = None
    out._graph = None
    return out, (graph if track else None)


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out, g = _make_out(a.data + b.data, "add", a, b)
    if g is not None:
        def bwd(gout):
            if a.requires_grad:
                _accumulate(a, gout)
            if b.requires_grad:
                _accumulate(b, gout)
        g.record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out, g = _make_out(a.data - b.data, "sub", a, b)
    if g is not None:
        def bwd(gout):
            if a.requires_grad:
                _accumulate(a, gout)
            if b.requires_grad:
                _accumulate(b, -gout)
        g.record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out, g = _make_out(a.data * b.data, "mul", a, b)
    if g is not None:
        a_data, b_data = a.data, b.data
        def bwd(gout):
            if a.requires_grad:
                _accumulate(a, gout * b_data)
            if b.requires_grad:
                _accumulate(b, gout * a_data)
        g.record(out, bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"div shape mismatch: {a.shape} vs {b.shape}")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        data = a.data / b.data
    out, g = _make_out(data, "div", a, b)
    if g is not None:
        b_data, out_data = b.data, out.data
        def bwd(gout):
            if a.requires_grad:
                _accumulate(a, gout / b_data)
            if b.requires_grad:
                _accumulate(b, -gout * out_data / b_data)
        g.record(out, bwd)
    return out


def add_scalar(a: Tensor, c) -> Tensor:
    out, g = _make_out(a.data + a.data.dtype.type(c), "add_scalar", a)
    if g is not None:
        def bwd(gout):
            _accumulate(a, gout)
        g.record(out, bwd)
    return out


def mul_scalar(a: Tensor, c) -> Tensor:
    c = a.data.dtype.type(c)
    out, g = _make_out(a.data * c, "mul_scalar", a)
    if g is not None:
        def bwd(gout):
            _accumulate(a, gout * c)
        g.record(out, bwd)
    return out


def texp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out, g = _make_out(data, "exp", a)
    if g is not None:
        out_data = out.data
        def bwd(gout):
            _accumulate(a, gout * out_data)
        g.record(out, bwd)
    return out


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NumericError("log requires strictly positive input")
    out, g = _make_out(np.log(a.data), "log", a)
    if g is not None:
        a_data = a.data
        def bwd(gout):
            _accumulate(a, gout / a_data)
        g.record(out, bwd)
    return out


def relu(a: Tensor) -> Tensor:
    out, g = _make_out(np.maximum(a.data, 0), "relu", a)
    if g is not None:
        mask = a.data > 0
        def bwd(gout):
            _accumulate(a, gout * mask)
        g.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# shape ops and reductions
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    out, g = _make_out(a.data.reshape(shape), "reshape", a)
    if g is not None:
        old_shape = a.data.shape
        def bwd(gout):
            _accumulate(a, gout.reshape(old_shape))
        g.record(out, bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects 2-d, got {a.shape}")
    out, g = _make_out(a.data.T, "transpose", a)
    if g is not None:
        def bwd(gout):
            _accumulate(a, gout.T)
        g.record(out, bwd)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0 (all trailing dims must match)."""
    if not parts:
        raise DimensionError("concat of zero tensors")
    _same_dtype(*parts)
    trailing = {p.shape[1:] for p in parts}
    if len(trailing) > 1:
        raise DimensionError(f"concat trailing-shape mismatch: {sorted(trailing)}")
    out, g = _make_out(np.concatenate([p.data for p in parts], axis=0), "concat", *parts)
    if g is not None:
        sizes = [p.shape[0] for p in parts]
        def bwd(gout):
            pos = 0
            for p, n in zip(parts, sizes):
                if p.requires_grad:
                    _accumulate(p, gout[pos:pos + n])
                pos += n
        g.record(out, bwd)
    return out


def tsum(a: Tensor, axis=None) -> Tensor:
    out, g = _make_out(np.asarray(a.data.sum(axis=axis)), "sum", a)
    if g is not None:
        shape = a.data.shape
        def bwd(gout):
            if axis is None:
                _accumulate(a, np.broadcast_to(gout, shape))
            else:
                _accumulate(a, np.broadcast_to(np.expand_dims(gout, axis), shape))
        g.record(out, bwd)
    return out


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul_scalar(tsum(a, axis), 1.0 / n)


def take(a: Tensor, indices, axis: int) -> Tensor:
    """Index-select along one axis; gradient scatter-adds back."""
    idx = np.asarray(indices, dtype=np.intp)
    out, g = _make_out(np.take(a.data, idx, axis=axis), "take", a)
    if g is not None:
        shape = a.data.shape
        def bwd(gout):
            full = np.zeros(shape, dtype=gout.dtype)
            np.add.at(full, tuple(idx if d == axis else slice(None) for d in range(len(shape))), gout)
            _accumulate(a, full)
        g.record(out, bwd)
    return out


def take_along_rows(a: Tensor, cols) -> Tensor:
    """Pick a[i, cols[i]] for each row i of a 2-d tensor; returns shape (N,)."""
    if a.data.ndim != 2:
        raise DimensionError(f"take_along_rows expects 2-d, got {a.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    if cols.shape != (a.shape[0],):
        raise DimensionError(f"need one column index per row: {cols.shape} vs {a.shape}")
    rows = np.arange(a.shape[0])
    out, g = _make_out(a.data[rows, cols], "take_along_rows", a)
    if g is not None:
        shape = a.data.shape
        def bwd(gout):
            full = np.zeros(shape, dtype=gout.dtype)
            np.add.at(full, (rows, cols), gout)
            _accumulate(a, full)
        g.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _same_dtype(a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out, g = _make_out(a.data @ b.data, "matmul", a, b)
    if g is not None:
        a_data, b_data = a.data, b.data
        def bwd(gout):
            if a.requires_grad:
                _accumulate(a, gout @ b_data.T)
            if b.requires_grad:
                _accumulate(b, a_data.T @ gout)
        g.record(out, bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map rows(x) @ w + b with w of shape (in, out), b of shape (out,)."""
    y = matmul(x, w)
    if b is None:
        return y
    return add_bias(y, b)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Per-column bias for 2-d (N,K)+(K,) or per-channel bias for 4-d (N,C,H,W)+(C,)."""
    _same_dtype(x, b)
    if x.data.ndim == 2 and b.shape == (x.shape[1],):
        data = x.data + b.data
        reduce_axes = (0,)
    elif x.data.ndim == 4 and b.shape == (x.shape[1],):
        data = x.data + b.data[:, None, None]
        reduce_axes = (0, 2, 3)
    else:
        raise DimensionError(f"add_bias shape mismatch: {x.shape} + {b.shape}")
    out, g = _make_out(data, "add_bias", x, b)
    if g is not None:
        def bwd(gout):
            if x.requires_grad:
                _accumulate(x, gout)
            if b.requires_grad:
                _accumulate(b, gout.sum(axis=reduce_axes))
        g.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# convolution / pooling
# ---------------------------------------------------------------------------

def _pad_hw(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x: Tensor, w: Tensor, stride: int = 1, padding=0, bias: Tensor | None = None) -> Tensor:
    """2-d cross-correlation of NCHW input with OCHkWk weights.

    ``padding`` may be an int or an (ph, pw) pair. Output spatial size is
    floor((H + 2p - k) / stride) + 1 per axis.
    """
    _same_dtype(x, w)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input/weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {w.shape}")
    if stride < 1:
        raise ParameterError(f"conv2d stride must be >= 1, got {stride}")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    if ph < 0 or pw < 0:
        raise ParameterError(f"conv2d padding must be >= 0, got {(ph, pw)}")
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise DimensionError(f"conv2d kernel {w.shape} larger than padded input {x.shape}")
    oh = (h + 2 * ph - kh) // stride + 1
    ow = (wd + 2 * pw - kw) // stride + 1

    xp = _pad_hw(x.data, ph, pw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, oh, ow, kh, kw) -> (N*oh*ow, C*kh*kw), then a single BLAS matmul
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    wmat = w.data.reshape(o, c * kh * kw)
    out_mat = cols @ wmat.T
    data = np.ascontiguousarray(out_mat.reshape(n, oh, ow, o).transpose(0, 3, 1, 2))
    if bias is not None:
        _same_dtype(x, bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d bias shape {bias.shape} != ({o},)")
        data += bias.data[:, None, None]

    inputs = (x, w) if bias is None else (x, w, bias)
    out, g = _make_out(data, "conv2d", *inputs)
    if g is not None:
        def bwd(gout):
            gmat = gout.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
            if w.requires_grad:
                _accumulate(w, (gmat.T @ cols).reshape(o, c, kh, kw))
            if x.requires_grad:
                dcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
                dxp = np.zeros_like(xp)
                for ki in range(kh):
                    for kj in range(kw):
                        dxp[:, :, ki:ki + oh * stride:stride, kj:kj + ow * stride:stride] += \
                            dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
                _accumulate(x, dxp[:, :, ph:ph + h, pw:pw + wd] if (ph or pw) else dxp)
            if bias is not None and bias.requires_grad:
                _accumulate(bias, gout.sum(axis=(0, 2, 3)))
        g.record(out, bwd)
    return out


def max_pool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; spatial dims must be even.

    Ties route the gradient to the first cell in row-major window order.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"max_pool2 expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    quads = (x.data[:, :, 0::2, 0::2], x.data[:, :, 0::2, 1::2],
             x.data[:, :, 1::2, 0::2], x.data[:, :, 1::2, 1::2])
    data = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
    out, g = _make_out(data, "max_pool2", x)
    if g is not None:
        def bwd(gout):
            dx = np.zeros((n, c, h, w), dtype=gout.dtype)
            taken = np.zeros(data.shape, dtype=bool)
            for qi, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
                hit = (quads[qi] == data) & ~taken
                taken |= hit
                dx[:, :, di::2, dj::2] = gout * hit
            _accumulate(x, dx)
        g.record(out, bwd)
    return out


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C) spatial mean."""
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool expects 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    out, g = _make_out(x.data.mean(axis=(2, 3)), "global_avg_pool", x)
    if g is not None:
        scale = 1.0 / (h * w)
        def bwd(gout):
            _accumulate(x, np.broadcast_to((gout * scale)[:, :, None, None], (n, c, h, w)))
        g.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------

def softmax_temp(x: Tensor, axis: int, temperature: float) -> Tensor:
    """Temperature softmax along one axis, max-subtracted for stability."""
    if temperature <= 0:
        raise ParameterError(f"softmax temperature must be > 0, got {temperature}")
    scaled = x.data / x.data.dtype.type(temperature)
    shifted = scaled - scaled.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    out, g = _make_out(data, "softmax_temp", x)
    if g is not None:
        y = out.data
        def bwd(gout):
            inner = (gout * y).sum(axis=axis, keepdims=True)
            _accumulate(x, y * (gout - inner) / temperature)
        g.record(out, bwd)
    return out


L2_EPSILON = 1e-12


def l2_normalize(v: Tensor, axis: int) -> Tensor:
    """Scale to unit Euclidean norm along ``axis``; near-zero norms are an error."""
    norm = np.sqrt((v.data ** 2).sum(axis=axis, keepdims=True))
    if np.any(norm < L2_EPSILON):
        raise DegenerateVectorError(f"l2_normalize: norm below {L2_EPSILON} along axis {axis}")
    data = v.data / norm
    out, g = _make_out(data, "l2_normalize", v)
    if g is not None:
        y = out.data
        def bwd(gout):
            inner = (gout * y).sum(axis=axis, keepdims=True)
            _accumulate(v, (gout - y * inner) / norm)
        g.record(out, bwd)
    return out


def log_softmax(x: Tensor, axis: int) -> Tensor:
    """Stable log-softmax (the row max is treated as a constant shift)."""
    m = x.data.max(axis=axis, keepdims=True)
    shifted_data = x.data - m
    lse = np.log(np.exp(shifted_data).sum(axis=axis, keepdims=True))
    out, g = _make_out(shifted_data - lse, "log_softmax", x)
    if g is not None:
        y = np.exp(out.data)
        def bwd(gout):
            _accumulate(x, gout - y * gout.sum(axis=axis, keepdims=True))
        g.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# bilinear grid sampling
# ---------------------------------------------------------------------------

def grid_sample(img: Tensor, gx, gy) -> Tensor:
    """Sample a (C,H,W) image at continuous coordinates via bilinear blending.

    ``gx``/``gy`` hold x (column) and y (row) source coordinates in pixel
    units, any matching shape; they may be Tensors (gradients then flow to
    the coordinates as well as to the image).  Coordinates are clamped to
    the valid range; integer coordinates reproduce pixels exactly.
    """
    if img.data.ndim != 3:
        raise DimensionError(f"grid_sample expects (C,H,W) image, got {img.shape}")
    gx_t = gx if isinstance(gx, Tensor) else None
    gy_t = gy if isinstance(gy, Tensor) else None
    xs = _as_array(gx)
    ys = _as_array(gy)
    if xs.shape != ys.shape:
        raise DimensionError(f"grid coordinate shapes differ: {xs.shape} vs {ys.shape}")
    c, h, w = img.shape
    out_shape = xs.shape
    dt = img.data.dtype
    xf = np.clip(xs.reshape(-1).astype(dt, copy=False), 0, w - 1)
    yf = np.clip(ys.reshape(-1).astype(dt, copy=False), 0, h - 1)
    # keep the floor in image dtype: float32 - int64 would promote to float64
    x0f = np.clip(np.floor(xf), 0, max(w - 2, 0))
    y0f = np.clip(np.floor(yf), 0, max(h - 2, 0))
    wx = xf - x0f
    wy = yf - y0f
    x0 = x0f.astype(np.intp)
    y0 = y0f.astype(np.intp)
    x1 = x0 + (1 if w > 1 else 0)
    y1 = y0 + (1 if h > 1 else 0)

    flat = img.data.reshape(c, h * w)
    i00 = flat[:, y0 * w + x0]
    i01 = flat[:, y0 * w + x1]
    i10 = flat[:, y1 * w + x0]
    i11 = flat[:, y1 * w + x1]
    top = i00 + wx * (i01 - i00)
    bot = i10 + wx * (i11 - i10)
    data = (top + wy * (bot - top)).reshape((c,) + out_shape)

    inputs = [img] + [t for t in (gx_t, gy_t) if t is not None]
    out, g = _make_out(data, "grid_sample", *inputs)
    if g is not None:
        in_x = (xs.reshape(-1) >= 0) & (xs.reshape(-1) <= w - 1)
        in_y = (ys.reshape(-1) >= 0) & (ys.reshape(-1) <= h - 1)
        def bwd(gout):
            gflat = gout.reshape(c, -1)
            if img.requires_grad:
                dimg = np.zeros_like(flat)
                np.add.at(dimg, (slice(None), y0 * w + x0), gflat * ((1 - wx) * (1 - wy)))
                np.add.at(dimg, (slice(None), y0 * w + x1), gflat * (wx * (1 - wy)))
                np.add.at(dimg, (slice(None), y1 * w + x0), gflat * ((1 - wx) * wy))
                np.add.at(dimg, (slice(None), y1 * w + x1), gflat * (wx * wy))
                _accumulate(img, dimg.reshape(c, h, w))
            if gx_t is not None and gx_t.requires_grad:
                ddx = (1 - wy) * (i01 - i00) + wy * (i11 - i10)
                _accumulate(gx_t, ((gflat * ddx).sum(axis=0) * in_x).reshape(out_shape))
            if gy_t is not None and gy_t.requires_grad:
                ddy = (1 - wx) * (i10 - i00) + wx * (i11 - i01)
                _accumulate(gy_t, ((gflat * ddy).sum(axis=0) * in_y).reshape(out_shape))
        g.record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(loss_fn, leaves: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn`` is called as ``loss_fn(*leaves)`` and must be a
    deterministic scalar function.  Leaves must be float64; finite
    differences are meaningless at float32.
    """
    for t in leaves:
        if t.data.dtype != np.float64:
            raise ParameterError("grad_check requires float64 leaves")
        t.requires_grad = True
        t.zero_grad()
    with Graph() as g:
        loss = loss_fn(*leaves)
    g.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in leaves]

    worst = 0.0
    with no_grad():
        for t, an in zip(leaves, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_fn(*leaves).item()
                flat[i] = orig - step
                dn = loss_fn(*leaves).item()
                flat[i] = orig
                fd = (up - dn) / (2 * step)
                a = an.reshape(-1)[i]
                worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
