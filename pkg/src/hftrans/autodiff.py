"""Dense tensors with reverse-mode automatic differentiation.

Everything is channel-first and batch-free: a volume is ``(C, W, H, D)``, a
token matrix is ``(M, C)``. Operations work on :class:`Tensor` values and
record their adjoints on an explicit :class:`Tape`; call :func:`backward` on a
scalar loss to recover gradients for the tape's leaves. float32 is the
training precision, float64 the precision used by the finite-difference
checker in :mod:`hftrans.gradcheck`.

Every primitive validates its output for NaN/Inf and raises
:class:`NonFiniteError` instead of propagating bad values. Reductions use a
fixed summation order (im2col rows are ordered input-channel-major, then
kernel offsets), so replaying the same computation is bit-identical on the
same machine.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

SUPPORTED_DTYPES = (np.float32, np.float64)

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeError(EngineError):
    """Operand shapes or extents are inconsistent."""


class NonFiniteError(EngineError):
    """A primitive produced NaN or Inf."""


class TapeError(EngineError):
    """Tape misuse: mixed tapes, missing tape, or a non-scalar loss."""


# Active kink collector; relu/clamp append their branch pattern here so the
# finite-difference checker can detect probes that cross a non-smooth point.
_kink_collector: list[np.ndarray] | None = None


class collect_kinks:
    """Context manager capturing the branch pattern of kinked primitives.

    Two runs of the same (deterministic) computation can be compared via
    :func:`same_kink_signature`; a mismatch means some relu/clamp switched
    branches between the runs.
    """

    def __enter__(self) -> list[np.ndarray]:
        global _kink_collector
        if _kink_collector is not None:
            raise EngineError("kink collection is not reentrant")
        _kink_collector = []
        return _kink_collector

    def __exit__(self, *exc) -> None:
        global _kink_collector
        _kink_collector = None


def same_kink_signature(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


class Node:
    """One tape record: parent links plus the adjoint of the producing op."""

    __slots__ = ("tape", "parents", "backward_fn")

    def __init__(self, tape: "Tape", parents: tuple, backward_fn):
        self.tape = tape
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive applications; creation order is
    topological order. A tape and its tensors belong to one logical
    execution and must not be shared across concurrent ones."""

    def __init__(self) -> None:
        self._nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def _record(self, node: Node) -> None:
        self._nodes.append(node)

    def leaf(self, data: np.ndarray | float | Sequence) -> "Tensor":
        """Register a differentiable leaf (a parameter) on this tape."""
        arr = _validate_array(np.asarray(data))
        node = Node(self, (), None)
        self._record(node)
        return Tensor(arr, node)


def _validate_array(arr: np.ndarray) -> np.ndarray:
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64 if arr.dtype == np.float64 else np.float32)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError("tensor creation from non-finite values")
    return arr


class Tensor:
    """Immutable dense array, optionally linked to a tape node."""

    __slots__ = ("data", "node")

    def __init__(self, data: np.ndarray, node: Node | None = None):
        self.data = data
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = "leaf" if (self.node and not self.node.parents) else (
            "op" if self.node else "const")
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, {tag})"

    # Operator sugar; scalars go through shift/scale to keep the tape lean.
    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, float(other))
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -float(other))
        return sub(self, other)

    def __rsub__(self, other):
        return shift(neg(self), float(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(data, dtype=None) -> Tensor:
    """Wrap raw values as a non-differentiable tensor."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float32)
    return Tensor(_validate_array(arr))


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} produced non-finite values")
    return arr


def _common_dtype(name: str, *tensors: Tensor):
    dt = tensors[0].data.dtype
    for t in tensors[1:]:
        if t.data.dtype != dt:
            raise ShapeError(f"{name}: mixed dtypes {dt} and {t.data.dtype}")
    return dt


def _make(name: str, out_data: np.ndarray, parents: Sequence[Tensor],
          backward_fn) -> Tensor:
    """Finite-check the result and record it if any parent is on a tape.

    ``backward_fn(g) -> list[np.ndarray | None]`` must return one gradient
    per parent, aligned with ``parents``; ``None`` entries are skipped.
    """
    _finite(name, out_data)
    tape = None
    for p in parents:
        if p.node is not None:
            if tape is None:
                tape = p.node.tape
            elif p.node.tape is not tape:
                raise TapeError(f"{name}: operands belong to different tapes")
    if tape is None:
        return Tensor(out_data)
    pnodes = tuple(p.node for p in parents)
    node = Node(tape, pnodes, backward_fn)
    tape._record(node)
    return Tensor(out_data, node)


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, Tensor]:
    """Reverse sweep from a scalar loss; returns a gradient per parameter.

    Gradients accumulate additively across fan-out. Parameters the loss does
    not reach get zero gradients.
    """
    if loss.node is None or loss.node.tape is not tape:
        raise TapeError("loss is not recorded on this tape")
    if loss.data.ndim != 0:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    params = list(params)
    for p in params:
        if p.node is None or p.node.tape is not tape:
            raise TapeError("parameter is not a leaf of this tape")

    grads: dict[Node, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for node in reversed(tape._nodes):
        if node.backward_fn is None:
            continue  # leaves keep their accumulated gradient
        g = grads.pop(node, None)
        if g is None:
            continue
        for pnode, pgrad in zip(node.parents, node.backward_fn(g)):
            if pnode is None or pgrad is None:
                continue
            _finite("backward", pgrad)
            acc = grads.get(pnode)
            grads[pnode] = pgrad if acc is None else acc + pgrad

    out: dict[Tensor, Tensor] = {}
    for p in params:
        g = grads.get(p.node)
        out[p] = Tensor(g if g is not None else np.zeros_like(p.data))
    return out


# ---------------------------------------------------------------------------
# elementwise and shape primitives
# ---------------------------------------------------------------------------

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(x: Tensor, y: Tensor) -> Tensor:
    _common_dtype("add", x, y)
    out = x.data + y.data
    return _make("add", out, (x, y), lambda g: [
        _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)])


def sub(x: Tensor, y: Tensor) -> Tensor:
    _common_dtype("sub", x, y)
    out = x.data - y.data
    return _make("sub", out, (x, y), lambda g: [
        _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)])


def mul(x: Tensor, y: Tensor) -> Tensor:
    _common_dtype("mul", x, y)
    out = x.data * y.data
    return _make("mul", out, (x, y), lambda g: [
        _unbroadcast(g * y.data, x.shape), _unbroadcast(g * x.data, y.shape)])


def div(x: Tensor, y: Tensor) -> Tensor:
    _common_dtype("div", x, y)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x.data / y.data
    return _make("div", out, (x, y), lambda g: [
        _unbroadcast(g / y.data, x.shape),
        _unbroadcast(-g * x.data / (y.data * y.data), y.shape)])


def neg(x: Tensor) -> Tensor:
    return _make("neg", -x.data, (x,), lambda g: [-g])


def scale(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _make("scale", x.data * c, (x,), lambda g: [g * c])


def shift(x: Tensor, c: float) -> Tensor:
    c = x.data.dtype.type(c)
    return _make("shift", x.data + c, (x,), lambda g: [g])


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    if _kink_collector is not None:
        _kink_collector.append(pos)
    out = np.where(pos, x.data, x.data.dtype.type(0))
    return _make("relu", out, (x,), lambda g: [g * pos])


def gelu(x: Tensor) -> Tensor:
    xd = x.data
    ef = erf(xd * _INV_SQRT2)
    out = (0.5 * xd * (1.0 + ef)).astype(xd.dtype)

    def bwd(g):
        local = 0.5 * (1.0 + ef) + xd * np.exp(-0.5 * xd * xd) * _INV_SQRT2PI
        return [(g * local).astype(xd.dtype)]

    return _make("gelu", out, (x,), bwd)


def log(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return _make("log", out, (x,), lambda g: [g / x.data])


def clamp_min(x: Tensor, floor: float) -> Tensor:
    floor = x.data.dtype.type(floor)
    above = x.data > floor
    if _kink_collector is not None:
        _kink_collector.append(above)
    out = np.where(above, x.data, floor)
    return _make("clamp_min", out, (x,), lambda g: [g * above])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    out = np.ascontiguousarray(x.data).reshape(shape)
    return _make("reshape", out, (x,), lambda g: [g.reshape(x.shape)])


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of {x.ndim} axes")
    inv = np.argsort(axes)
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make("permute", out, (x,),
                 lambda g: [np.ascontiguousarray(np.transpose(g, inv))])


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat: empty input list")
    _common_dtype("concat", *tensors)
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
                t.shape[a] != ref[a] for a in range(len(ref)) if a != axis):
            raise ShapeError(
                f"concat: incompatible shapes {t.shape} vs {ref} on axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return [np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis)]

    return _make("concat", out, tuple(tensors), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(
            f"slice_axis: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return [gx]

    return _make("slice_axis", out, (x,), bwd)


def sum_(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        axes_t = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes_t = (axes % x.ndim,)
    else:
        axes_t = tuple(a % x.ndim for a in axes)
    out = x.data.sum(axis=axes_t, keepdims=keepdims)

    def bwd(g):
        if not keepdims:
            shape = list(x.shape)
            for a in axes_t:
                shape[a] = 1
            g = g.reshape(shape)
        return [np.broadcast_to(g, x.shape).copy()]

    return _make("sum", out, (x,), bwd)


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if axes is None:
        n = x.size
    elif isinstance(axes, int):
        n = x.shape[axes % x.ndim]
    else:
        n = math.prod(x.shape[a % x.ndim] for a in axes)
    return scale(sum_(x, axes, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(x: Tensor, y: Tensor) -> Tensor:
    _common_dtype("matmul", x, y)
    if x.ndim < 2 or y.ndim < 2:
        raise ShapeError("matmul: operands must have rank >= 2")
    if x.shape[:-2] != y.shape[:-2]:
        raise ShapeError(f"matmul: leading extents differ, {x.shape} vs {y.shape}")
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {x.shape} vs {y.shape}")
    out = x.data @ y.data
    return _make("matmul", out, (x, y), lambda g: [
        g @ _swap_last(y.data), _swap_last(x.data) @ g])


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over the last axis, batched over leading axes."""
    _common_dtype("linear", x, weight, bias)
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear: trailing extent {x.shape[-1]} != Din {din}")
    if bias.shape != (dout,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({dout},)")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    out = (x2 @ weight.data.T + bias.data).reshape(*lead, dout)

    def bwd(g):
        g2 = g.reshape(-1, dout)
        return [(g2 @ weight.data).reshape(x.shape), g2.T @ x2, g2.sum(axis=0)]

    return _make("linear", out, (x, weight, bias), bwd)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along ``axis``."""
    ax = axis % x.ndim
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def bwd(g):
        inner = (g * y).sum(axis=ax, keepdims=True)
        return [y * (g - inner)]

    return _make("softmax", y, (x,), bwd)


def _norm_rows(x2: np.ndarray, eps: float):
    """Zero-mean unit-variance rows: returns (xhat, inv_std)."""
    mu = x2.mean(axis=1, keepdims=True)
    var = x2.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return (x2 - mu) * inv, inv


def _norm_rows_backward(gy: np.ndarray, xhat: np.ndarray, inv: np.ndarray) -> np.ndarray:
    m1 = gy.mean(axis=1, keepdims=True)
    m2 = (gy * xhat).mean(axis=1, keepdims=True)
    return inv * (gy - m1 - xhat * m2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the (gamma, beta) affine."""
    _common_dtype("layer_norm", x, gamma, beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes must be ({c},)")
    x2 = x.data.reshape(-1, c)
    xhat, inv = _norm_rows(x2, eps)
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def bwd(g):
        g2 = g.reshape(-1, c)
        gy = g2 * gamma.data
        gx = _norm_rows_backward(gy, xhat, inv)
        return [gx.reshape(x.shape), (g2 * xhat).sum(axis=0), g2.sum(axis=0)]

    return _make("layer_norm", out, (x, gamma, beta), bwd)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over all spatial axes of a (C, ...) tensor."""
    _common_dtype("instance_norm", x, gamma, beta)
    c = x.shape[0]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"instance_norm: affine shapes must be ({c},)")
    x2 = x.data.reshape(c, -1)
    xhat, inv = _norm_rows(x2, eps)
    out = (xhat * gamma.data[:, None] + beta.data[:, None]).reshape(x.shape)

    def bwd(g):
        g2 = g.reshape(c, -1)
        gy = g2 * gamma.data[:, None]
        gx = _norm_rows_backward(gy, xhat, inv)
        return [gx.reshape(x.shape), (g2 * xhat).sum(axis=1), g2.sum(axis=1)]

    return _make("instance_norm", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------------------
# 3-D convolution
# ---------------------------------------------------------------------------

def _conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    out = (n + 2 * padding - k) // stride + 1
    if out < 1:
        raise ShapeError(
            f"conv3d: non-positive output extent for input {n}, kernel {k}, "
            f"stride {stride}, padding {padding}")
    return out


def _im2col(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(Cin, W2, H2, D2) -> (Cin*k^3, V) columns, Cin-major then offsets."""
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride]
    cin, wo, ho, do = win.shape[:4]
    col = win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(cin * k ** 3, wo * ho * do)
    return np.ascontiguousarray(col)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (Cin, W, H, D) volume with (Cout, Cin, k, k, k)
    kernels, zero padding, fixed Cin-then-offset summation order."""
    _common_dtype("conv3d", x, weight, bias)
    if x.ndim != 4 or weight.ndim != 5:
        raise ShapeError(f"conv3d: rank mismatch, input {x.shape}, kernel {weight.shape}")
    cin, w, h, d = x.shape
    cout, cin_k, k, k2, k3 = weight.shape
    if not (k == k2 == k3):
        raise ShapeError(f"conv3d: kernel must be cubic, got {weight.shape}")
    if cin_k != cin:
        raise ShapeError(f"conv3d: input has {cin} channels, kernel expects {cin_k}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv3d: bias shape {bias.shape} != ({cout},)")
    if k % 2 == 0 and k != stride:
        raise ShapeError(f"conv3d: even kernel {k} requires stride == kernel")
    wo = _conv_out_extent(w, k, stride, padding)
    ho = _conv_out_extent(h, k, stride, padding)
    do = _conv_out_extent(d, k, stride, padding)

    p = padding
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p))) if p else x.data
    col = _im2col(xp, k, stride)
    w2 = weight.data.reshape(cout, cin * k ** 3)
    out = (w2 @ col + bias.data[:, None]).reshape(cout, wo, ho, do)

    def bwd(g):
        g2 = g.reshape(cout, -1)
        gw = np.zeros_like(weight.data)
        gxp = np.zeros_like(xp)
        for dx in range(k):
            for dy in range(k):
                for dz in range(k):
                    sl = (slice(None),
                          slice(dx, dx + stride * wo, stride),
                          slice(dy, dy + stride * ho, stride),
                          slice(dz, dz + stride * do, stride))
                    xs = xp[sl].reshape(cin, -1)
                    gw[:, :, dx, dy, dz] = g2 @ xs.T
                    gxp[sl] += (weight.data[:, :, dx, dy, dz].T @ g2).reshape(
                        cin, wo, ho, do)
        gx = gxp[:, p:p + w, p:p + h, p:p + d] if p else gxp
        return [np.ascontiguousarray(gx), gw, g2.sum(axis=1)]

    return _make("conv3d", out, (x, weight, bias), bwd)


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor,
                     stride: int = 2) -> Tensor:
    """Stride-exact transposed convolution: kernel extent equals the stride,
    so output extents are exactly stride times the input extents."""
    _common_dtype("conv_transpose3d", x, weight, bias)
    if x.ndim != 4 or weight.ndim != 5:
        raise ShapeError(
            f"conv_transpose3d: rank mismatch, input {x.shape}, kernel {weight.shape}")
    cin, w, h, d = x.shape
    cin_k, cout, k, k2, k3 = weight.shape
    if not (k == k2 == k3):
        raise ShapeError(f"conv_transpose3d: kernel must be cubic, got {weight.shape}")
    if cin_k != cin:
        raise ShapeError(
            f"conv_transpose3d: input has {cin} channels, kernel expects {cin_k}")
    if k != stride:
        raise ShapeError(
            f"conv_transpose3d: kernel extent {k} must equal stride {stride}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv_transpose3d: bias shape {bias.shape} != ({cout},)")

    x2 = x.data.reshape(cin, -1)
    out = np.empty((cout, w * stride, h * stride, d * stride), dtype=x.data.dtype)
    for dx in range(k):
        for dy in range(k):
            for dz in range(k):
                out[:, dx::stride, dy::stride, dz::stride] = (
                    weight.data[:, :, dx, dy, dz].T @ x2).reshape(cout, w, h, d)
    out += bias.data[:, None, None, None]

    def bwd(g):
        gw = np.zeros_like(weight.data)
        gx2 = np.zeros_like(x2)
        gb = np.zeros_like(bias.data)
        for dx in range(k):
            for dy in range(k):
                for dz in range(k):
                    gs = np.ascontiguousarray(
                        g[:, dx::stride, dy::stride, dz::stride]).reshape(cout, -1)
                    gw[:, :, dx, dy, dz] = x2 @ gs.T
                    gx2 += weight.data[:, :, dx, dy, dz] @ gs
                    gb += gs.sum(axis=1)
        return [gx2.reshape(x.shape), gw, gb]

    return _make("conv_transpose3d", out, (x, weight, bias), bwd)
