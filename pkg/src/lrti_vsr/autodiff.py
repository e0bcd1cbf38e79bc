"""Dense tensors with a dynamic reverse-mode gradient tape.

Every differentiable primitive the network needs lives here. Arrays are numpy
ndarrays in row-major order; a :class:`Tensor` wraps one and, when recording
is enabled and any input requires a gradient, the producing operation is
appended to the active :class:`GradientTape`. :func:`backward` walks that tape
in reverse and then frees it.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

CHARBONNIER_EPS = 1e-3
LAYER_NORM_EPS = 1e-5


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class UsageError(RuntimeError):
    """Raised when the tape is driven incorrectly."""


@dataclass
class _Node:
    out: "Tensor"
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    nbytes: int


@dataclass
class GradientTape:
    """Operations recorded in execution order, which is also a topological order."""

    nodes: list[_Node] = field(default_factory=list)
    nbytes: int = 0
    peak_nbytes: int = 0

    def record(self, node: _Node) -> int:
        self.nodes.append(node)
        self.nbytes += node.nbytes
        self.peak_nbytes = max(self.peak_nbytes, self.nbytes)
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        for node in self.nodes:
            node.out.tape_id = None
        self.nodes.clear()
        self.nbytes = 0

    def reset_peak(self) -> None:
        self.peak_nbytes = self.nbytes


_tape = GradientTape()
_recording = True


def active_tape() -> GradientTape:
    return _tape


def is_recording() -> bool:
    return _recording


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run the enclosed computation without recording anything on the tape."""
    global _recording
    previous = _recording
    _recording = False
    try:
        yield
    finally:
        _recording = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def detach(x: Tensor) -> Tensor:
    return x.detach()


def zeros(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _make(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn, saved_bytes: int = 0) -> Tensor:
    needs = _recording and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        node = _Node(out, tuple(parents), backward_fn, out_data.nbytes + saved_bytes)
        out.tape_id = _tape.record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _operand(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = _operand(a, b if isinstance(b, Tensor) else None)
    b = _operand(b, a)
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), bw)


def relu2(x: Tensor) -> Tensor:
    """Squared rectifier, ``max(x, 0) ** 2``."""
    pos = np.maximum(x.data, 0)

    def bw(g):
        return (2 * pos * g,)

    return _make(pos * pos, (x,), bw, saved_bytes=pos.nbytes)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return _make(x.data * mask, (x,), bw)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def bw(g):
        return (g * 0.5 / out,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- reductions


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape

    def bw(g):
        return (g.reshape(old),)

    # views cost no storage, so they are recorded with zero bytes
    out = _make(x.data.reshape(shape), (x,), bw)
    return out


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inverse),)

    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), bw)


def getitem(x: Tensor, index) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(np.array(x.data[index]), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_operand(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def take(x: Tensor, index: np.ndarray, axis: int = -1) -> Tensor:
    """Gather along ``axis`` with an integer index array of any shape (repeats allowed)."""
    axis = axis % x.ndim
    shape = x.shape
    index = np.asarray(index)
    pre = int(np.prod(shape[:axis], dtype=np.int64))
    post = int(np.prod(shape[axis + 1 :], dtype=np.int64))

    def bw(g):
        g3 = g.reshape(pre, index.size, post)
        out = np.zeros((pre, shape[axis], post), dtype=g.dtype)
        np.add.at(out, (slice(None), index.reshape(-1), slice(None)), g3)
        return (out.reshape(shape),)

    return _make(np.take(x.data, index, axis=axis), (x,), bw)


def gather_flat(x: Tensor, source: np.ndarray, valid: np.ndarray) -> Tensor:
    """Output element ``i`` is ``x.flat[source[i]]`` where ``valid[i]`` else zero."""
    flat = x.data.reshape(-1)
    out = np.where(valid, flat[np.where(valid, source, 0)], 0).astype(x.dtype)
    src_valid = source[valid]

    def bw(g):
        full = np.bincount(src_valid, weights=g.reshape(-1)[valid], minlength=flat.size)
        return (full.astype(g.dtype).reshape(x.shape),)

    return _make(out.reshape(x.shape), (x,), bw)


def pad_reflect(x: Tensor, pad_h: int, pad_w: int) -> Tensor:
    """Reflect-pad the last two axes at the bottom/right edge."""
    if pad_h == 0 and pad_w == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(0, pad_h), (0, pad_w)]
    h, w = x.shape[-2:]
    rows = np.pad(np.arange(h), (0, pad_h), mode="reflect")
    cols = np.pad(np.arange(w), (0, pad_w), mode="reflect")
    out = np.pad(x.data, widths, mode="reflect")

    def bw(g):
        acc = np.zeros(g.shape[:-2] + (h, g.shape[-1]), dtype=g.dtype)
        np.add.at(acc, (..., rows, slice(None)), g)
        full = np.zeros(g.shape[:-2] + (h, w), dtype=g.dtype)
        np.add.at(full, (..., slice(None), cols), acc)
        return (full,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _operand(a), _operand(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw)


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    c = xp.shape[0]
    cols = np.empty((c, 3, 3, h, w), dtype=xp.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, i : i + h, j : j + w]
    return cols.reshape(c * 9, h * w)


def conv2d(x: Tensor, w: Tensor, padding: int = 1) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1, on a single ``C x H x W`` map."""
    if w.ndim != 4 or w.shape[2:] != (3, 3) or padding != 1:
        raise DimensionError(f"conv2d expects a 3x3 kernel with padding 1, got {w.shape}")
    if x.ndim != 3 or x.shape[0] != w.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, wd)
    wmat = w.data.reshape(c_out, c_in * 9)
    out = (wmat @ cols).reshape(c_out, h, wd)

    def bw(g):
        g2 = g.reshape(c_out, h * wd)
        gw = (g2 @ cols.T).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (wmat.T @ g2).reshape(c_in, 3, 3, h, wd)
            gxp = np.zeros((c_in, h + 2, wd + 2), dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    gxp[:, i : i + h, j : j + wd] += gcols[:, i, j]
            gx = gxp[:, 1:-1, 1:-1]
        return gx, gw

    return _make(out, (x, w), bw, saved_bytes=cols.nbytes)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, axis: int = -1) -> Tensor:
    """Normalise over the last axis, then apply the affine pair."""
    if axis not in (-1, x.ndim - 1):
        raise DimensionError("layer_norm only normalises the trailing axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    xhat = xc * inv
    gd, n = gamma.data, x.shape[-1]

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return _make(xhat * gd + beta.data, (x, gamma, beta), bw, saved_bytes=xhat.nbytes)


# ---------------------------------------------------------------- pixel shuffle


def _shuffle(a: np.ndarray, s: int) -> np.ndarray:
    cs2, h, w = a.shape
    c = cs2 // (s * s)
    return a.reshape(c, s, s, h, w).transpose(0, 3, 1, 4, 2).reshape(c, h * s, w * s)


def _unshuffle(a: np.ndarray, s: int) -> np.ndarray:
    c, hs, ws = a.shape
    h, w = hs // s, ws // s
    return a.reshape(c, h, s, w, s).transpose(0, 2, 4, 1, 3).reshape(c * s * s, h, w)


def pixel_shuffle(x: Tensor, s: int) -> Tensor:
    if x.ndim != 3 or x.shape[0] % (s * s):
        raise DimensionError(f"pixel_shuffle needs channels divisible by {s * s}, got {x.shape}")

    def bw(g):
        return (_unshuffle(g, s),)

    return _make(np.ascontiguousarray(_shuffle(x.data, s)), (x,), bw)


def pixel_unshuffle(x: Tensor, s: int) -> Tensor:
    if x.ndim != 3 or x.shape[1] % s or x.shape[2] % s:
        raise DimensionError(f"pixel_unshuffle needs extents divisible by {s}, got {x.shape}")

    def bw(g):
        return (_shuffle(g, s),)

    return _make(np.ascontiguousarray(_unshuffle(x.data, s)), (x,), bw)


# ---------------------------------------------------------------- loss


def charbonnier_loss(pred: Tensor, target, eps: float = CHARBONNIER_EPS) -> Tensor:
    """Mean of ``sqrt(diff**2 + eps**2)`` over all elements."""
    target = _operand(target, pred)
    if pred.shape != target.shape:
        raise DimensionError(f"charbonnier_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    root = np.sqrt(diff * diff + eps * eps)
    n = diff.size

    def bw(g):
        gd = g * diff / root / n
        return gd, -gd

    return _make(np.asarray(root.mean(), dtype=pred.dtype), (pred, target), bw, saved_bytes=root.nbytes + diff.nbytes)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns gradients of the recorded intermediates keyed by tape id. The tape
    is cleared afterwards.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = _tape
    grads: dict[int, np.ndarray] = {}
    if loss.tape_id is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
        tape.clear()
        return grads
    grads[loss.tape_id] = np.ones_like(loss.data)
    for idx in range(loss.tape_id, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.tape_id is not None:
                prev = grads.get(parent.tape_id)
                grads[parent.tape_id] = pg if prev is None else prev + pg
            else:
                pg = pg.astype(parent.dtype, copy=False)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
    tape.clear()
    return grads


# ---------------------------------------------------------------- verification


@dataclass
class GradCheckReport:
    errors: list[float]
    analytic: list[np.ndarray]
    numeric: list[np.ndarray]

    @property
    def max_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    def passed(self, tolerance: float) -> bool:
        return self.max_error < tolerance


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``max|a - b|`` scaled by the larger of the two arrays' max magnitudes."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*inputs)`` with central differences.

    When ``coords`` is given only that many randomly chosen entries of each
    input are perturbed; the error is still measured relative to the full
    analytic gradient's scale.
    """
    for x in inputs:
        if x.dtype != np.float64:
            raise UsageError("grad_check runs in 64-bit mode")
    rng = rng or np.random.default_rng(0)
    _tape.clear()
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    out = f(*inputs)
    if out.size != 1:
        raise UsageError("grad_check needs a scalar-valued function")
    backward(out)
    analytic = [np.zeros(x.shape) if x.grad is None else x.grad.copy() for x in inputs]

    errors, numeric = [], []
    with no_grad():
        for x, ga in zip(inputs, analytic):
            flat = x.data.reshape(-1)
            picks = np.arange(flat.size) if coords is None or coords >= flat.size else rng.choice(flat.size, coords, replace=False)
            gn = np.zeros(flat.size)
            for i in picks:
                orig = flat[i]
                flat[i] = orig + step
                fp = float(f(*inputs).data)
                flat[i] = orig - step
                fm = float(f(*inputs).data)
                flat[i] = orig
                gn[i] = (fp - fm) / (2 * step)
            gsel = ga.reshape(-1)[picks]
            scale = max(np.abs(ga).max(initial=0.0), np.abs(gn[picks]).max(initial=0.0), 1e-12)
            errors.append(float(np.abs(gsel - gn[picks]).max(initial=0.0) / scale))
            numeric.append(gn.reshape(x.shape))
    for x in inputs:
        x.grad = None
    return GradCheckReport(errors, analytic, numeric)
