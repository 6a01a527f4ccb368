"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with NumPy and, when a :class:`Tape`
is active and at least one input requires a gradient, appends a backward rule
to that tape. :func:`backward` replays the tape in reverse once.

    >>> w = Tensor([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * Tensor([3.0, 4.0])).sum()
    >>> backward(loss, tape)[w]
    array([3., 4.])
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Sequence
from typing import Union

import numpy as np
from scipy.special import erf

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when a primitive receives operands of incompatible shapes."""


class TapeError(RuntimeError):
    """Raised on misuse of a tape (non-scalar loss, replaying a consumed tape)."""


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    Tensors are treated as immutable once built; only ``grad`` is written,
    and only by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100.0

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> Tensor:
        return swapaxes(self, a, b)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_local = threading.local()


class Tape:
    """Ordered record of primitive applications, replayed once by :func:`backward`.

    A tape is bound to the thread that enters it. Tapes nest; the innermost
    active one records.
    """

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], BackwardFn]] = []
        self.consumed = False
        self._outer: Tape | None = None

    def __enter__(self) -> Tape:
        if self.consumed:
            raise TapeError("tape has already been consumed by a backward pass")
        self._outer = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._outer
        self._outer = None

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], fn: BackwardFn) -> Tensor:
    tape = getattr(_local, "tape", None)
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    tape.nodes.append((out, inputs, fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def fn(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _emit(ad * bd, (a, b), fn)


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _emit(out, (a, b), fn)


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


def scale(a: ArrayLike, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    a = as_tensor(a)
    c = float(c)
    return _emit(a.data * c, (a,), lambda g: (g * c,))


def square(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _emit(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def gelu(a: ArrayLike) -> Tensor:
    """Exact GeLU, ``x * Phi(x)`` with the Gaussian CDF."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))

    def fn(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _emit(x * cdf, (a,), fn)


def silu(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    x = a.data
    sig = 1.0 / (1.0 + np.exp(-x))
    return _emit(x * sig, (a,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),))


def sigmoid(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return _emit(sig, (a,), lambda g: (g * sig * (1.0 - sig),))


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _emit(ad @ bd, (a, b), fn)


bmm = matmul


def reshape(a: ArrayLike, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _emit(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: ArrayLike, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % max(a.ndim, 1) for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort([ax % a.ndim for ax in axes]))
    return _emit(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a: ArrayLike, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return _emit(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def getitem(a: ArrayLike, index) -> Tensor:
    """Basic (slice/integer) indexing."""
    a = as_tensor(a)
    src = a.shape

    def fn(g):
        z = np.zeros(src)
        z[index] = g
        return (z,)

    return _emit(a.data[index], (a,), fn)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} along axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# ---------------------------------------------------------------------------
# reductions and normalisation


def sum_(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src),)

    return _emit(out, (a,), fn)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def layer_norm(a: ArrayLike, eps: float = 1e-6) -> Tensor:
    """Normalise over the last axis, without learned affine terms."""
    a = as_tensor(a)
    x = a.data
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd

    def fn(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (g * xhat).sum(axis=-1, keepdims=True)
        return (rstd * (g - gs / n - xhat * gx / n),)

    return _emit(xhat, (a,), fn)


# ---------------------------------------------------------------------------
# row gather / scatter


def gather(a: ArrayLike, index: np.ndarray) -> Tensor:
    """Select rows along axis 0: ``out[j...] = a[index[j...]]``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    if a.ndim == 0:
        raise ShapeError("gather: cannot index a scalar")
    if index.size and (index.min() < 0 or index.max() >= a.shape[0]):
        raise ShapeError(f"gather: index out of range for {a.shape[0]} rows")
    src = a.shape

    def fn(g):
        z = np.zeros(src)
        np.add.at(z, index, g)
        return (z,)

    return _emit(a.data[index], (a,), fn)


def scatter_add(src: ArrayLike, index: np.ndarray, num_rows: int) -> Tensor:
    """Accumulate rows of ``src`` into ``num_rows`` rows, in index order."""
    src = as_tensor(src)
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1 or src.ndim == 0 or src.shape[0] != index.shape[0]:
        raise ShapeError(f"scatter_add: {index.shape} indices for source of shape {src.shape}")
    if index.size and (index.min() < 0 or index.max() >= num_rows):
        raise ShapeError(f"scatter_add: index out of range for {num_rows} rows")
    out = np.zeros((num_rows,) + src.shape[1:])
    np.add.at(out, index, src.data)
    return _emit(out, (src,), lambda g: (g[index],))


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape, wrt: Sequence[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Replay ``tape`` in reverse and return gradients of ``loss``.

    Args:
        loss: scalar tensor produced while ``tape`` was recording.
        tape: the recording; it is consumed and cannot be replayed.
        wrt: tensors whose gradients to report. Unused entries get zeros.
            Defaults to every leaf on the tape that requires a gradient.

    Returns:
        Mapping from tensor to gradient array. Leaf ``grad`` fields are set too.
    """
    if loss.size != 1:
        raise TapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("backward: tape has already been consumed")
    produced = {id(out) for out, _, _ in tape.nodes}
    if id(loss) not in produced and not loss.requires_grad:
        raise TapeError("backward: loss was not produced under this tape")
    tape.consumed = True

    leaves: dict[int, Tensor] = {}
    for _, inputs, _ in tape.nodes:
        for t in inputs:
            if t.requires_grad and id(t) not in produced:
                leaves[id(t)] = t
    if id(loss) not in produced:
        leaves[id(loss)] = loss

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for out, inputs, fn in reversed(tape.nodes):
        g = grads.get(id(out))
        if g is None:
            continue
        if id(out) not in leaves:
            del grads[id(out)]
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            k = id(t)
            grads[k] = grads[k] + gi if k in grads else gi
    tape.nodes = []

    targets = list(leaves.values()) if wrt is None else list(wrt)
    result: dict[Tensor, np.ndarray] = {}
    for t in targets:
        g = grads.get(id(t))
        g = np.zeros(t.shape) if g is None else np.array(g, dtype=np.float64).reshape(t.shape)
        t.grad = g
        result[t] = g
    return result


def finite_diff_grad(
    f: Callable[[Tensor], ArrayLike],
    x: ArrayLike,
    h: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> Tensor | np.ndarray:
    """Central-difference gradient of a scalar function.

    With ``indices`` (flat coordinates) only those coordinates are probed and a
    1-D array of estimates is returned; otherwise a full-shape Tensor.
    """
    base = np.array(as_tensor(x).data, dtype=np.float64)
    coords = range(base.size) if indices is None else indices
    est = np.empty(len(coords))
    for j, i in enumerate(coords):
        vals = []
        for step in (h, -h):
            probe = base.copy()
            probe.flat[i] += step
            v = float(np.asarray(as_tensor(f(Tensor(probe))).data).reshape(-1)[0])
            if not np.isfinite(v):
                raise FloatingPointError(f"finite_diff_grad: non-finite value at coordinate {i}")
            vals.append(v)
        est[j] = (vals[0] - vals[1]) / (2.0 * h)
    if indices is not None:
        return est
    return Tensor(est.reshape(base.shape))


def topk_stable(values: ArrayLike, k: int, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    """Largest ``k`` entries along ``axis`` in descending order, ties to the lower index."""
    v = np.asarray(values.data if isinstance(values, Tensor) else values, dtype=np.float64)
    n = v.shape[axis] if v.ndim else 0
    if not 1 <= k <= n:
        raise ValueError(f"topk_stable: k={k} out of range for length {n}")
    order = np.argsort(-v, axis=axis, kind="stable")
    idx = np.take(order, np.arange(k), axis=axis)
    return np.take_along_axis(v, idx, axis=axis), idx
