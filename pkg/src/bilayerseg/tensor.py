"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation executed while gradients are enabled appends a
record (output, parents, adjoint closure) to the active :class:`Tape`.
``backward(loss)`` replays the records of the loss's tape in reverse order
exactly once; a tape is spent afterwards and a fresh one becomes active, so
each training step rebuilds its graph from scratch.

Only the operators the mask heads and the transformer decoder need are
provided.  Elementwise arithmetic follows numpy broadcasting; adjoints are
summed back to the operand shapes.
"""

from __future__ import annotations

import contextlib
import struct
from typing import BinaryIO, Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError, DomainError

LAYER_NORM_EPS = 1e-5


class Tape:
    """Ordered record of executed operations for one forward pass."""

    def __init__(self):
        self._records = []
        self._spent = False

    def __len__(self):
        return len(self._records)

    @property
    def spent(self) -> bool:
        return self._spent

    def record(self, out: "Tensor", parents: tuple, adjoint: Callable) -> None:
        if self._spent:
            raise ContractError("cannot record on a tape that has already been replayed")
        self._records.append((out, parents, adjoint))

    def backward(self, loss: "Tensor") -> None:
        if self._spent:
            raise ContractError("backward already ran on this tape; run the forward pass again")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self._records:
            raise ContractError("backward called on an empty tape")
        pending = {id(loss): np.ones_like(loss.data)}
        for out, parents, adjoint in reversed(self._records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, adjoint(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._tape is None:
                    parent.grad += pg
                else:
                    key = id(parent)
                    prev = pending.get(key)
                    pending[key] = pg if prev is None else prev + pg
        self._records.clear()
        self._spent = True

    def __enter__(self):
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.remove(self)


class _State:
    def __init__(self):
        self.stack = [Tape()]
        self.grad_enabled = True
        self.kinks = None

    @property
    def tape(self) -> Tape:
        if self.stack[-1].spent and len(self.stack) == 1:
            self.stack[0] = Tape()
        return self.stack[-1]


_state = _State()


@contextlib.contextmanager
def kink_watch():
    """Collect, for every piecewise op evaluated inside the block, the smallest
    distance of an input to its switching point.  Yields the list of minima."""
    prev = _state.kinks
    _state.kinks = []
    try:
        yield _state.kinks
    finally:
        _state.kinks = prev


def note_kink(distance) -> None:
    """Report distances to a non-differentiable point to an active kink_watch."""
    if _state.kinks is not None:
        d = np.abs(np.asarray(distance, dtype=np.float64))
        _state.kinks.append(float(d.min()) if d.size else np.inf)


def active_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array, optionally tracked for gradients.

    Leaves created with ``requires_grad=True`` own a zero-initialised ``grad``
    accumulator of the same shape.  Results of recorded operations carry a
    reference to their tape instead and never store a grad themselves.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._tape = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, adjoint: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out.requires_grad = False
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        tape = _state.tape
        out.requires_grad = True
        out._tape = tape
        tape.record(out, parents, adjoint)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every leaf that influences the scalar ``loss``."""
    if not isinstance(loss, Tensor):
        raise ContractError("backward expects a Tensor")
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not produced by a recorded operation (empty tape)")
    loss._tape.backward(loss)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ----------------------------------------------------------------------------
# elementwise
# ----------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data + b.data, (a, b), adjoint)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result(a.data - b.data, (a, b), adjoint)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def adjoint(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(a.data * b.data, (a, b), adjoint)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def adjoint(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), adjoint)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def maximum(a, b) -> Tensor:
    """Elementwise max; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    note_kink(a.data - b.data)
    pick_a = a.data >= b.data

    def adjoint(g):
        return (
            _unbroadcast(np.where(pick_a, g, 0.0), a.shape) if a.requires_grad else None,
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape) if b.requires_grad else None,
        )

    return _result(np.where(pick_a, a.data, b.data), (a, b), adjoint)


def minimum(a, b) -> Tensor:
    """Elementwise min; ties route the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    note_kink(a.data - b.data)
    pick_a = a.data <= b.data

    def adjoint(g):
        return (
            _unbroadcast(np.where(pick_a, g, 0.0), a.shape) if a.requires_grad else None,
            _unbroadcast(np.where(pick_a, 0.0, g), b.shape) if b.requires_grad else None,
        )

    return _result(np.where(pick_a, a.data, b.data), (a, b), adjoint)


def tabs(a) -> Tensor:
    a = as_tensor(a)
    note_kink(a.data)
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    note_kink(a.data)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (np.where(on, g, 0.0),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


# ----------------------------------------------------------------------------
# shape and reductions
# ----------------------------------------------------------------------------


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)

    def adjoint(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), adjoint)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(tsum(a, axes, keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),))


def swap_last(a) -> Tensor:
    """Swap the two trailing axes (matrix transpose of every batch slice)."""
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def adjoint(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), adjoint)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def adjoint(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, adjoint)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)

    def adjoint(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(np.stack([t.data for t in tensors], axis=axis), tensors, adjoint)


# ----------------------------------------------------------------------------
# network operators
# ----------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the trailing two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def adjoint(g):
        da = db = None
        if a.requires_grad:
            da = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            db = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return da, db

    return _result(a.data @ b.data, (a, b), adjoint)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax.  ``mask`` entries that are False get zero weight."""
    x = as_tensor(x)
    z = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        if not mask.any(axis=axis).all():
            raise DomainError("softmax mask leaves a slice with no admissible entry")
        z = np.where(mask, z, -np.inf)
    y = z - z.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def adjoint(g):
        # dividing by the computed row sum (1 up to rounding) makes a constant
        # upstream gradient cancel exactly
        inner = (g * y).sum(axis=axis, keepdims=True) / y.sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _result(y, (x,), adjoint)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over the last axis, then apply a per-channel affine map."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    k = x.shape[-1]
    if gain.shape != (k,) or bias.shape != (k,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}, {bias.shape} do not match channels {k}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data

    def adjoint(g):
        dx = dgain = dbias = None
        if x.requires_grad:
            dxhat = g * gain.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gain.requires_grad:
            dgain = (g * xhat).reshape(-1, k).sum(axis=0)
        if bias.requires_grad:
            dbias = g.reshape(-1, k).sum(axis=0)
        return dx, dgain, dbias

    return _result(out, (x, gain, bias), adjoint)


def _im2col3(xd: np.ndarray) -> np.ndarray:
    """``B x C x H x W`` -> ``B x 9C x HW`` columns ordered (channel, ky, kx)."""
    nb, c, h, w = xd.shape
    padded = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
    shifted = [padded[:, :, i : i + h, j : j + w] for i in range(3) for j in range(3)]
    return np.stack(shifted, axis=2).reshape(nb, c * 9, h * w)


def _corr3(cols: np.ndarray, wm: np.ndarray, nb: int, h: int, w: int) -> np.ndarray:
    return (wm @ cols).reshape(nb, wm.shape[0], h, w)


def conv2d(x, w, bias=None) -> Tensor:
    """Same-size cross-correlation with zero padding.

    ``x`` is ``C_in x H x W`` or batched ``B x C_in x H x W``; ``w`` is
    ``C_out x C_in x k x k`` with ``k`` in {1, 3}.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 4 or w.shape[2] != w.shape[3] or w.shape[2] not in (1, 3):
        raise ConfigurationError(f"unsupported conv kernel shape {w.shape}; kernel size must be 1 or 3")
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be CxHxW or BxCxHxW, got {x.shape}")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    nb, c, h, wd = xd.shape
    co, ci, k, _ = w.shape
    if ci != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {w.shape}")
    wm = w.data.reshape(co, ci * k * k)

    if k == 1:
        flat = xd.reshape(nb, c, h * wd)
        out = (wm @ flat).reshape(nb, co, h, wd)
    else:
        cols = _im2col3(xd)
        out = _corr3(cols, wm, nb, h, wd)

    parents = (x, w)
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise DimensionError(f"conv2d bias shape {bias.shape} does not match {co} output channels")
        out = out + bias.data[:, None, None]
        parents = (x, w, bias)

    def adjoint(g):
        gb = g if batched else g[None]
        dx = dw = None
        if k == 1:
            gflat = gb.reshape(nb, co, h * wd)
            if w.requires_grad:
                dw = np.tensordot(gflat, flat, axes=([0, 2], [0, 2])).reshape(w.shape)
            if x.requires_grad:
                dx = (wm.T @ gflat).reshape(nb, c, h, wd)
        else:
            if w.requires_grad:
                gflat = gb.reshape(nb, co, h * wd)
                dw = np.tensordot(gflat, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
            if x.requires_grad:
                # correlation of the output grad with the flipped, transposed kernel
                flipped = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(ci, co * 9)
                dx = _corr3(_im2col3(gb), flipped, nb, h, wd)
        if dx is not None and not batched:
            dx = dx[0]
        grads = [dx, dw]
        if bias is not None:
            grads.append(gb.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(grads)

    return _result(out if batched else out[0], parents, adjoint)


def bilinear_x2_matrix(n: int) -> np.ndarray:
    """``2n x n`` interpolation matrix for align-corners-false upsampling."""
    m = np.zeros((2 * n, n))
    for o in range(2 * n):
        src = max((o + 0.5) / 2.0 - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1.0 - frac
        m[o, i1] += frac
    return m


def upsample_bilinear_x2(x) -> Tensor:
    """Double the two trailing spatial axes with bilinear interpolation."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"upsample needs spatial axes, got shape {x.shape}")
    uh = bilinear_x2_matrix(x.shape[-2])
    uw = bilinear_x2_matrix(x.shape[-1])
    out = uh @ x.data @ uw.T
    return _result(out, (x,), lambda g: (uh.T @ g @ uw,))


def _check_targets(logits: Tensor, targets) -> np.ndarray:
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise DimensionError(f"prediction shape {logits.shape} does not match target shape {t.shape}")
    if t.size and (t.min() < 0.0 or t.max() > 1.0 or np.isnan(t).any()):
        raise DomainError("binary cross-entropy targets must lie in [0, 1]")
    return t


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross-entropy, evaluated in log-sum-exp form."""
    logits = as_tensor(logits)
    t = _check_targets(logits, targets)
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = max(z.size, 1)

    def adjoint(g):
        return ((_sigmoid(z) - t) * (g / n),)

    return _result(np.asarray(per.sum() / n), (logits,), adjoint)


def cross_entropy(logits, target, weight=None) -> Tensor:
    """Summed negative log-likelihood of integer ``target`` under row softmax.

    ``weight`` optionally scales each row's term.
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    if logits.shape[:-1] != target.shape:
        raise DimensionError(f"class logits {logits.shape} do not match targets {target.shape}")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    wt = np.ones(target.shape) if weight is None else np.asarray(weight, dtype=np.float64)
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    loss = -(wt * picked).sum()

    def adjoint(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, target[..., None], np.take_along_axis(grad, target[..., None], -1) - 1.0, -1)
        return (grad * wt[..., None] * g,)

    return _result(np.asarray(loss), (logits,), adjoint)


# ----------------------------------------------------------------------------
# verification and serialisation
# ----------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs, eps: float = 1e-5, max_coords: Optional[int] = None, rng=None) -> float:
    """Largest relative error between backward gradients and central differences.

    ``f(*inputs)`` must return a scalar Tensor.  Relative error per coordinate
    is ``|a - b| / max(|a|, |b|, 1e-8)``; loss differences within four ulps
    count as zero.  With ``max_coords`` only that many
    coordinates are probed, drawn uniformly over all inputs by ``rng``.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    inputs = list(inputs)
    for t in inputs:
        if not t.requires_grad or not t.is_leaf:
            raise ContractError("grad_check inputs must be leaf tensors with requires_grad")
        t.zero_grad()
    loss = f(*inputs)
    if loss.data.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {loss.shape}")
    base = float(loss.data)
    if loss.requires_grad:
        backward(loss)
    analytic = [t.grad.copy() for t in inputs]

    with no_grad():
        again = float(f(*inputs).data)
        if again != base:
            raise ContractError("function is not deterministic: repeated forward passes disagree")
        worst = 0.0
        sizes = [t.data.size for t in inputs]
        probes = [range(n) for n in sizes]
        total = sum(sizes)
        if max_coords is not None and max_coords < total:
            rng = np.random.default_rng() if rng is None else rng
            chosen = np.sort(rng.choice(total, size=max_coords, replace=False))
            edges = np.cumsum([0] + sizes)
            probes = [chosen[(chosen >= lo) & (chosen < hi)] - lo for lo, hi in zip(edges[:-1], edges[1:])]
        for t, a, idx in zip(inputs, analytic, probes):
            flat = t.data.reshape(-1)
            aflat = a.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                fp = float(f(*inputs).data)
                flat[i] = orig - eps
                fm = float(f(*inputs).data)
                flat[i] = orig
                # a difference within a few ulps of f is rounding, not slope
                diff = fp - fm
                if abs(diff) <= 4.0 * np.spacing(max(abs(fp), abs(fm))):
                    diff = 0.0
                numeric = diff / (2.0 * eps)
                denom = max(abs(numeric), abs(aflat[i]), 1e-8)
                worst = max(worst, abs(numeric - aflat[i]) / denom)
    for t in inputs:
        t.zero_grad()
    return worst


def write_tensor(fh: BinaryIO, t) -> None:
    """Extent count and extents as little-endian uint64, then raw little-endian doubles."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    fh.write(struct.pack("<Q", data.ndim))
    if data.ndim:
        fh.write(struct.pack(f"<{data.ndim}Q", *data.shape))
    fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def read_tensor(fh: BinaryIO) -> Tensor:
    head = fh.read(8)
    if len(head) != 8:
        raise EOFError("truncated tensor header")
    (ndim,) = struct.unpack("<Q", head)
    shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
    count = int(np.prod(shape)) if shape else 1
    raw = fh.read(8 * count)
    if len(raw) != 8 * count:
        raise EOFError("truncated tensor payload")
    return Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape))


def dump(t, path) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def parameters_finite(params: Iterable[Tensor]) -> bool:
    return all(np.isfinite(p.data).all() for p in params)
