"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every operation runs eagerly on numpy arrays. When a `Tape` is active and one of
the operands is tracked, the operation appends an entry holding its inputs, its
output and a closure mapping the output gradient to input gradients. `backward`
replays the entries of the loss's tape once each, newest first.

Broadcasting is limited to stretching axes of extent 1, promoting a missing
leading batch axis, and rank-0 constants.
"""
import contextvars
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, logsumexp

from app.errors import ContractError, NumericError, ShapeError, UndefinedLossError

Shape = Tuple[int, ...]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_tape: contextvars.ContextVar[Optional["Tape"]] = contextvars.ContextVar("active_tape", default=None)


class Tensor:
    """A float64 array that may take part in a recorded computation.

    Operations never modify their operands; only the optimizer updates parameter
    data in place, between steps.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64)
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._tape: Optional[Tape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.name = None
        t._tape = None
        return t

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._tape is not None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of executed operations; single owner, one per thread of work."""

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.entries)


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: BackwardFn) -> Tensor:
    """Wrap `out` as a tensor and record it on the active tape when any input is tracked."""
    if not np.all(np.isfinite(out)):
        raise NumericError(f"{op} produced non-finite values")
    result = Tensor._wrap(out)
    tape = _active_tape.get()
    if tape is not None and any(t.tracked for t in inputs):
        tape.entries.append(TapeEntry(op, tuple(inputs), result, backward))
        result._tape = tape
    return result


# Broadcasting

def broadcast_shape(a: Shape, b: Shape) -> Shape:
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    if abs(len(a) - len(b)) > 1:
        raise ShapeError(f"cannot broadcast {a} with {b}: rank differs by more than one")
    rank = max(len(a), len(b))
    a = (1,) * (rank - len(a)) + a
    b = (1,) * (rank - len(b)) + b
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        else:
            raise ShapeError(f"cannot broadcast {a} with {b}")
    return tuple(out)


def unbroadcast(grad: np.ndarray, shape: Shape) -> np.ndarray:
    """Sum `grad` back down to `shape` (inverse of broadcast_shape)."""
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, extent in enumerate(shape) if extent == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# Elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    return emit("add", (a, b), a.data + b.data,
                lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    return emit("sub", (a, b), a.data - b.data,
                lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast_shape(a.shape, b.shape)
    return emit("mul", (a, b), a.data * b.data,
                lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, factor: float) -> Tensor:
    return emit("scale", (x,), x.data * factor, lambda g: (g * factor,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return emit("exp", (x,), out, lambda g: (g * out,))


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    return emit("silu", (x,), x.data * s, lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data)
    return emit("softplus", (x,), out, lambda g: (g * expit(x.data),))


_UNARY = {"exp": exp, "sigmoid": sigmoid, "silu": silu, "softplus": softplus}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch by name: add, sub, mul take two operands; exp, sigmoid, silu, softplus take one."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} takes a single operand")
        return _UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


# Reductions and reshaping

def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    if axis is None:
        return emit("sum", (x,), np.asarray(x.data.sum()),
                    lambda g: (np.broadcast_to(g, x.shape).copy(),))
    out = x.data.sum(axis=axis)
    return emit("sum", (x,), out,
                lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return emit("mean", (x,), np.asarray(x.data.mean()),
                lambda g: (np.full(x.shape, g / n),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    return emit("reshape", (x,), out, lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return emit("concat", tuple(tensors), out, backward)


def take(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """Slice [start, stop) along `axis`."""
    if not 0 <= start < stop <= x.shape[axis]:
        raise ShapeError(f"slice [{start}, {stop}) out of range for axis of extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        full = np.zeros(x.shape)
        full[index] = g
        return (full,)

    return emit("take", (x,), x.data[index].copy(), backward)


def embedding(weight: Tensor, ids: Sequence[int]) -> Tensor:
    idx = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros(weight.shape)
        np.add.at(full, idx, g)
        return (full,)

    return emit("embedding", (weight,), weight.data[idx], backward)


# Linear algebra and convolution

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m,k)@(k,n), or with a leading batch axis on `a` (and optionally `b`)."""
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or b.ndim > a.ndim:
        raise ShapeError(f"matmul supports rank 2/3 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch axes differ: {a.shape} @ {b.shape}")

    def backward(g):
        da = g @ np.swapaxes(b.data, -1, -2)
        db = np.swapaxes(a.data, -1, -2) @ g
        if b.ndim < a.ndim:
            db = db.sum(axis=0)
        return da, db

    return emit("matmul", (a, b), a.data @ b.data, backward)


def conv1d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of x (T, C_in) with kernel (K, C_in, C_out)."""
    if x.ndim != 2 or kernel.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"conv1d expects (T, C_in) and (K, C_in, C_out), got {x.shape}, {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ContractError("conv1d needs stride >= 1 and padding >= 0")
    k = kernel.shape[0]
    t_in = x.shape[0]
    t_out = (t_in + 2 * padding - k) // stride + 1
    if t_in + 2 * padding < k or t_out < 1:
        raise ShapeError(f"conv1d output length < 1 for T={t_in}, K={k}, padding={padding}")

    xp = np.pad(x.data, ((padding, padding), (0, 0)))
    windows = sliding_window_view(xp, k, axis=0)[::stride][:t_out]  # (T', C_in, K)
    out = np.einsum("tck,kco->to", windows, kernel.data)

    def backward(g):
        dkernel = np.einsum("tck,to->kco", windows, g)
        dwin = np.einsum("to,kco->tck", g, kernel.data)
        dxp = np.zeros_like(xp)
        span = stride * (t_out - 1) + 1
        for j in range(k):
            dxp[j:j + span:stride] += dwin[:, :, j]
        return dxp[padding:padding + t_in], dkernel

    return emit("conv1d", (x, kernel), out, backward)


def causal_depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-channel causal convolution: out[t] = sum_j kernel[j] * x[t - K + 1 + j]."""
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise ShapeError(f"depthwise conv expects (T, C) and (K, C), got {x.shape}, {kernel.shape}")
    k = kernel.shape[0]
    t_in = x.shape[0]
    xp = np.pad(x.data, ((k - 1, 0), (0, 0)))
    windows = sliding_window_view(xp, k, axis=0)  # (T, C, K)
    out = np.einsum("tck,kc->tc", windows, kernel.data)

    def backward(g):
        dkernel = np.einsum("tck,tc->kc", windows, g)
        dxp = np.zeros_like(xp)
        for j in range(k):
            dxp[j:j + t_in] += g * kernel.data[j]
        return dxp[k - 1:], dkernel

    return emit("causal_depthwise_conv1d", (x, kernel), out, backward)


# Normalization and loss

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({d},)")
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def backward(g):
        flat_g = g.reshape(-1, d)
        dgain = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        dbias = flat_g.sum(axis=0)
        dxhat = g * gain.data
        dx = (inv_std / d) * (d * dxhat
                              - dxhat.sum(axis=-1, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return emit("layer_norm", (x, gain, bias), out, backward)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int], ignore_id: int) -> Tensor:
    """Mean negative log-likelihood over the positions whose target is not `ignore_id`."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (T, V), got {logits.shape}")
    t_len, vocab = logits.shape
    tgt = np.asarray(targets, dtype=np.int64)
    if tgt.shape != (t_len,):
        raise ShapeError(f"expected {t_len} targets, got {tgt.shape}")
    valid = tgt != ignore_id
    if np.any((tgt[valid] < 0) | (tgt[valid] >= vocab)):
        raise ContractError(f"target id outside [0, {vocab})")
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise UndefinedLossError("every target position is ignored")

    rows = np.nonzero(valid)[0]
    logp = logits.data - logsumexp(logits.data, axis=1, keepdims=True)
    loss = -logp[rows, tgt[rows]].sum() / n_valid

    def backward(g):
        grad = np.exp(logp)
        grad[rows, tgt[rows]] -= 1.0
        grad[~valid] = 0.0
        return (grad * (g / n_valid),)

    return emit("softmax_cross_entropy", (logits,), np.asarray(loss), backward)


# Reverse pass

def _propagate(loss: Tensor) -> List[Tuple[Tensor, np.ndarray]]:
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not recorded on a tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    for entry in reversed(loss._tape.entries):
        g = grads.pop(id(entry.output), None)
        if g is None:
            continue
        for tensor, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not tensor.tracked:
                continue
            key = id(tensor)
            grads[key] = grads[key] + gi if key in grads else gi
            if tensor._tape is None:
                leaves[key] = tensor
    return [(leaves[key], grads[key]) for key in leaves]


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into `.grad` of every requires_grad leaf reachable from loss."""
    for leaf, g in _propagate(loss):
        leaf.grad = np.array(g, dtype=np.float64) if leaf.grad is None else leaf.grad + g


def gradients(loss: Tensor, wrt: Iterable[Tensor]) -> List[np.ndarray]:
    """Gradients of loss with respect to `wrt`, leaving `.grad` untouched."""
    found = {id(leaf): g for leaf, g in _propagate(loss)}
    return [np.array(found[id(t)]) if id(t) in found else np.zeros(t.shape) for t in wrt]


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |central difference|)."""
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    leaf = Tensor(x.data, requires_grad=True)
    with Tape():
        out = f(leaf)
        analytic = gradients(out, [leaf])[0]

    numeric = np.empty(x.shape)
    base = np.array(x.data, dtype=np.float64)
    for i in range(base.size):
        plus = base.copy()
        plus.flat[i] += eps
        minus = base.copy()
        minus.flat[i] -= eps
        numeric.flat[i] = (f(Tensor(plus)).item() - f(Tensor(minus)).item()) / (2 * eps)

    if not (np.all(np.isfinite(numeric)) and np.all(np.isfinite(analytic))):
        raise NumericError("non-finite value during gradient check")
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
