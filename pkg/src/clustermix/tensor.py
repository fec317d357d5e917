"""Dense float64 tensors with taped reverse-mode differentiation.

Everything is sized for a two-layer transformer at desk scale, so the
engine favors auditability over speed: float64 throughout, a finite
check after every operation, and a central-difference oracle that can
certify any gradient the tape produces. Randomness comes from numpy's
PCG64 generator so that identical seeds replay runs bit-exactly.
"""
from __future__ import annotations

import hashlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "NumericError",
    "OracleError",
    "add",
    "mul",
    "matmul",
    "relu",
    "softmax",
    "log_softmax",
    "layer_norm",
    "embedding",
    "take",
    "take_along_last",
    "reshape",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "linear",
    "finite_diff_grad",
    "check_gradients",
    "max_relative_error",
    "make_rng",
]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """An operation produced NaN or Inf."""


class OracleError(RuntimeError):
    """The finite-difference oracle cannot certify this function."""


def make_rng(seed: int, *streams: str) -> np.random.Generator:
    """Seeded PCG64 generator for a named stream.

    Stream labels are hashed (blake2b) into the seed sequence so that
    e.g. ``make_rng(7, "gate-noise")`` and ``make_rng(7, "batches")``
    are independent but each is fully determined by (seed, label).
    """
    entropy = [int(seed)]
    for label in streams:
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        entropy.append(int.from_bytes(digest, "little"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


# Per-thread tape stacks: recording is single-threaded per model, but
# frozen-parameter forwards stay pure under concurrent evaluation.
_TAPE_STACKS = threading.local()


def _tapes() -> list["Tape"]:
    stack = getattr(_TAPE_STACKS, "stack", None)
    if stack is None:
        stack = _TAPE_STACKS.stack = []
    return stack


def _ensure_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by {op}")


class Tensor:
    """A node in the computation graph; wraps a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor with persistent gradient storage.

    Frozen parameters (``trainable=False``) never receive gradient and
    their ``grad`` array stays identically zero after any backward pass.
    """

    __slots__ = ("trainable", "name")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.trainable = trainable
        self.name = name
        self.grad = np.zeros_like(self.data)

    def freeze(self) -> None:
        self.trainable = False
        self.requires_grad = False
        self.grad[...] = 0.0

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name or '?'}, shape={self.shape}, trainable={self.trainable})"


class Tape:
    """Ordered record of operations for one forward pass.

    Nodes are appended in execution order, which is a valid topological
    order, so replaying the list in reverse propagates gradients to
    every trainable parameter reachable from the loss.
    """

    def __init__(self):
        self._nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tapes().pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, node: Tensor) -> None:
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0:
            raise ValueError("backward requires a scalar loss")
        if not loss.requires_grad:
            raise ValueError("loss was not produced by taped operations")
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self._nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


def _active_tape() -> Tape | None:
    stack = _tapes()
    return stack[-1] if stack else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, grad: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += grad


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _ensure_finite(data, op)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out._backward = backward_fn
        tape.record(out)
    else:
        out = Tensor(data)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data + b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    data = a.data * b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), backward, "mul")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g: np.ndarray) -> None:
        _accumulate(a, g @ np.swapaxes(b.data, -1, -2))
        _accumulate(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), backward, "matmul")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g * (x.data > 0.0))

    return _make(data, (x,), backward, "relu")


def softmax(x, tau: float = 1.0, axis: int = -1) -> Tensor:
    """Temperature softmax with max-subtraction for stability.

    Computes softmax(x / tau) along ``axis``; tau must be positive.
    Stable down to tau = 0.01 where scaled logits reach the hundreds.
    """
    if tau <= 0.0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    x = _as_tensor(x)
    shifted = (x.data - x.data.max(axis=axis, keepdims=True)) / tau
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g: np.ndarray) -> None:
        inner = (g * data).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - inner) * data / tau)

    return _make(data, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _make(data, (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    data = gain.data * normed + bias.data

    def backward(g: np.ndarray) -> None:
        _accumulate(gain, _unbroadcast(g * normed, gain.shape))
        _accumulate(bias, _unbroadcast(g, bias.shape))
        gn = g * gain.data
        _accumulate(
            x,
            inv
            * (
                gn
                - gn.mean(axis=-1, keepdims=True)
                - normed * (gn * normed).mean(axis=-1, keepdims=True)
            ),
        )

    return _make(data, (x, gain, bias), backward, "layer_norm")


def embedding(table, ids: np.ndarray) -> Tensor:
    """Gather rows of a 2-D table; gradient scatter-adds into the rows."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("embedding table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding index out of range")
    data = table.data[ids]

    def backward(g: np.ndarray) -> None:
        buf = np.zeros_like(table.data)
        np.add.at(buf, ids, g)
        _accumulate(table, buf)

    return _make(data, (table,), backward, "embedding")


def take(x, index: int) -> Tensor:
    """Pick one entry of a 1-D tensor as a scalar node."""
    x = _as_tensor(x)
    if x.ndim != 1:
        raise ShapeError("take expects a 1-D tensor")
    index = int(index)
    data = np.asarray(x.data[index])

    def backward(g: np.ndarray) -> None:
        buf = np.zeros_like(x.data)
        buf[index] = g
        _accumulate(x, buf)

    return _make(data, (x,), backward, "take")


def take_along_last(x, ids: np.ndarray) -> Tensor:
    """out[...] = x[..., ids[...]] for integer ids of shape x.shape[:-1]."""
    x = _as_tensor(x)
    ids = np.asarray(ids)
    if ids.shape != x.shape[:-1]:
        raise ShapeError("index shape must match the leading dimensions")
    data = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, ids[..., None], g[..., None], axis=-1)
        _accumulate(x, buf)

    return _make(data, (x,), backward, "take_along_last")


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    data = x.data.reshape(shape)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, g.reshape(x.shape))

    return _make(data, (x,), backward, "reshape")


def transpose(x, axes: tuple[int, ...] | None = None) -> Tensor:
    x = _as_tensor(x)
    data = np.transpose(x.data, axes)
    inverse = None if axes is None else tuple(np.argsort(axes))

    def backward(g: np.ndarray) -> None:
        _accumulate(x, np.transpose(g, inverse))

    return _make(data, (x,), backward, "transpose")


def _restore_axes(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if not keepdims:
        if axis is None:
            g = g.reshape((1,) * len(shape))
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            for ax in sorted(a % len(shape) for a in axes):
                g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g: np.ndarray) -> None:
        _accumulate(x, _restore_axes(g, x.shape, axis, keepdims))

    return _make(np.asarray(data), (x,), backward, "reduce_sum")


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.data.size if axis is None else x.data.size // data.size if data.size else 1

    def backward(g: np.ndarray) -> None:
        _accumulate(x, _restore_axes(g, x.shape, axis, keepdims) / count)

    return _make(np.asarray(data), (x,), backward, "reduce_mean")


def linear(x, w) -> Tensor:
    """Row-wise projection y = x @ w.T for a (d_out, d_in) weight."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2:
        raise ShapeError("linear weight must be 2-D")
    lead = x.shape[:-1]
    flat = reshape(x, (-1, w.shape[1])) if x.ndim != 2 else x
    out = matmul(flat, transpose(w))
    return reshape(out, (*lead, w.shape[0])) if x.ndim != 2 else out


def finite_diff_grad(
    f: Callable[[], float], params: Iterable[Parameter], h: float = 1e-5
) -> list[np.ndarray]:
    """Central-difference gradients of a scalar function of parameters.

    ``f`` takes no arguments and must be deterministic (noise off); it
    is evaluated twice up front and an OracleError is raised if the two
    results differ. Each parameter coordinate is perturbed in place by
    +/- h and restored.
    """
    if h <= 0.0:
        raise ValueError("finite difference step h must be positive")
    params = list(params)
    first, second = float(f()), float(f())
    if first != second:
        raise OracleError("function is not deterministic; finite differences are invalid")
    grads = []
    for p in params:
        grad = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = float(f())
            flat[i] = original - h
            f_minus = float(f())
            flat[i] = original
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
        grads.append(grad)
    return grads


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst-case relative disagreement; tiny absolute gaps count as zero."""
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-12)
    err = np.where(diff < floor, 0.0, diff / denom)
    return float(err.max()) if err.size else 0.0


def check_gradients(
    build_loss: Callable[[], Tensor], params: Sequence[Parameter], h: float = 1e-5
) -> float:
    """Compare taped gradients against the finite-difference oracle.

    Returns the maximum relative error over every coordinate of every
    parameter. ``build_loss`` must rebuild the loss from scratch on each
    call and must be deterministic.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = [p.grad.copy() for p in params]
    for p in params:
        p.zero_grad()
    numeric = finite_diff_grad(lambda: float(build_loss().data), params, h=h)
    return max(
        max_relative_error(a, n) for a, n in zip(analytic, numeric)
    )
