"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array. While a ``Tape`` is active, every operation
records itself (inputs, output, backward rule) in execution order, so the
recorded list is already topologically sorted. ``backward`` walks it once in
reverse and accumulates gradients into every ``requires_grad`` tensor that is
reachable from the loss.

All forward math runs in the dtype of the operands (float64 for tests and
gradient checks, float32 optionally for training speed). Nothing here is
thread-shared: the active tape is thread-local and separate model instances
may run on separate threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "tapes", None)
    if stack is None:
        stack = []
        _LOCAL.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Numeric array plus an optional gradient buffer.

    The gradient buffer exists exactly when ``requires_grad`` is true; it is
    allocated as zeros and accumulated into by ``backward``.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Op:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Execution-ordered record of operations for one forward pass."""

    def __init__(self):
        self._ops: list[_Op] = []
        self._connected: set[int] = set()

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    def __len__(self) -> int:
        return len(self._ops)

    def _is_connected(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._connected

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        if any(self._is_connected(t) for t in inputs):
            self._ops.append(_Op(tuple(inputs), output, backward))
            self._connected.add(id(output))


def _record(inputs: Sequence[Tensor], out_data: np.ndarray,
            backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        tape.record(inputs, out, backward)
    return out


def record_op(inputs: Sequence[Tensor], out_data: np.ndarray, backward) -> Tensor:
    """Register a custom differentiable operation on the active tape.

    ``backward(grad_out)`` must return one gradient array (or None) per input.
    """
    return _record(inputs, out_data, backward)


def backward(loss: Tensor) -> None:
    """Populate gradients of every reachable requires_grad tensor.

    The loss must be a scalar recorded on the active tape. Gradients
    accumulate (callers zero them between steps).
    """
    tape = active_tape()
    if tape is None:
        raise ContractError("backward called with no active tape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    if id(loss) not in tape._connected:
        if loss.requires_grad:
            loss.grad += np.ones_like(loss.data)
            return
        raise ContractError("loss is not connected to the active tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for op in reversed(tape._ops):
        g_out = grads.pop(id(op.output), None)
        if g_out is None:
            continue
        in_grads = op.backward(g_out)
        for t, g in zip(op.inputs, in_grads):
            if g is None:
                continue
            if t.requires_grad:
                t.grad += g
            elif id(t) in tape._connected:
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else prev + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcasting introduced."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / linear algebra
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record((a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)

    return _record((a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _record((a, b), out, bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record((a,), -a.data, lambda g: (-g,))


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _record((a,), a.data * s, lambda g: (g * s,))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record((a, b), out, bwd)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.data.shape}")
    return _record((a,), a.data.T.copy(), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------

def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _record((a,), out, lambda g: (g * (a.data > 0),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record((a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # evaluated via tanh to stay finite for large |x|
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record((a,), out, lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _record((a,), out, lambda g: (g * sig,))


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax along ``axis``; outputs are nonnegative and sum to 1."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _record((a,), out, bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bwd(g):
        sm = np.exp(out)
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record((a,), out, bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.data.shape[-1] < 1:
        raise ShapeError("layer_norm needs a nonempty last axis")
    mean = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = gain.data * xhat + bias.data

    def bwd(g):
        d_gain = _unbroadcast(g * xhat, gain.data.shape)
        d_bias = _unbroadcast(g, bias.data.shape)
        d_xhat = g * gain.data
        m1 = d_xhat.mean(axis=-1, keepdims=True)
        m2 = (d_xhat * xhat).mean(axis=-1, keepdims=True)
        d_x = inv * (d_xhat - m1 - xhat * m2)
        return d_x, d_gain, d_bias

    return _record((x, gain, bias), out, bwd)


# ---------------------------------------------------------------------------
# reductions / losses
# ---------------------------------------------------------------------------

def reduce_sum(a) -> Tensor:
    a = _as_tensor(a)
    out = np.asarray(a.data.sum(), dtype=a.data.dtype)
    return _record((a,), out, lambda g: (np.broadcast_to(g, a.data.shape).copy(),))


def reduce_mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    out = np.asarray(a.data.mean(), dtype=a.data.dtype)
    return _record((a,), out,
                   lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def cross_entropy(logits, targets: Sequence[int],
                  mask: Sequence[bool] | None = None,
                  reduction: str = "mean") -> Tensor:
    """Negative log-softmax probability of integer targets.

    ``mask`` selects the positions that count (True = included). With every
    position excluded the loss is 0 with zero gradient. ``reduction`` is
    "mean" or "sum" over the included positions.
    """
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes), got {logits.data.shape}")
    b, n = logits.data.shape
    targets = list(targets)
    if len(targets) != b:
        raise ShapeError(f"{len(targets)} targets for {b} logit rows")
    keep = np.ones(b, dtype=bool) if mask is None else np.asarray(list(mask), dtype=bool)
    if keep.shape != (b,):
        raise ShapeError(f"mask length {keep.shape} does not match batch {b}")
    for i, t in enumerate(targets):
        if keep[i] and not (0 <= t < n):
            raise IndexError(f"target {t} out of range for {n} classes at row {i}")
    if reduction not in ("mean", "sum"):
        raise ContractError(f"unknown reduction '{reduction}'")

    count = int(keep.sum())
    if count == 0:
        return _record((logits,), np.asarray(0.0, dtype=logits.data.dtype),
                       lambda g: (np.zeros_like(logits.data),))

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    idx = np.arange(b)
    tgt = np.asarray([t if keep[i] else 0 for i, t in enumerate(targets)])
    nll = -logp[idx, tgt] * keep
    denom = count if reduction == "mean" else 1
    out = np.asarray(nll.sum() / denom, dtype=logits.data.dtype)

    def bwd(g):
        sm = np.exp(logp)
        grad = sm * keep[:, None]
        grad[idx, tgt] -= keep
        return (grad * (float(g) / denom),)

    return _record((logits,), out, bwd)


def token_nlls(logits: np.ndarray, targets: Sequence[int]) -> list[float]:
    """Per-position negative log-likelihoods (no gradient), for perplexity."""
    arr = np.asarray(logits, dtype=np.float64)
    shifted = arr - arr.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return [float(-logp[i, t]) for i, t in enumerate(targets)]


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=0)
    sizes = [t.data.shape[0] for t in tensors]

    def bwd(g):
        grads, start = [], 0
        for n in sizes:
            grads.append(g[start:start + n])
            start += n
        return grads

    return _record(tuple(tensors), out, bwd)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    sizes = [t.data.shape[1] for t in tensors]

    def bwd(g):
        grads, start = [], 0
        for n in sizes:
            grads.append(g[:, start:start + n])
            start += n
        return grads

    return _record(tuple(tensors), out, bwd)


def gather_rows(a, indices: Sequence[int]) -> Tensor:
    """Select rows by index (embedding lookup); backward scatter-adds."""
    a = _as_tensor(a)
    idx = np.asarray(list(indices), dtype=np.int64)
    out = a.data[idx].copy()

    def bwd(g):
        grad = np.zeros_like(a.data)
        np.add.at(grad, idx, g)
        return (grad,)

    return _record((a,), out, bwd)


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

class Module:
    """Base for anything that owns trainable tensors.

    ``named_parameters`` walks the instance's attributes, recursing into
    child modules, lists and dicts, and yields dotted names in a stable
    order. Only requires_grad tensors are parameters.
    """

    def named_parameters(self):
        yield from _walk_params(self, "")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]


def _walk_params(obj, prefix: str):
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            yield prefix, obj
        return
    if isinstance(obj, Module):
        for name, value in vars(obj).items():
            sub = f"{prefix}.{name}" if prefix else name
            yield from _walk_params(value, sub)
        return
    if isinstance(obj, (list, tuple)):
        for i, value in enumerate(obj):
            yield from _walk_params(value, f"{prefix}.{i}")
        return
    if isinstance(obj, dict):
        for key in obj:
            yield from _walk_params(obj[key], f"{prefix}.{key}")


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   dtype=np.float64) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


def normal_embedding(rng: np.random.Generator, rows: int, cols: int,
                     dtype=np.float64, std: float = 0.02) -> np.ndarray:
    return (rng.normal(0.0, std, size=(rows, cols))).astype(dtype)
