"""Small reverse-mode differentiation core on top of numpy.

Only the operations the longitudinal transformer needs are provided. Each op
records its parents and a closure that pushes the output gradient back to
them; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# additive attention mask value for dropped positions; exp() of it underflows to 0
MASK_VALUE = -1e9


class ContractError(ValueError):
    """Raised when operands violate a shape or usage contract."""


class NumericError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Switch the dtype new tensors are created with (float64 or float32)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
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
        return float(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- operator sugar ------------------------------------------------
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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- reverse pass --------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every requires_grad leaf."""
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node.requires_grad and node._backward is None and not np.all(np.isfinite(node.grad)):
                raise NumericError(f"non-finite gradient reached leaf {node.name or node}")


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE))


def _make(data: np.ndarray, parents: tuple, backward, op: str) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite output in op '{op}'")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, _parents=parents if needs else (), _backward=backward if needs else None, op=op)
    # interior nodes carry requires_grad so the graph walk reaches them; their
    # grad buffers are never materialised
    out.requires_grad = needs
    out.grad = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ContractError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward, "mul")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise NumericError("non-positive input in op 'log'")
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def clip_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _make(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,), "clip_min")


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _make(a.data * pos, (a,), lambda g: (g * pos,), "relu")


def dropout(a, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout. ``rate`` 0 returns the input unchanged."""
    a = as_tensor(a)
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    keep = keep.astype(a.data.dtype)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------


def _gemm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # BLAS routes a single row through gemv, whose rounding differs from gemm;
    # doubling the row keeps each row's result independent of the row count
    if x.shape[0] == 1:
        return (np.concatenate([x, x]) @ w)[:1]
    return x @ w


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    # (..., n, k) @ (k, m) runs as one gemm over the collapsed leading dims
    flat = b.ndim == 2 and a.ndim > 2

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if flat:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    if flat:
        out = _gemm(a.data.reshape(-1, a.shape[-1]), b.data).reshape(a.shape[:-1] + (b.shape[-1],))
    elif a.ndim == 2 and b.ndim == 2:
        out = _gemm(a.data, b.data)
    else:
        out = a.data @ b.data
    return _make(out, (a, b), backward, "matmul")


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractError(f"reshape {a.shape} -> {shape}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose_last(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "permute")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


# ---------------------------------------------------------------------------
# neural network ops
# ---------------------------------------------------------------------------


def linear(x, weight, bias=None) -> Tensor:
    """x @ weight (+ bias); weight is (in, out)."""
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]``; ids may have any integer shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ContractError("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding id out of range for table with {table.shape[0]} rows")
    return getitem(table, ids)


def softmax(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ContractError(f"layer_norm: gain/bias must be ({x.shape[-1]},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    n = x.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True) - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return _make(xhat * gain.data + bias.data, (x, gain, bias), backward, "layer_norm")


def attention(q, k, v, mask=None, return_weights=False):
    """Single-head scaled dot-product attention.

    ``mask`` is an additive array broadcastable to (..., Tq, Tk) holding 0 for
    kept keys and :data:`MASK_VALUE` for dropped keys.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ContractError(f"attention: incompatible q {q.shape}, k {k.shape}, v {v.shape}")
    scores = mul(matmul(q, transpose_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask)
        try:
            np.broadcast_shapes(mask.shape, scores.shape)
        except ValueError as exc:
            raise ContractError(f"attention mask {mask.shape} vs scores {scores.shape}") from exc
        scores = add(scores, Tensor(mask.astype(scores.data.dtype)))
    weights = softmax(scores)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


def adam_step(params, grads, state: AdamState, lr: float) -> AdamState:
    """Bias-corrected Adam update, in place on each ``params[i].data``."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ContractError(f"grad shape {g.shape} does not match param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {p.name or p}; step refused")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    step = lr / c1
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        denom = np.sqrt(v / c2)
        denom += state.epsilon
        p.data -= step * m / denom
    return state


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 1e-4
    warmup_steps: int = 100
    decay_start_epoch: int = 20
    decay_step_epochs: int = 5
    decay_rate: float = 0.5


def lr_at(schedule: LrSchedule, global_step: int, epoch: int) -> float:
    """Linear warmup per optimizer step times step decay per epoch."""
    if global_step < 0 or epoch < 0:
        raise ContractError("global_step and epoch must be non-negative")
    warm = 1.0 if schedule.warmup_steps <= 0 else min(1.0, (global_step + 1) / schedule.warmup_steps)
    decays = 0
    if epoch >= schedule.decay_start_epoch:
        decays = (epoch - schedule.decay_start_epoch) // schedule.decay_step_epochs + 1
    return schedule.base_lr * warm * schedule.decay_rate**decays


def clip_grad_norm(grads, max_norm: float) -> float:
    """Scale ``grads`` in place to global L2 norm ``max_norm``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype or _DEFAULT_DTYPE)
