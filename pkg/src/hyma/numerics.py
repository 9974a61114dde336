"""Small dense-tensor engine with reverse-mode autodiff, Adam and an LR schedule.

Only the operations needed to train connectors and the hypernetwork exist.
Broadcasting is limited to scalar-with-anything, plus the explicit
``add_bias`` row broadcast used by affine layers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import (
    ArgumentError,
    DegenerateInputError,
    DimensionError,
    RangeError,
    TrainingDivergenceError,
)

_DEFAULT_DTYPE = np.float64
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    """Switch between float64 (default) and the opt-in float32 speed mode."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise ArgumentError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """An immutable array plus the bookkeeping needed for backward.

    ``grad`` is only populated on leaves (tensors without parents) that have
    ``requires_grad`` set, and accumulates across ``backward`` calls until
    cleared.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data.setflags(write=False)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # Operator sugar. All of these route through the module-level ops.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise ArgumentError("division is only supported by a constant")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    @property
    def T(self):
        return transpose(self)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if not self.requires_grad:
            raise ArgumentError("backward called on a tensor that does not require grad")
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"seed gradient shape {grad.shape} != {self.shape}")

        grads = {id(self): grad}
        for node in reversed(_topological_order(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological_order(root: Tensor) -> list:
    # iterative post-order DFS; recursion depth would break on long graphs
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.data.setflags(write=False)
    out.grad = None
    out.op = op
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# ---------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), backward, "matmul")


def _check_broadcast(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum(), dtype=g.dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    A, B = a.data, b.data

    def backward(g):
        return _unbroadcast(g * B, A.shape), _unbroadcast(g * A, B.shape)

    return _result(A * B, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(x.data * c, (x,), backward, "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient 0 at exactly 0

    def backward(g):
        return (g * mask,)

    return _result(np.where(mask, x.data, 0.0).astype(x.data.dtype), (x,), backward, "relu")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    X = x.data
    cdf = 0.5 * (1.0 + erf(X * _INV_SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * X * X)
        return (g * (cdf + X * pdf),)

    return _result(X * cdf, (x,), backward, "gelu")


def elementwise(op: str, *inputs, c: float | None = None) -> Tensor:
    """Dispatch by name; ``c`` is the constant for ``scale``."""
    if op == "add":
        return add(*inputs)
    if op == "mul":
        return mul(*inputs)
    if op == "relu":
        return relu(*inputs)
    if op == "gelu":
        return gelu(*inputs)
    if op == "scale":
        return scale(inputs[0], c if c is not None else inputs[1])
    raise ArgumentError(f"unknown elementwise op {op!r}")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[i, :] + b`` for every row; the only row-broadcast in the engine."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} and {b.shape}")

    def backward(g):
        return g, g.sum(axis=0)

    return _result(x.data + b.data, (x, b), backward, "add_bias")


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {x.shape}")

    def backward(g):
        return (g.T,)

    return _result(x.data.T.copy(), (x,), backward, "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}")
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return _result(x.data.reshape(shape).copy(), (x,), backward, "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ArgumentError("concat of an empty list")
    try:
        data = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(data, xs, backward, "concat")


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice/int) indexing; the backward scatters into zeros."""
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, (slice, int, np.integer)):
            raise ArgumentError("only basic slice/int indexing is supported")
    try:
        data = x.data[key].copy()
    except IndexError as exc:
        raise RangeError(str(exc)) from None
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[key] = g
        return (full,)

    return _result(data, (x,), backward, "slice")


slice_ = getitem


def take_rows(x: Tensor, rows: Sequence[int]) -> Tensor:
    """Gather rows (repeats allowed); backward scatter-adds."""
    idx = np.asarray(rows, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise RangeError(f"row index out of range for {x.shape[0]} rows")
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx].copy(), (x,), backward, "take_rows")


def sum_(x: Tensor, axis: int | None = None) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is None:
            return (np.full(shape, g, dtype=x.data.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis), 1.0 / n)


def diag(x: Tensor) -> Tensor:
    if x.data.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"diag needs a square matrix, got {x.shape}")
    n = x.shape[0]

    def backward(g):
        out = np.zeros((n, n), dtype=x.data.dtype)
        out[np.arange(n), np.arange(n)] = g
        return (out,)

    return _result(np.diagonal(x.data).copy(), (x,), backward, "diag")


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted log-sum-exp along ``axis``."""
    X = x.data
    m = X.max(axis=axis, keepdims=True)
    e = np.exp(X - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)
    soft = e / s

    def backward(g):
        return (np.expand_dims(g, axis) * soft,)

    return _result(np.asarray(out), (x,), backward, "logsumexp")


def l2_normalize_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows needs a 2-D tensor, got {x.shape}")
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms.ravel() == 0)[0])
        raise DegenerateInputError(f"row {bad} has zero norm")
    y = x.data / norms

    def backward(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norms,)

    return _result(y, (x,), backward, "l2_normalize_rows")


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], probes: int = 20,
              h: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference derivatives.

    Each probe is a random direction over all inputs jointly; the analytic
    directional derivative ``<grad, u>`` is compared with
    ``(f(x + h u) - f(x - h u)) / 2h``.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    if out.size != 1:
        raise DimensionError("gradcheck needs a scalar-valued function")
    out.backward()
    grads = [l.grad if l.grad is not None else np.zeros_like(a) for l, a in zip(leaves, arrays)]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        dirs = [rng.standard_normal(a.shape) for a in arrays]
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs)) or 1.0
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        plus = fn(*[Tensor(a + h * d) for a, d in zip(arrays, dirs)]).item()
        minus = fn(*[Tensor(a - h * d) for a, d in zip(arrays, dirs)]).item()
        numeric = (plus - minus) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / (abs(numeric) + 1e-8))
    return worst


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    # per-leaf update counts for bias correction when a leaf is skipped
    leaf_steps: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ArgumentError("Adam lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ArgumentError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ArgumentError("Adam eps must be positive")


def adam_step(state: AdamState, params: Mapping[str, np.ndarray],
              grads: Mapping[str, np.ndarray | None], lr: float | None = None) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays.

    Parameters whose gradient is ``None`` are passed through untouched and
    their moments are left alone. ``state`` is updated in place.
    """
    lr = state.lr if lr is None else lr
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergenceError("non-finite gradient", parameter=name)

    state.step_count += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        t = state.leaf_steps.get(name, 0) + 1
        state.first_moment[name] = m
        state.second_moment[name] = v
        state.leaf_steps[name] = t
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        updated[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return updated


class Adam:
    """Adam over a named set of leaf tensors, with optional global-norm clipping."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip_norm: float | None = None):
        self.params = dict(params)
        seen = set()
        for name, p in self.params.items():
            if id(p) in seen:
                raise ArgumentError(f"leaf {name} registered twice")
            seen.add(id(p))
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad * p.grad).sum())
                             for p in self.params.values() if p.grad is not None))

    def step(self, lr: float | None = None) -> None:
        grads = {n: p.grad for n, p in self.params.items()}
        if self.clip_norm is not None:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
                grads = {n: None if g is None else g * factor for n, g in grads.items()}
        new = adam_step(self.state, {n: p.data for n, p in self.params.items()}, grads, lr)
        for name, p in self.params.items():
            if new[name] is not p.data:
                p.data = np.asarray(new[name], dtype=p.data.dtype)
                p.data.setflags(write=False)


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from 0 then cosine decay to 0 at ``total_steps``."""

    base_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self):
        if self.base_lr < 0:
            raise ArgumentError("base_lr must be non-negative")
        if self.warmup_steps < 0 or self.total_steps < self.warmup_steps:
            raise ArgumentError("need 0 <= warmup_steps <= total_steps")

    def __call__(self, step: int) -> float:
        return schedule_lr(self, step)


def schedule_lr(s: LrSchedule, step: int) -> float:
    if step < 0 or step > s.total_steps:
        raise RangeError(f"step {step} outside [0, {s.total_steps}]")
    if step < s.warmup_steps:
        return s.base_lr * step / s.warmup_steps
    decay = s.total_steps - s.warmup_steps
    if decay == 0:
        return s.base_lr
    progress = (step - s.warmup_steps) / decay
    return s.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def all_finite(arrays: Iterable[np.ndarray]) -> bool:
    return all(np.all(np.isfinite(a)) for a in arrays)
