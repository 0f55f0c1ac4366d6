"""Small dense reverse-mode gradient kernel over 2-D numpy arrays.

Only the operations the retrieval model and its losses need are provided.
Every op builds a :class:`Tensor` node holding its value and a closure that
maps the upstream gradient to gradients for its parents.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, NumericError


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("value", "grad", "_parents", "_backward", "name")

    def __init__(self, value, parents=(), backward=None, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def requires_grad(self) -> bool:
        return self._backward is not None or isinstance(self, ParamTensor)

    def __float__(self) -> float:
        return float(self.value)

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} dtype={self.dtype}>"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ParamTensor.

        ``self`` must be a scalar.
        """
        if self.value.size != 1:
            raise ConfigurationError(f"backward() needs a scalar, got shape {self.shape}")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, ParamTensor):
                node.grad += g.reshape(node.grad.shape)
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


class ParamTensor(Tensor):
    """Trainable leaf: a value with an accumulated gradient of the same shape."""

    __slots__ = ()

    def __init__(self, value, name=None):
        super().__init__(np.array(value, copy=True), name=name)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for parent in node._parents:
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- kink monitoring -------------------------------------------------------
# Finite differences are wrong across a non-differentiable point (relu at 0,
# hinge at the margin, a gate comparison). Gradient checks record the closest
# approach to any kink so callers can resample inputs that sit on one.
# record[0] is the closest kink distance, record[1] the smallest norm of any
# row fed to a cosine (the cosine is singular at the origin).

_kink_stack: list[list[float]] = []


@contextlib.contextmanager
def track_kinks() -> Iterator[list[float]]:
    record: list[float] = [np.inf, np.inf]
    _kink_stack.append(record)
    try:
        yield record
    finally:
        _kink_stack.pop()


def note_kink_distance(values: np.ndarray) -> None:
    if _kink_stack and values.size:
        d = float(np.min(np.abs(values)))
        for record in _kink_stack:
            record[0] = min(record[0], d)


def note_row_norms(norms: np.ndarray) -> None:
    if _kink_stack and norms.size:
        d = float(np.min(norms))
        for record in _kink_stack:
            record[1] = min(record[1], d)


# --- elementwise and structural ops ----------------------------------------

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return Tensor(a.value + b.value, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.value, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    av, bv = a.value, b.value

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return Tensor(av * bv, (a, b), backward)


def square(a: Tensor) -> Tensor:
    av = a.value
    return Tensor(av * av, (a,), lambda g: (2.0 * av * g,))


def relu(a: Tensor) -> Tensor:
    av = a.value
    note_kink_distance(av)
    mask = av > 0
    # np.maximum keeps NaN visible instead of clipping it to 0
    return Tensor(np.maximum(av, 0).astype(av.dtype), (a,), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ConfigurationError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        return g @ bv.T, av.T @ g

    return Tensor(av @ bv, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.value.T, (a,), lambda g: (g.T,))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Column-wise concatenation of two row-aligned matrices."""
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ConfigurationError(f"concat row mismatch: {a.shape} and {b.shape}")
    split = a.shape[1]
    return Tensor(
        np.concatenate([a.value, b.value], axis=1),
        (a, b),
        lambda g: (g[:, :split], g[:, split:]),
    )


def total(a: Tensor) -> Tensor:
    """Sum of all entries, as a 0-d tensor."""
    shape = a.shape
    return Tensor(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def row_sum(a: Tensor) -> Tensor:
    return Tensor(a.value.sum(axis=1), (a,), lambda g: (np.repeat(g[:, None], a.shape[1], axis=1),))


def mean(a: Tensor) -> Tensor:
    return total(a) / a.value.size


def normalize_rows(a: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm. Zero rows are rejected."""
    av = a.value
    norms = np.sqrt(np.sum(av * av, axis=1, keepdims=True))
    if np.any(norms == 0):
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    note_row_norms(norms)
    unit = av / norms

    def backward(g):
        return ((g - np.sum(g * unit, axis=1, keepdims=True) * unit) / norms,)

    return Tensor(unit, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    av = a.value
    shifted = av - av.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return Tensor(out, (a,), backward)


# --- layers ----------------------------------------------------------------

ACTIVATIONS = ("identity", "relu")


def dense_forward(x: Tensor, weights: ParamTensor, bias: ParamTensor, activation: str = "identity") -> Tensor:
    """``act(x @ W + b)`` for a row batch ``x``."""
    x = as_tensor(x)
    if activation not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {activation!r}")
    if x.value.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ConfigurationError(
            f"dense input shape {x.shape} does not match weights {weights.shape}"
        )
    if bias.shape != (1, weights.shape[1]):
        raise ConfigurationError(f"bias shape {bias.shape} does not match weights {weights.shape}")
    out = add(matmul(x, weights), bias)
    return relu(out) if activation == "relu" else out


# --- cosine ----------------------------------------------------------------

def cosine_similarity(a, b) -> float:
    """Cosine similarity of two plain vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or a.shape != b.shape:
        raise ConfigurationError(f"cosine needs equal non-empty lengths, got {a.size} and {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_distance(a, b) -> float:
    return 1.0 - cosine_similarity(a, b)


def row_cosine(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity between matching rows of ``a`` and ``b``; shape (n,)."""
    if a.shape != b.shape:
        raise ConfigurationError(f"row cosine needs equal shapes, got {a.shape} and {b.shape}")
    return row_sum(mul(normalize_rows(a), normalize_rows(b)))


def cosine_matrix(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs cosine similarities; entry [k, i] compares a[k] with b[i]."""
    if a.shape[1] != b.shape[1]:
        raise ConfigurationError(f"cosine matrix width mismatch: {a.shape} and {b.shape}")
    return matmul(normalize_rows(a), transpose(normalize_rows(b)))


# --- gradient checking -----------------------------------------------------

@dataclass
class GradCheckResult:
    max_relative_error: float
    per_parameter_errors: list[tuple[str, float]] = field(default_factory=list)


def relative_error(analytic, numeric, noise=0.0):
    """|a - n| / max(|a|, |n|, 1e-8), after discounting ``noise`` from |a - n|.

    ``noise`` bounds the rounding error of the numeric estimate; without it a
    zero gradient whose difference quotient picks up one ulp of f would count
    as a large relative error.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.maximum(np.abs(analytic - numeric) - noise, 0.0) / denom


def check_gradients(
    scalar_fn: Callable[[], Tensor],
    params: Sequence[ParamTensor],
    eps: float = 1e-5,
    seed: int = 0,
    max_coords: int | None = None,
    roundoff_ulps: float = 16.0,
) -> GradCheckResult:
    """Compare backprop gradients of ``scalar_fn()`` with central differences.

    ``max_coords`` limits how many coordinates per parameter are probed; the
    subset is drawn with ``seed``. Each difference quotient is credited with a
    rounding allowance of ``roundoff_ulps`` ulps of f divided by ``2 * eps``.
    """
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    rng = np.random.default_rng(seed)
    for p in params:
        p.zero_grad()
    scalar_fn().backward()
    errors = []
    for idx, p in enumerate(params):
        name = p.name or f"param{idx}"
        analytic = p.grad.copy()
        if not np.all(np.isfinite(analytic)):
            raise NumericError(f"non-finite analytic gradient for {name}")
        flat = p.value.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        noise = np.empty(coords.size)
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = float(scalar_fn())
            flat[c] = orig - eps
            f_minus = float(scalar_fn())
            flat[c] = orig
            numeric[j] = (f_plus - f_minus) / (2 * eps)
            scale = max(abs(f_plus), abs(f_minus), 1.0)
            noise[j] = roundoff_ulps * np.finfo(np.float64).eps * scale / (2 * eps)
        if not np.all(np.isfinite(numeric)):
            raise NumericError(f"non-finite numeric gradient for {name}")
        err = float(relative_error(analytic.reshape(-1)[coords], numeric, noise).max()) if coords.size else 0.0
        errors.append((name, err))
    worst = max((e for _, e in errors), default=0.0)
    return GradCheckResult(worst, errors)
