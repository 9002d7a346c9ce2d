"""Reverse-mode automatic differentiation over float64 numpy arrays.

This is the numeric substrate for every loss and the causal transformer.
Design constraints, in order of priority:

1. Bitwise determinism: identical inputs produce identical outputs and
   gradients. All reductions go through numpy's deterministic kernels and
   the backward accumulation order is fixed by graph construction order.
2. Exact reverse-mode gradients for a small set of registered primitives,
   each verifiable against central finite differences.
3. Float64 everywhere; desk-scale sizes make precision cheaper than
   debugging drift.

Graphs are built eagerly by calling the primitives on `Tensor` nodes.
Gradients are only materialized by `evaluate_with_grad` / `grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ValidationError

Array = np.ndarray


class Tensor:
    """A node in the computation graph: float64 data plus backward closures.

    Tensors are immutable values. Operations never modify `data` in place;
    re-entrancy and parallel evaluation across independent graphs follow.
    """

    __slots__ = ("data", "parents", "vjps", "grad")

    def __init__(self, data, parents: tuple = (), vjps: tuple = ()):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.parents = parents
        self.vjps = vjps  # one callable per parent: grad_out -> grad_parent
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def value(self) -> float:
        """Scalar value of a single-element tensor."""
        if self.data.size != 1:
            raise ValidationError(
                f"value requires a scalar tensor, got shape {self.data.shape}"
            )
        return float(self.data.reshape(()))

    # Operator sugar; all defer to the registered primitives below.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"


def as_tensor(x) -> Tensor:
    """Wrap plain arrays/scalars as constant leaves; pass Tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcasted gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    # Sum away leading axes added by broadcasting.
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    # Sum over axes that were size-1 in the parent.
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Registered primitives
# ---------------------------------------------------------------------------

PRIMITIVES: dict[str, Callable] = {}


def _register(name: str):
    def deco(fn):
        PRIMITIVES[name] = fn
        return fn

    return deco


@_register("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return Tensor(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(g, b.data.shape),
        ),
    )


@_register("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return Tensor(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g, a.data.shape),
            lambda g: _unbroadcast(-g, b.data.shape),
        ),
    )


@_register("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return Tensor(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.data.shape),
            lambda g: _unbroadcast(g * a.data, b.data.shape),
        ),
    )


@_register("div")
def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.data.shape),
            lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


@_register("neg")
def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(-a.data, (a,), (lambda g: -g,))


@_register("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValidationError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    out = a.data @ b.data
    return Tensor(
        out,
        (a, b),
        (
            lambda g: g @ b.data.T,
            lambda g: a.data.T @ g,
        ),
    )


@_register("transpose")
def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return Tensor(out, (a,), (lambda g: np.transpose(g, inv),))


@_register("reshape")
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape
    return Tensor(a.data.reshape(shape), (a,), (lambda g: g.reshape(orig),))


@_register("concat")
def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return Tensor(out, tuple(parts), tuple(make_vjp(i) for i in range(len(parts))))


@_register("narrow")
def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads."""
    a = as_tensor(a)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    out = a.data[tuple(index)]
    shape = a.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        full[tuple(index)] = g
        return full

    return Tensor(out, (a,), (vjp,))


@_register("gather_rows")
def gather_rows(table, idx) -> Tensor:
    """Row lookup `table[idx]`; backward scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]
    shape = table.data.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        np.add.at(full, idx, g)
        return full

    return Tensor(out, (table,), (vjp,))


@_register("where_mask")
def where_mask(mask: Array, a, fill: float) -> Tensor:
    """Select `a` where mask is true, a constant elsewhere.

    The constant branch carries no gradient, so masked-out positions are
    structurally disconnected from the output.
    """
    a = as_tensor(a)
    m = np.asarray(mask, dtype=bool)
    out = np.where(m, a.data, fill)
    return Tensor(out, (a,), (lambda g: np.where(m, g, 0.0),))


@_register("stop_gradient")
def stop_gradient(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(a.data.copy(), (a,), (lambda g: np.zeros_like(a.data),))


@_register("exp")
def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, (a,), (lambda g: g * out,))


@_register("log")
def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.data), (a,), (lambda g: g / a.data,))


@_register("sqrt")
def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return Tensor(out, (a,), (lambda g: g / (2.0 * out),))


@_register("tanh")
def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor(out, (a,), (lambda g: g * (1.0 - out * out),))


@_register("abs")
def abs_(a) -> Tensor:
    """Elementwise absolute value; subgradient 0 at the origin."""
    a = as_tensor(a)
    return Tensor(np.abs(a.data), (a,), (lambda g: g * np.sign(a.data),))


@_register("clip01")
def clip01(a) -> Tensor:
    """Clamp to [0, 1]; gradient passes inside the interval, zero outside."""
    a = as_tensor(a)
    out = np.clip(a.data, 0.0, 1.0)
    inside = (a.data >= 0.0) & (a.data <= 1.0)
    return Tensor(out, (a,), (lambda g: g * inside,))


@_register("sum")
def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def vjp(g):
        g = np.asarray(g, dtype=np.float64)
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Tensor(out, (a,), (vjp,))


@_register("mean")
def mean_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    shape = a.data.shape
    n = a.data.size if axis is None else shape[axis]

    def vjp(g):
        g = np.asarray(g, dtype=np.float64) / n
        if axis is None:
            return np.broadcast_to(g, shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return Tensor(out, (a,), (vjp,))


@_register("row_softmax")
def row_softmax(a) -> Tensor:
    """Numerically stable softmax along the last axis of a 2-D tensor.

    Rows may contain -inf entries (attention masking); those positions get
    probability exactly 0.0 and zero gradient.
    """
    a = as_tensor(a)
    x = a.data
    if x.ndim != 2:
        raise ValidationError(f"row_softmax expects a 2-D tensor, got {x.shape}")
    shifted = x - np.max(x, axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=1, keepdims=True)

    def vjp(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return y * (g - dot)

    return Tensor(y, (a,), (vjp,))


@_register("row_log_softmax")
def row_log_softmax(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if x.ndim != 2:
        raise ValidationError(f"row_log_softmax expects a 2-D tensor, got {x.shape}")
    m = np.max(x, axis=1, keepdims=True)
    shifted = x - m
    lse = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def vjp(g):
        return g - soft * np.sum(g, axis=1, keepdims=True)

    return Tensor(out, (a,), (vjp,))


@_register("l2_normalize_rows")
def l2_normalize_rows(a) -> Tensor:
    """Row-wise x / ||x||_2. The zero row maps to zero with zero gradient
    (documented singularity)."""
    a = as_tensor(a)
    x = a.data
    if x.ndim != 2:
        raise ValidationError(f"l2_normalize_rows expects a 2-D tensor, got {x.shape}")
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    nonzero = norms > 0.0
    safe = np.where(nonzero, norms, 1.0)
    y = np.where(nonzero, x / safe, 0.0)

    def vjp(g):
        dot = np.sum(g * y, axis=1, keepdims=True)
        return np.where(nonzero, (g - y * dot) / safe, 0.0)

    return Tensor(y, (a,), (vjp,))


# ---------------------------------------------------------------------------
# Registered composites (built from the primitives above; their gradients
# fall out of the chain rule and are covered by the same finite-difference
# verification)
# ---------------------------------------------------------------------------


@_register("cosine_rows")
def cosine_rows(a, b) -> Tensor:
    """Row-wise cosine similarity of two N x D tensors, returning N values."""
    an = l2_normalize_rows(a)
    bn = l2_normalize_rows(b)
    return sum_(mul(an, bn), axis=1)


@_register("masked_sum")
def masked_sum(x, mask) -> Tensor:
    """Sum of x over positions where the constant mask is nonzero."""
    m = np.asarray(mask, dtype=np.float64)
    return sum_(mul(x, m))


@_register("masked_mean")
def masked_mean(x, mask, eps: float = 1e-8) -> Tensor:
    """sum(mask * x) / (sum(mask) + eps); eps guards empty masks."""
    m = np.asarray(mask, dtype=np.float64)
    denom = float(np.sum(m)) + eps
    return div(sum_(mul(x, m)), denom)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x) -> Tensor:
    """tanh-form GELU."""
    x = as_tensor(x)
    inner = mul(_GELU_C, add(x, mul(0.044715, mul(x, mul(x, x)))))
    return mul(0.5, mul(x, add(1.0, tanh(inner))))


# ---------------------------------------------------------------------------
# Evaluation, finite differences, gradient checking
# ---------------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    """Deterministic post-order over the graph reachable from root."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def evaluate_with_grad(f, inputs: Sequence) -> tuple[float, list[Array]]:
    """Evaluate a scalar-valued graph function and its exact gradients.

    `f` receives one Tensor per entry of `inputs` and must return a
    single-element Tensor built from registered primitives.
    """
    leaves = [Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]
    out = f(*leaves)
    if not isinstance(out, Tensor):
        raise ValidationError("graph function must return a Tensor")
    if out.data.size != 1:
        raise ValidationError(
            f"contract violation: output must be scalar, got shape {out.data.shape}"
        )
    order = _topo_order(out)
    for node in order:
        node.grad = None
    out.grad = np.ones_like(out.data)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64, copy=True)
            else:
                parent.grad = parent.grad + contrib
    value = float(out.data.reshape(()))
    grads = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]
    return value, grads


def evaluate(f, inputs: Sequence) -> float:
    """Forward-only scalar evaluation of a graph function."""
    leaves = [Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]
    out = f(*leaves)
    return float(out.data.reshape(()))


def finite_diff_grad(f, inputs: Sequence, epsilon: float = 1e-6) -> list[Array]:
    """Central-difference gradient estimate, one coordinate at a time."""
    if epsilon <= 0:
        raise ValidationError("epsilon must be positive")
    arrays = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    grads = []
    for i, base in enumerate(arrays):
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            f_plus = evaluate(f, arrays)
            flat[j] = orig - epsilon
            f_minus = evaluate(f, arrays)
            flat[j] = orig
            gflat[j] = (f_plus - f_minus) / (2.0 * epsilon)
        grads.append(g)
    return grads


@dataclass
class GradReport:
    """Outcome of comparing reverse-mode gradients against finite differences."""

    passed: bool
    max_rel_error: float
    max_abs_error: float
    worst_input: int
    worst_coord: tuple[int, ...]
    rel_tol: float

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel={self.max_rel_error:.3e} "
            f"max_abs={self.max_abs_error:.3e} "
            f"worst=input[{self.worst_input}]{list(self.worst_coord)}"
        )


# Relative errors for near-zero gradient pairs degenerate; below this scale
# the comparison is effectively absolute.
_REL_FLOOR = 1e-4


def grad_check(f, inputs: Sequence, rel_tol: float = 1e-4,
               epsilon: float = 1e-6) -> GradReport:
    """Compare evaluate_with_grad against finite_diff_grad coordinate-wise."""
    if rel_tol <= 0:
        raise ValidationError("rel_tol must be positive")
    _, analytic = evaluate_with_grad(f, inputs)
    numeric = finite_diff_grad(f, inputs, epsilon=epsilon)
    max_rel = 0.0
    max_abs = 0.0
    worst_input = 0
    worst_coord: tuple[int, ...] = ()
    for i, (a, n) in enumerate(zip(analytic, numeric)):
        abs_err = np.abs(a - n)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), _REL_FLOOR)
        rel_err = abs_err / denom
        max_abs = max(max_abs, float(abs_err.max(initial=0.0)))
        if rel_err.size and float(rel_err.max()) > max_rel:
            max_rel = float(rel_err.max())
            worst_input = i
            worst_coord = tuple(
                int(c) for c in np.unravel_index(int(np.argmax(rel_err)), a.shape)
            )
    return GradReport(
        passed=max_rel < rel_tol,
        max_rel_error=max_rel,
        max_abs_error=max_abs,
        worst_input=worst_input,
        worst_coord=worst_coord,
        rel_tol=rel_tol,
    )


def tensor_to_text(t: Tensor | Array, precision: int = 8) -> str:
    """Plain-text dump of a tensor for debugging."""
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    body = np.array2string(
        data, precision=precision, suppress_small=False, threshold=10_000
    )
    return f"shape={tuple(data.shape)}\n{body}\n"
