"""Reverse-mode differentiation over dense float64 arrays.

A small define-by-run graph: every primitive evaluates eagerly and records
vector-Jacobian closures for its inputs. The primitive set is exactly what
the variational objectives in this package need (elementwise arithmetic with
broadcasting, matmul, reductions, Cholesky, triangular solves and a handful
of structural ops); it is not a general-purpose autodiff system.

All values are float64. Gradients are accumulated on each node's ``grad``
attribute during :func:`gradient` and have the same shape as the node value.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular as _solve_triangular
from scipy.linalg.lapack import dtrtri

from .errors import ContractError, DecompositionError, ShapeMismatchError

__all__ = [
    "Tensor",
    "PsdFactor",
    "parameter",
    "constant",
    "as_tensor",
    "evaluate",
    "gradient",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "exp",
    "log",
    "sqrt",
    "square",
    "reduce_sum",
    "concat",
    "col_sumsq",
    "quadratic_diag",
    "diag_part",
    "diag_embed",
    "tril",
    "clip_min",
    "safe_cholesky",
    "triangular_solve",
    "fast_solves",
    "scatter_column",
    "gaussian_kl",
    "gaussian_kl_from_factors",
]

# Jitter ladder for PSD repair, as multiples of the mean diagonal.
CHOLESKY_JITTERS = (0.0, 1e-8, 1e-6, 1e-4)


class Tensor:
    """One node of the computation graph."""

    __slots__ = ("value", "op", "inputs", "grad", "needs_grad", "_vjps", "_multi_vjp", "_cache")

    def __init__(self, value, op="const", inputs=(), vjps=(), needs_grad=None, multi_vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.op = op
        self.inputs = tuple(inputs)
        self._vjps = tuple(vjps)
        self._multi_vjp = multi_vjp
        self.grad = None
        self._cache = None
        if needs_grad is None:
            needs_grad = any(t.needs_grad for t in self.inputs)
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # Operator sugar; scalars and ndarrays are wrapped as constants.
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

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.value.shape})"


def parameter(value):
    """Trainable leaf; `gradient` reports derivatives with respect to it."""
    return Tensor(np.array(value, dtype=np.float64), op="leaf", needs_grad=True)


def constant(value):
    """Non-trainable leaf."""
    return Tensor(value, op="const", needs_grad=False)


def as_tensor(value):
    return value if isinstance(value, Tensor) else constant(value)


def evaluate(root):
    """Value of a node. Eager execution makes this a plain accessor."""
    return root.value


def _toposort(root):
    """Iterative post-order over the subgraph that needs gradients."""
    order = []
    seen = set()
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
        for parent in node.inputs:
            if parent.needs_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def gradient(root, leaves):
    """Reverse-mode derivatives of a scalar ``root`` for each leaf.

    Returns one array per leaf, shaped like the leaf value; leaves the
    accumulated ``grad`` attribute in place on every reachable node.
    """
    if root.value.size != 1:
        raise ContractError(f"gradient root must be scalar, got shape {root.value.shape}")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None:
            continue
        if node._multi_vjp is not None:
            contributions = node._multi_vjp(node.grad)
            for parent, contribution in zip(node.inputs, contributions):
                if parent.needs_grad and contribution is not None:
                    _accumulate(parent, contribution, node.grad)
            continue
        for parent, vjp in zip(node.inputs, node._vjps):
            if not parent.needs_grad or vjp is None:
                continue
            _accumulate(parent, vjp(node.grad), node.grad)
    out = []
    for leaf in leaves:
        out.append(leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
    return out


def _accumulate(parent, contribution, upstream):
    if parent.grad is None:
        # Take ownership of freshly allocated arrays; copy anything that may
        # alias the upstream gradient or another buffer (views, broadcasts).
        if contribution is upstream or contribution.base is not None or contribution.dtype != np.float64:
            contribution = np.array(contribution, dtype=np.float64)
        parent.grad = contribution
    else:
        parent.grad += contribution


def _unbroadcast(grad, shape):
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.value, b.value)
    return Tensor(
        a.value + b.value,
        op="add",
        inputs=(a, b),
        vjps=(
            lambda g, sa=a.value.shape: _unbroadcast(g, sa),
            lambda g, sb=b.value.shape: _unbroadcast(g, sb),
        ),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.value, b.value)
    return Tensor(
        a.value - b.value,
        op="sub",
        inputs=(a, b),
        vjps=(
            lambda g, sa=a.value.shape: _unbroadcast(g, sa),
            lambda g, sb=b.value.shape: _unbroadcast(-g, sb),
        ),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.value, b.value)
    return Tensor(
        a.value * b.value,
        op="mul",
        inputs=(a, b),
        vjps=(
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.value, b.value)
    out = a.value / b.value
    return Tensor(
        out,
        op="div",
        inputs=(a, b),
        vjps=(
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * out / b.value, b.value.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return Tensor(-a.value, op="neg", inputs=(a,), vjps=(lambda g: -g,))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return Tensor(
        a.value @ b.value,
        op="matmul",
        inputs=(a, b),
        vjps=(
            lambda g: g @ b.value.T,
            lambda g: a.value.T @ g,
        ),
    )


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape, ("n", "m"))
    return Tensor(a.value.T.copy(), op="transpose", inputs=(a,), vjps=(lambda g: g.T,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, op="exp", inputs=(a,), vjps=(lambda g: g * out,))


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.value), op="log", inputs=(a,), vjps=(lambda g: g / a.value,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return Tensor(out, op="sqrt", inputs=(a,), vjps=(lambda g: g * (0.5 / out),))


def square(a):
    a = as_tensor(a)
    return Tensor(a.value**2, op="square", inputs=(a,), vjps=(lambda g: g * (2.0 * a.value),))


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g, shape=a.value.shape):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return Tensor(out, op="sum", inputs=(a,), vjps=(vjp,))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def make_vjp(i):
        lo, hi = offsets[i], offsets[i + 1]

        def vjp(g):
            index = [slice(None)] * g.ndim
            index[axis] = slice(lo, hi)
            return g[tuple(index)]

        return vjp

    return Tensor(
        np.concatenate([t.value for t in tensors], axis=axis),
        op="concat",
        inputs=tuple(tensors),
        vjps=tuple(make_vjp(i) for i in range(len(tensors))),
    )


def col_sumsq(a):
    """Column vector of sums of squares down each column: (m, n) -> (n, 1)."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError("col_sumsq", a.shape, ("m", "n"))
    out = np.einsum("ij,ij->j", a.value, a.value).reshape(-1, 1)

    def vjp(g):
        return a.value * (2.0 * g.reshape(1, -1))

    return Tensor(out, op="reduce", inputs=(a,), vjps=(vjp,))


def quadratic_diag(p, a):
    """diag(A^T P A) as an (n, 1) column, for symmetric P.

    Fusing the product with the reduction avoids materializing gradients of
    the intermediate P A; the pullback to A reuses the stored product. The
    symmetry of P is assumed, not checked.
    """
    p, a = as_tensor(p), as_tensor(a)
    if p.ndim != 2 or p.shape[0] != p.shape[1] or a.ndim != 2 or a.shape[0] != p.shape[0]:
        raise ShapeMismatchError("quadratic_diag", p.shape, a.shape)
    w = p.value @ a.value
    out = np.einsum("ij,ij->j", a.value, w).reshape(-1, 1)

    def multi_vjp(g):
        row = g.reshape(1, -1)
        gp = None
        ga = None
        if p.needs_grad:
            gp = (a.value * row) @ a.value.T
        if a.needs_grad:
            ga = w * (2.0 * row)
        return (gp, ga)

    return Tensor(out, op="reduce", inputs=(p, a), multi_vjp=multi_vjp)


def diag_part(a):
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError("diag_part", a.shape, ("n", "n"))
    n = a.shape[0]

    def vjp(g):
        out = np.zeros((n, n))
        np.fill_diagonal(out, g)
        return out

    return Tensor(np.diagonal(a.value).copy(), op="diag", inputs=(a,), vjps=(vjp,))


def diag_embed(v):
    v = as_tensor(v)
    if v.ndim != 1:
        raise ShapeMismatchError("diag_embed", v.shape, ("n",))
    return Tensor(np.diag(v.value), op="diag_embed", inputs=(v,), vjps=(lambda g: np.diagonal(g).copy(),))


def tril(a, k=0):
    a = as_tensor(a)
    return Tensor(np.tril(a.value, k), op="tril", inputs=(a,), vjps=(lambda g: np.tril(g, k),))


def clip_min(a, floor):
    """Elementwise max(a, floor); gradient passes only where unclipped."""
    a = as_tensor(a)
    keep = a.value > floor
    return Tensor(np.maximum(a.value, floor), op="clip_min", inputs=(a,), vjps=(lambda g: g * keep,))


class PsdFactor:
    """Lower-triangular Cholesky factor plus the stabilizing jitter used."""

    __slots__ = ("lower", "jitter_used")

    def __init__(self, lower, jitter_used):
        self.lower = lower
        self.jitter_used = float(jitter_used)


def _phi(x):
    """Lower triangle with halved diagonal, as used by the Cholesky pullback."""
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def safe_cholesky(a):
    """Cholesky factorization with an escalating jitter ladder.

    The input is symmetrized before factorizing, and jitter multiples of the
    mean diagonal (0, 1e-8, 1e-6, 1e-4) are tried in order. Raises
    :class:`DecompositionError` with condition diagnostics if all fail.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatchError("cholesky", a.shape, ("n", "n"))
    value = a.value
    scale = max(1.0, float(np.max(np.abs(value))) if value.size else 1.0)
    asym = float(np.max(np.abs(value - value.T))) if value.size else 0.0
    if asym > 1e-10 * scale:
        raise ContractError(f"safe_cholesky input asymmetric: max|A - A^T| = {asym:.3e}")
    sym = 0.5 * (value + value.T)
    mean_diag = float(np.mean(np.diagonal(sym))) if sym.size else 0.0
    base = mean_diag if mean_diag > 0 else 1.0
    n = sym.shape[0]
    lower = None
    jitter_used = 0.0
    for level in CHOLESKY_JITTERS:
        jitter_used = level * base
        try:
            lower = np.linalg.cholesky(sym + jitter_used * np.eye(n))
            break
        except np.linalg.LinAlgError:
            continue
    if lower is None:
        eigs = np.linalg.eigvalsh(sym)
        raise DecompositionError(
            "cholesky failed at maximum jitter",
            diagnostics={
                "max_jitter": CHOLESKY_JITTERS[-1] * base,
                "min_eig": float(eigs[0]),
                "max_eig": float(eigs[-1]),
                "mean_diag": mean_diag,
            },
        )

    def vjp(g, lower=lower):
        # Standard Cholesky pullback; symmetrized to match the symmetrized input.
        p = _phi(lower.T @ g)
        w = _solve_triangular(lower, p, lower=True, trans=1, check_finite=False)
        full = _solve_triangular(lower, w.T, lower=True, trans=1, check_finite=False).T
        return 0.5 * (full + full.T)

    node = Tensor(lower, op="cholesky", inputs=(a,), vjps=(vjp,))
    return PsdFactor(node, jitter_used)


_FAST_SOLVES = False


class fast_solves:
    """Context that lets solves against a factor reuse its explicit inverse.

    Inside the context, ``triangular_solve`` multiplies by a cached inverse
    of the triangular factor instead of calling a backward-stable solve.
    That trades a few digits of accuracy (fine for stochastic training) for
    a substantially cheaper matrix product, and keeps forward and backward
    passes numerically consistent with each other. Prediction paths should
    stay outside the context.
    """

    def __enter__(self):
        global _FAST_SOLVES
        self._prev = _FAST_SOLVES
        _FAST_SOLVES = True
        return self

    def __exit__(self, *exc):
        global _FAST_SOLVES
        _FAST_SOLVES = self._prev
        return False


def _triangular_inverse(l_node, lower):
    cache = l_node._cache
    if cache is None:
        cache = l_node._cache = {}
    inv = cache.get("tri_inv")
    if inv is None:
        inv, info = dtrtri(l_node.value, lower=1 if lower else 0)
        if info != 0:
            raise DecompositionError("triangular inverse failed", diagnostics={"info": int(info)})
        cache["tri_inv"] = inv
    return inv


def triangular_solve(l, b, lower=True, trans=False):
    """Solve op(L) X = B where op is identity or transpose."""
    l, b = as_tensor(l), as_tensor(b)
    if l.ndim != 2 or l.shape[0] != l.shape[1] or b.shape[0] != l.shape[0]:
        raise ShapeMismatchError("triangular_solve", l.shape, b.shape)
    fast = _FAST_SOLVES
    if fast:
        inv = _triangular_inverse(l, lower)
        x = (inv.T if trans else inv) @ b.value
    else:
        x = _solve_triangular(l.value, b.value, lower=lower, trans=1 if trans else 0, check_finite=False)
    mask = np.tril if lower else np.triu

    def multi_vjp(g):
        # The adjoint of B is reused for the adjoint of L; compute it once.
        if fast:
            inv = _triangular_inverse(l, lower)
            gb = (inv if trans else inv.T) @ g
        else:
            gb = _solve_triangular(l.value, g, lower=lower, trans=0 if trans else 1, check_finite=False)
        gl = None
        if l.needs_grad:
            full = -np.outer(gb, x) if gb.ndim == 1 else -gb @ x.T
            if trans:
                full = full.T
            gl = mask(full)
        return (gl, gb)

    return Tensor(x, op="triangular_solve", inputs=(l, b), multi_vjp=multi_vjp)


def scatter_column(base, col, values, row_mask):
    """Copy of ``base`` with column ``col`` set to ``values`` on masked rows.

    ``values`` is an (n, 1) node; rows outside ``row_mask`` keep the base
    entries. Gradients route to the base except at overwritten cells, which
    route to ``values``.
    """
    base, values = as_tensor(base), as_tensor(values)
    row_mask = np.asarray(row_mask, dtype=bool).reshape(-1)
    if base.ndim != 2 or values.shape != (base.shape[0], 1) or row_mask.size != base.shape[0]:
        raise ShapeMismatchError("scatter_column", base.shape, values.shape)
    out = base.value.copy()
    out[row_mask, col] = values.value[row_mask, 0]

    def multi_vjp(g):
        g_base = None
        g_values = None
        if base.needs_grad:
            g_base = g.copy()
            g_base[row_mask, col] = 0.0
        if values.needs_grad:
            g_values = np.zeros_like(values.value)
            g_values[row_mask, 0] = g[row_mask, col]
        return (g_base, g_values)

    return Tensor(out, op="scatter_column", inputs=(base, values), multi_vjp=multi_vjp)


def _as_column(t):
    t = as_tensor(t)
    if t.ndim == 1:
        return Tensor(t.value.reshape(-1, 1), op="reshape", inputs=(t,), vjps=(lambda g: g.reshape(-1),))
    return t


def gaussian_kl_from_factors(r, s_lower, m, k_lower):
    """KL between Gaussians given Cholesky factors of their covariances.

    KL[N(r, Ls Ls^T) || N(m, Lk Lk^T)], computed without explicit inverses:
    trace and quadratic terms come from triangular solves, log-determinants
    from factor diagonals.
    """
    r, m = _as_column(r), _as_column(m)
    s_lower, k_lower = as_tensor(s_lower), as_tensor(k_lower)
    dim = s_lower.shape[0]
    if k_lower.shape[0] != dim or r.shape[0] != dim or m.shape[0] != dim:
        raise ShapeMismatchError("gaussian_kl", s_lower.shape, k_lower.shape)
    a = triangular_solve(k_lower, s_lower, lower=True)
    b = triangular_solve(k_lower, sub(m, r), lower=True)
    trace_term = reduce_sum(square(a))
    quad_term = reduce_sum(square(b))
    logdet_k = reduce_sum(log(diag_part(k_lower)))
    logdet_s = reduce_sum(log(diag_part(s_lower)))
    return add(
        sub(add(mul(0.5, trace_term), mul(0.5, quad_term)), constant(0.5 * dim)),
        sub(logdet_k, logdet_s),
    )


def gaussian_kl(r, s, m, k):
    """Closed-form KL[N(r, S) || N(m, K)] for positive-definite S and K."""
    s, k = as_tensor(s), as_tensor(k)
    if s.shape != k.shape:
        raise ShapeMismatchError("gaussian_kl", s.shape, k.shape)
    ls = safe_cholesky(s).lower
    lk = safe_cholesky(k).lower
    return gaussian_kl_from_factors(r, ls, m, lk)
