"""Forward-mode automatic differentiation.

Two number types are provided. :class:`Dual` carries a value and a stack of
tangents (one per seed direction) and gives first derivatives. :class:`Taylor2`
additionally carries a Hessian and is used for Lagrangian second derivatives.
Both broadcast over leading numpy axes, so a single evaluation can process
every collocation node of a trajectory at once.

The supported primitives are ``+``, ``-``, ``*``, ``/``, constant powers,
:func:`exp`, :func:`log` and :func:`sqrt`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp


class DomainError(ArithmeticError):
    """Raised when a primitive is evaluated outside its domain."""


class PatternError(ValueError):
    """Raised when a declared sparsity pattern misses numerical nonzeros."""


def _value(a):
    return a.value if isinstance(a, (Dual, Taylor2)) else a


def _check_nonzero(v):
    if np.any(np.asarray(v) == 0.0):
        raise DomainError("division by zero")


class Dual:
    """Value with ``k`` tangent directions stacked along the last axis."""

    __slots__ = ("value", "tangent")
    __array_ufunc__ = None

    def __init__(self, value, tangent):
        self.value = np.asarray(value, dtype=float)
        self.tangent = np.asarray(tangent, dtype=float)

    @property
    def n_tangents(self):
        return self.tangent.shape[-1]

    def _coerce(self, other):
        if isinstance(other, Dual):
            return other
        v = np.asarray(other, dtype=float)
        return Dual(v, np.zeros(v.shape + (self.n_tangents,)))

    def __add__(self, other):
        if not isinstance(other, Dual):
            return Dual(self.value + other, self.tangent)
        return Dual(self.value + other.value, self.tangent + other.tangent)

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Dual):
            return Dual(self.value - other, self.tangent)
        return Dual(self.value - other.value, self.tangent - other.tangent)

    def __rsub__(self, other):
        return Dual(other - self.value, -self.tangent)

    def __neg__(self):
        return Dual(-self.value, -self.tangent)

    def __pos__(self):
        return self

    def __mul__(self, other):
        if not isinstance(other, Dual):
            o = np.asarray(other, dtype=float)
            return Dual(self.value * o, self.tangent * o[..., None])
        return Dual(
            self.value * other.value,
            self.tangent * other.value[..., None] + other.tangent * self.value[..., None],
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not isinstance(other, Dual):
            o = np.asarray(other, dtype=float)
            _check_nonzero(o)
            return Dual(self.value / o, self.tangent / o[..., None])
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def reciprocal(self):
        _check_nonzero(self.value)
        r = 1.0 / self.value
        return Dual(r, -self.tangent * (r * r)[..., None])

    def __pow__(self, p):
        if isinstance(p, Dual):
            raise TypeError("only constant exponents are supported")
        if p == 2:
            return self * self
        v = self.value ** p
        d = p * self.value ** (p - 1)
        return Dual(v, self.tangent * d[..., None])

    def exp(self):
        v = np.exp(self.value)
        return Dual(v, self.tangent * v[..., None])

    def log(self):
        if np.any(self.value <= 0):
            raise DomainError("log of non-positive value")
        return Dual(np.log(self.value), self.tangent / self.value[..., None])

    def sqrt(self):
        if np.any(self.value < 0):
            raise DomainError("sqrt of negative value")
        v = np.sqrt(self.value)
        return Dual(v, self.tangent * (0.5 / v)[..., None])

    def __getitem__(self, idx):
        return Dual(self.value[idx], self.tangent[idx])

    def __len__(self):
        return len(self.value)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def __repr__(self):
        return f"Dual(value={self.value!r}, tangent={self.tangent!r})"


class Taylor2:
    """Second-order forward-mode number: value, gradient and Hessian.

    ``grad`` has shape ``value.shape + (k,)`` and ``hess`` has shape
    ``value.shape + (k, k)``.
    """

    __slots__ = ("value", "grad", "hess")
    __array_ufunc__ = None

    def __init__(self, value, grad, hess):
        self.value = np.asarray(value, dtype=float)
        self.grad = np.asarray(grad, dtype=float)
        self.hess = np.asarray(hess, dtype=float)

    def __add__(self, other):
        if not isinstance(other, Taylor2):
            return Taylor2(self.value + other, self.grad, self.hess)
        return Taylor2(self.value + other.value, self.grad + other.grad, self.hess + other.hess)

    __radd__ = __add__

    def __sub__(self, other):
        if not isinstance(other, Taylor2):
            return Taylor2(self.value - other, self.grad, self.hess)
        return Taylor2(self.value - other.value, self.grad - other.grad, self.hess - other.hess)

    def __rsub__(self, other):
        return Taylor2(other - self.value, -self.grad, -self.hess)

    def __neg__(self):
        return Taylor2(-self.value, -self.grad, -self.hess)

    def __pos__(self):
        return self

    def _scale(self, o):
        o = np.asarray(o, dtype=float)
        return Taylor2(self.value * o, self.grad * o[..., None], self.hess * o[..., None, None])

    def __mul__(self, other):
        if not isinstance(other, Taylor2):
            return self._scale(other)
        a, b = self, other
        cross = a.grad[..., :, None] * b.grad[..., None, :]
        return Taylor2(
            a.value * b.value,
            a.grad * b.value[..., None] + b.grad * a.value[..., None],
            a.hess * b.value[..., None, None]
            + b.hess * a.value[..., None, None]
            + cross
            + np.swapaxes(cross, -1, -2),
        )

    __rmul__ = __mul__

    def _chain(self, f0, f1, f2):
        # f(a) with f', f'' given elementwise
        outer = self.grad[..., :, None] * self.grad[..., None, :]
        return Taylor2(
            f0,
            self.grad * f1[..., None],
            self.hess * f1[..., None, None] + outer * f2[..., None, None],
        )

    def reciprocal(self):
        _check_nonzero(self.value)
        r = 1.0 / self.value
        return self._chain(r, -r * r, 2.0 * r * r * r)

    def __truediv__(self, other):
        if not isinstance(other, Taylor2):
            o = np.asarray(other, dtype=float)
            _check_nonzero(o)
            return self._scale(1.0 / o)
        return self * other.reciprocal()

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def __pow__(self, p):
        if isinstance(p, Taylor2):
            raise TypeError("only constant exponents are supported")
        if p == 2:
            return self * self
        v = self.value
        return self._chain(v ** p, p * v ** (p - 1), p * (p - 1) * v ** (p - 2))

    def exp(self):
        v = np.exp(self.value)
        return self._chain(v, v, v)

    def log(self):
        if np.any(self.value <= 0):
            raise DomainError("log of non-positive value")
        r = 1.0 / self.value
        return self._chain(np.log(self.value), r, -r * r)

    def sqrt(self):
        if np.any(self.value <= 0):
            raise DomainError("sqrt of non-positive value")
        s = np.sqrt(self.value)
        return self._chain(s, 0.5 / s, -0.25 / (s * self.value))

    def __getitem__(self, idx):
        return Taylor2(self.value[idx], self.grad[idx], self.hess[idx])

    def __len__(self):
        return len(self.value)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def exp(a):
    if isinstance(a, (Dual, Taylor2)):
        return a.exp()
    return np.exp(a)


def log(a):
    if isinstance(a, (Dual, Taylor2)):
        return a.log()
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise DomainError("log of non-positive value")
    return np.log(a)


def sqrt(a):
    if isinstance(a, (Dual, Taylor2)):
        return a.sqrt()
    a = np.asarray(a, dtype=float)
    if np.any(a < 0):
        raise DomainError("sqrt of negative value")
    return np.sqrt(a)


def value_of(a):
    """Strip derivative information (no-op on plain numbers)."""
    return np.asarray(_value(a), dtype=float)


# --- seeding ---------------------------------------------------------------

def seed_dual(X, seeds=None):
    """Seed the columns of ``X`` (shape ``(..., n)``) as independent variables.

    Returns a list of ``n`` :class:`Dual` objects, one per column. ``seeds`` is
    an ``(n, k)`` matrix of tangent directions (identity by default).
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[-1]
    S = np.eye(n) if seeds is None else np.asarray(seeds, dtype=float)
    lead = X.shape[:-1]
    return [Dual(X[..., i], np.broadcast_to(S[i], lead + S[i].shape)) for i in range(n)]


def seed_taylor2(X):
    """Like :func:`seed_dual` but returns :class:`Taylor2` variables."""
    X = np.asarray(X, dtype=float)
    n = X.shape[-1]
    lead = X.shape[:-1]
    eye = np.eye(n)
    zero_h = np.zeros(lead + (n, n))
    return [Taylor2(X[..., i], np.broadcast_to(eye[i], lead + (n,)), zero_h) for i in range(n)]


def _as_dual_vector(y, k):
    """Stack a function output (Dual, sequence of Dual/float, array) into one Dual."""
    if isinstance(y, Dual):
        return y
    if isinstance(y, (list, tuple)):
        parts = [p if isinstance(p, Dual) else Dual(p, np.zeros(np.shape(p) + (k,))) for p in y]
        return Dual(
            np.stack([p.value for p in parts]),
            np.stack([np.broadcast_to(p.tangent, p.value.shape + (k,)) for p in parts]),
        )
    v = np.asarray(y, dtype=float)
    return Dual(v, np.zeros(v.shape + (k,)))


# --- derivatives -----------------------------------------------------------

def directional_derivative(f, x, v):
    """Return ``(f(x), J_f(x) @ v)`` from one forward pass.

    ``f`` maps a sequence of scalars (a 1-D array) to a scalar or 1-D
    sequence and must be built from the supported primitives.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if x.shape != v.shape:
        raise ValueError(f"point and direction shapes differ: {x.shape} vs {v.shape}")
    y = _as_dual_vector(f(Dual(x, v[:, None])), 1)
    return y.value, y.tangent[..., 0]


@dataclass(frozen=True)
class SparsityPattern:
    """Structural nonzeros of an ``m x n`` Jacobian."""

    rows: np.ndarray
    cols: np.ndarray
    shape: tuple

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64)
        cols = np.asarray(self.cols, dtype=np.int64)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        m, n = self.shape
        if rows.shape != cols.shape:
            raise ValueError("rows and cols must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= m or cols.min() < 0 or cols.max() >= n):
            raise ValueError("pattern index out of range")
        keys = rows * n + cols
        if np.unique(keys).size != keys.size:
            raise ValueError("duplicate (row, col) pair in pattern")

    @classmethod
    def from_dense(cls, mask):
        mask = np.asarray(mask, dtype=bool)
        r, c = np.nonzero(mask)
        return cls(r, c, mask.shape)

    def color_columns(self):
        """Greedy coloring of structurally orthogonal columns.

        Two columns conflict if they share a row. Returns ``(colors, n_colors)``.
        """
        m, n = self.shape
        A = sp.csc_matrix((np.ones(self.rows.size), (self.rows, self.cols)), shape=(m, n))
        Ar = A.tocsr()
        colors = np.full(n, -1, dtype=np.int64)
        for j in range(n):
            rows_j = A.indices[A.indptr[j]:A.indptr[j + 1]]
            used = set()
            for r in rows_j:
                nb = Ar.indices[Ar.indptr[r]:Ar.indptr[r + 1]]
                used.update(colors[nb][colors[nb] >= 0].tolist())
            c = 0
            while c in used:
                c += 1
            colors[j] = c
        n_colors = int(colors.max()) + 1 if n else 0
        return colors, n_colors


@dataclass(frozen=True)
class SparseJacobian:
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray
    shape: tuple
    n_passes: int = field(default=0, compare=False)

    def to_scipy(self):
        return sp.csr_matrix((self.values, (self.rows, self.cols)), shape=self.shape)

    def to_dense(self):
        return self.to_scipy().toarray()


def jacobian(f, x, pattern=None, debug=False):
    """Jacobian of ``f`` at ``x`` by forward mode.

    Without a pattern every column gets its own seed. With a pattern,
    structurally orthogonal columns share a seed (greedy coloring), so a
    block-diagonal Jacobian with two column blocks needs two passes.
    In ``debug`` mode the full dense Jacobian is also computed and any entry
    larger than 1e-12 outside the pattern raises :class:`PatternError`.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    n = x.size
    if pattern is None:
        y = _as_dual_vector(f(Dual(x, np.eye(n))), n)
        T = np.atleast_2d(y.tangent.reshape(-1, n))
        r, c = np.nonzero(np.ones_like(T, dtype=bool))
        return SparseJacobian(r, c, T[r, c], T.shape, n_passes=n)

    colors, k = pattern.color_columns()
    seeds = np.zeros((n, max(k, 1)))
    seeds[np.arange(n), colors] = 1.0
    y = _as_dual_vector(f(Dual(x, seeds)), seeds.shape[1])
    T = y.tangent.reshape(-1, seeds.shape[1])
    if T.shape[0] != pattern.shape[0]:
        raise PatternError(f"function has {T.shape[0]} outputs, pattern declares {pattern.shape[0]}")
    vals = T[pattern.rows, colors[pattern.cols]]
    if debug:
        full = jacobian(f, x).to_dense()
        outside = full.copy()
        outside[pattern.rows, pattern.cols] = 0.0
        if np.any(np.abs(outside) > 1e-12):
            bad = np.argwhere(np.abs(outside) > 1e-12)[0]
            raise PatternError(f"nonzero entry {tuple(bad)} outside declared pattern")
    return SparseJacobian(pattern.rows, pattern.cols, vals, pattern.shape, n_passes=k)


def hessian(f, x):
    """Dense Hessian of a scalar function by second-order forward mode."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = f(_taylor_vector(x))
    if not isinstance(y, Taylor2):
        return np.zeros((x.size, x.size))
    return np.asarray(y.hess).reshape(x.size, x.size)


def _taylor_vector(x):
    n = x.size
    return Taylor2(x, np.eye(n), np.zeros((n, n, n)))


def fd_jacobian(f, x, step=1e-6):
    """Central-difference Jacobian, used as an independent cross-check."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cols = []
    for i in range(x.size):
        h = step * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        cols.append((np.asarray(f(xp), dtype=float) - np.asarray(f(xm), dtype=float)) / (2 * h))
    return np.stack(cols, axis=-1)
