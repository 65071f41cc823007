"""Evaluable phase-space symbols and their finite-order calculus.

A symbol term is a complex scalar field ``a(y, xi)`` on a box in phase space
``T^*R^n``. Arrays of points are passed with the coordinate index last, so
``y`` and ``xi`` have shape ``(..., n)``.

Derivatives come from one of three places, in order of preference: a sympy
expression (exact, any order), an explicit provider callable, or central
finite differences with step ``cbrt(eps) * max(1, |coordinate|)``.

Quantization is the standard (left) one, so the composition product is

    a # b = sum_alpha (1/alpha!) (h/i)^|alpha| d_xi^alpha a * d_y^alpha b.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np
import sympy as sp

from .errors import CapabilityError, DomainError, NumericalError

FD_STEP = np.cbrt(np.finfo(float).eps)
# nested central differences lose too many digits beyond this order
FD_MAX_ORDER = 2


@dataclass(frozen=True)
class PhasePoint:
    """A point ``(y, xi)`` of phase space; the last coordinate is the normal one."""

    y: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
        if y.shape != xi.shape or y.ndim != 1:
            raise DomainError(f"position and momentum dimensions differ: {y.shape} vs {xi.shape}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(xi))):
            raise DomainError("phase point has non-finite coordinates")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "xi", xi)

    @property
    def n(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class BoxRegion:
    """Axis-aligned box ``{y_lo <= y <= y_hi, xi_lo <= xi <= xi_hi}``."""

    y_lo: np.ndarray
    y_hi: np.ndarray
    xi_lo: np.ndarray
    xi_hi: np.ndarray

    def __post_init__(self):
        for name in ("y_lo", "y_hi", "xi_lo", "xi_hi"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))

    @classmethod
    def everywhere(cls, n: int) -> "BoxRegion":
        inf = np.full(n, np.inf)
        return cls(-inf, inf, -inf, inf)

    @classmethod
    def from_bounds(cls, y_bounds, xi_bounds) -> "BoxRegion":
        y_bounds = np.asarray(y_bounds, dtype=float).reshape(-1, 2)
        xi_bounds = np.asarray(xi_bounds, dtype=float).reshape(-1, 2)
        return cls(y_bounds[:, 0], y_bounds[:, 1], xi_bounds[:, 0], xi_bounds[:, 1])

    @property
    def n(self) -> int:
        return self.y_lo.size

    def contains(self, y, xi) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        xi = np.asarray(xi, dtype=float)
        inside = np.all((y >= self.y_lo) & (y <= self.y_hi), axis=-1)
        return inside & np.all((xi >= self.xi_lo) & (xi <= self.xi_hi), axis=-1)


def _multi_indices(n: int, order: int) -> Iterator[tuple[int, ...]]:
    """All multi-indices alpha in N^n with |alpha| == order."""
    for combo in itertools.combinations_with_replacement(range(n), order):
        alpha = [0] * n
        for k in combo:
            alpha[k] += 1
        yield tuple(alpha)


def _factorial(alpha: Sequence[int]) -> int:
    return math.prod(math.factorial(a) for a in alpha)


@lru_cache(maxsize=None)
def phase_variables(n: int) -> tuple[tuple[sp.Symbol, ...], tuple[sp.Symbol, ...]]:
    ys = sp.symbols(" ".join(f"y{k + 1}" for k in range(n)), real=True, seq=True)
    xis = sp.symbols(" ".join(f"xi{k + 1}" for k in range(n)), real=True, seq=True)
    return tuple(ys), tuple(xis)


class SymbolTerm:
    """A complex scalar field on phase space with access to its partial derivatives.

    Args:
        func: Vectorized callable ``func(y, xi)`` with ``y, xi`` of shape ``(..., n)``.
        n: Dimension of the base.
        expr: Optional sympy expression in ``y1..yn, xi1..xin``; enables exact
            derivatives of every order.
        derivative: Optional provider ``derivative(alpha_y, alpha_xi)`` returning a
            callable or ``SymbolTerm`` for that partial derivative, or ``None``.
        provided_order: Highest derivative order the provider supports.
        allow_fd: Fall back to central differences when no analytic derivative exists.
    """

    def __init__(
        self,
        func: Callable,
        n: int,
        *,
        expr: sp.Expr | None = None,
        derivative: Callable | None = None,
        provided_order: int = 0,
        allow_fd: bool = True,
        name: str = "",
    ):
        self._func = func
        self.n = int(n)
        self.expr = expr
        self._derivative = derivative
        self.provided_order = provided_order if derivative is not None else 0
        self.allow_fd = allow_fd
        self.name = name or (str(expr) if expr is not None else "term")
        self._cache: dict = {}

    def __repr__(self):
        return f"SymbolTerm({self.name!r}, n={self.n})"

    @classmethod
    def from_expr(cls, expr, n: int, name: str = "") -> "SymbolTerm":
        ys, xis = phase_variables(n)
        names = {s.name: s for s in ys + xis}
        expr = sp.sympify(expr, locals=names)
        # unify look-alike symbols created elsewhere without the real assumption
        expr = expr.subs({s: names[s.name] for s in expr.free_symbols if s.name in names and s != names[s.name]})
        fn = sp.lambdify(ys + xis, expr, modules="numpy")

        def func(y, xi):
            y = np.asarray(y, dtype=float)
            xi = np.asarray(xi, dtype=float)
            args = [y[..., k] for k in range(n)] + [xi[..., k] for k in range(n)]
            out = np.asarray(fn(*args), dtype=complex)
            return np.broadcast_to(out, y.shape[:-1]).copy() if out.shape != y.shape[:-1] else out

        return cls(func, n, expr=expr, name=name or str(expr))

    @classmethod
    def constant(cls, value: complex, n: int) -> "SymbolTerm":
        return cls.from_expr(sp.nsimplify(value) if isinstance(value, int) else sp.sympify(value), n)

    def __call__(self, y, xi) -> np.ndarray:
        return np.asarray(self._func(y, xi), dtype=complex)

    # ------------------------------------------------------------------ derivatives
    def max_order(self) -> float:
        if self.expr is not None:
            return math.inf
        fd = FD_MAX_ORDER if self.allow_fd else 0
        return max(self.provided_order, fd)

    def diff(self, alpha_y: Sequence[int] = (), alpha_xi: Sequence[int] = ()) -> "SymbolTerm":
        """The term ``d_y^alpha_y d_xi^alpha_xi a`` as a new ``SymbolTerm``."""
        ay = tuple(alpha_y) + (0,) * (self.n - len(alpha_y))
        ax = tuple(alpha_xi) + (0,) * (self.n - len(alpha_xi))
        order = sum(ay) + sum(ax)
        if order == 0:
            return self
        key = (ay, ax)
        if key in self._cache:
            return self._cache[key]
        if self.expr is not None:
            ys, xis = phase_variables(self.n)
            spec = [(v, k) for v, k in zip(ys + xis, ay + ax) if k]
            out = SymbolTerm.from_expr(sp.diff(self.expr, *spec), self.n)
        elif self._derivative is not None and order <= self.provided_order:
            d = self._derivative(ay, ax)
            if d is None:
                raise NumericalError(f"derivative {key} not supplied for {self.name}")
            out = d if isinstance(d, SymbolTerm) else SymbolTerm(d, self.n, allow_fd=self.allow_fd)
        elif self.allow_fd and order <= self.max_order():
            out = self._fd_term(ay, ax)
        elif not self.allow_fd and self._derivative is None:
            raise NumericalError(f"no derivatives available for {self.name}")
        else:
            raise CapabilityError(
                f"derivative of order {order} exceeds available order {self.max_order()} for {self.name}"
            )
        self._cache[key] = out
        return out

    def _fd_term(self, ay, ax) -> "SymbolTerm":
        # peel one unit of differentiation, recurse on the remainder
        axis = next(k for k, v in enumerate(ay + ax) if v)
        rest = list(ay + ax)
        rest[axis] -= 1
        lower = self.diff(rest[: self.n], rest[self.n:]) if sum(rest) else self
        in_y = axis < self.n
        k = axis if in_y else axis - self.n

        def func(y, xi):
            y = np.array(y, dtype=float)
            xi = np.array(xi, dtype=float)
            coord = y if in_y else xi
            c = coord[..., k]
            step = FD_STEP * np.maximum(1.0, np.abs(c))
            if np.any((c + step) == c) or not np.all(np.isfinite(step)):
                raise NumericalError("finite-difference step underflow")
            plus = coord.copy()
            minus = coord.copy()
            plus[..., k] = c + step
            minus[..., k] = c - step
            width = plus[..., k] - minus[..., k]
            if in_y:
                return (lower(plus, xi) - lower(minus, xi)) / width
            return (lower(y, plus) - lower(y, minus)) / width

        return SymbolTerm(func, self.n, allow_fd=True, name=f"fd({self.name})")

    def gradient(self, y, xi) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(d_y a, d_xi a)`` stacked along a trailing axis of length n."""
        n = self.n
        unit = np.eye(n, dtype=int)
        dy = np.stack([self.diff(unit[k], ())(y, xi) for k in range(n)], axis=-1)
        dxi = np.stack([self.diff((), unit[k])(y, xi) for k in range(n)], axis=-1)
        return dy, dxi

    # ------------------------------------------------------------------ algebra
    def real(self) -> "SymbolTerm":
        return self._unary(sp.re, np.real, "Re")

    def imag(self) -> "SymbolTerm":
        return self._unary(sp.im, np.imag, "Im")

    def _unary(self, sym_op, np_op, label):
        if self.expr is not None:
            return SymbolTerm.from_expr(sym_op(self.expr), self.n)
        provider = None
        if self._derivative is not None:
            parent = self

            def provider(ay, ax):
                d = parent.diff(ay, ax)
                return lambda y, xi: np_op(d(y, xi)).astype(complex)

        return SymbolTerm(
            lambda y, xi: np_op(self(y, xi)).astype(complex),
            self.n,
            derivative=provider,
            provided_order=self.provided_order,
            allow_fd=self.allow_fd,
            name=f"{label}({self.name})",
        )

    def _binary(self, other, sym_op, np_op, label):
        if not isinstance(other, SymbolTerm):
            other = SymbolTerm.constant(other, self.n)
        if self.expr is not None and other.expr is not None:
            return SymbolTerm.from_expr(sym_op(self.expr, other.expr), self.n)
        return SymbolTerm(
            lambda y, xi: np_op(self(y, xi), other(y, xi)),
            self.n,
            allow_fd=self.allow_fd and other.allow_fd,
            name=f"({self.name}{label}{other.name})",
        )

    def __add__(self, other):
        return self._binary(other, lambda a, b: a + b, np.add, "+")

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, lambda a, b: a - b, np.subtract, "-")

    def __mul__(self, other):
        return self._binary(other, lambda a, b: a * b, np.multiply, "*")

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self._binary(other, lambda a, b: a / b, np.divide, "/")

    def __neg__(self):
        return self * -1


def as_term(obj, n: int) -> SymbolTerm:
    """Coerce a number, sympy expression, string or callable into a ``SymbolTerm``."""
    if isinstance(obj, SymbolTerm):
        return obj
    if isinstance(obj, (int, float, complex, sp.Basic, str)):
        return SymbolTerm.from_expr(sp.sympify(obj), n)
    if callable(obj):
        return SymbolTerm(obj, n)
    raise TypeError(f"cannot build a symbol term from {type(obj).__name__}")


@dataclass(frozen=True)
class SymbolExpansion:
    """An h-asymptotic symbol ``h^{-order} (a_0 + h a_1 + ... + h^K a_K)``.

    ``terms[j]`` multiplies ``h^j``; in the ``a_{-j}`` naming of the lower-order
    terms this is ``a_{-j}``.
    """

    terms: tuple
    order: int = 0
    region: BoxRegion | None = None

    def __post_init__(self):
        if len(self.terms) == 0:
            raise ValueError("a symbol expansion needs at least one term")
        n = self.terms[0].n
        if any(t.n != n for t in self.terms):
            raise ValueError("all terms must live on the same phase space")
        object.__setattr__(self, "terms", tuple(self.terms))

    @classmethod
    def from_exprs(cls, exprs, n: int, order: int = 0, region: BoxRegion | None = None):
        return cls(tuple(as_term(e, n) for e in exprs), order, region)

    @property
    def n(self) -> int:
        return self.terms[0].n

    @property
    def K(self) -> int:
        return len(self.terms) - 1

    @property
    def principal(self) -> SymbolTerm:
        return self.terms[0]

    def __call__(self, y, xi, h: float) -> np.ndarray:
        total = np.zeros(np.shape(y)[:-1], dtype=complex)
        for j, term in enumerate(self.terms):
            total = total + h**j * term(y, xi)
        return total * h ** (-self.order)

    def truncate(self, K: int) -> "SymbolExpansion":
        return SymbolExpansion(self.terms[: K + 1], self.order, self.region)


def eval_symbol(sym: SymbolExpansion, pt: PhasePoint, h: float) -> complex:
    """Evaluate ``h^{-m} sum_j h^j a_j`` at a phase point."""
    if not h > 0:
        raise DomainError(f"semiclassical parameter must be positive, got {h}")
    if pt.n != sym.n:
        raise DomainError(f"point dimension {pt.n} does not match symbol dimension {sym.n}")
    if sym.region is not None and not sym.region.contains(pt.y, pt.xi):
        raise DomainError(f"point {pt} outside the declared symbol region")
    return complex(sym(pt.y, pt.xi, h))


def poisson_bracket(f: SymbolTerm, g: SymbolTerm, pt) -> np.ndarray | complex:
    """``{f, g} = sum_k d_xi_k f d_y_k g - d_y_k f d_xi_k g`` (so that ``{xi_k, y_k} = 1``).

    ``pt`` is a ``PhasePoint`` or a pair of arrays ``(y, xi)``.
    """
    if isinstance(pt, PhasePoint):
        y, xi, scalar = pt.y, pt.xi, True
    else:
        y, xi = pt
        scalar = False
    fy, fxi = f.gradient(y, xi)
    gy, gxi = g.gradient(y, xi)
    out = np.sum(fxi * gy - fy * gxi, axis=-1)
    return complex(out) if scalar else out


def compose(a: SymbolExpansion, b: SymbolExpansion, K: int) -> SymbolExpansion:
    """Standard-quantization product ``a # b`` truncated after ``h^K``.

    The term of order ``h^j`` collects ``(-i)^|alpha| / alpha! d_xi^alpha a_i d_y^alpha b_k``
    over ``i + k + |alpha| == j``.
    """
    if a.n != b.n:
        raise ValueError("symbols live on different phase spaces")
    n = a.n
    if K < 0:
        raise ValueError("truncation order must be non-negative")
    for term in a.terms:
        if term.max_order() < K:
            raise CapabilityError(f"term {term.name} cannot supply {K} momentum derivatives")
    for term in b.terms:
        if term.max_order() < K:
            raise CapabilityError(f"term {term.name} cannot supply {K} position derivatives")

    out_terms = []
    for j in range(K + 1):
        pieces = []
        for order in range(j + 1):
            for i in range(min(j - order, a.K) + 1):
                k = j - order - i
                if k > b.K:
                    continue
                for alpha in _multi_indices(n, order):
                    coef = (-1j) ** order / _factorial(alpha)
                    pieces.append((coef, a.terms[i].diff((), alpha), b.terms[k].diff(alpha, ())))
        out_terms.append(_sum_of_products(pieces, n))
    region = a.region if a.region is not None else b.region
    return SymbolExpansion(tuple(out_terms), a.order + b.order, region)


def _sum_of_products(pieces, n: int) -> SymbolTerm:
    if not pieces:
        return SymbolTerm.from_expr(sp.Integer(0), n)
    if all(p.expr is not None and q.expr is not None for _, p, q in pieces):
        expr = sp.Add(*[sp.nsimplify(c) * p.expr * q.expr for c, p, q in pieces])
        return SymbolTerm.from_expr(sp.expand(expr), n)

    def func(y, xi):
        total = 0
        for c, p, q in pieces:
            total = total + c * p(y, xi) * q(y, xi)
        return np.broadcast_to(np.asarray(total, dtype=complex), np.shape(y)[:-1]).copy()

    return SymbolTerm(func, n, allow_fd=all(p.allow_fd and q.allow_fd for _, p, q in pieces))


@dataclass(frozen=True)
class PhaseGrid:
    """Tensor grid over a phase-space box, iterated in chunks.

    ``y_axes`` and ``xi_axes`` are lists of 1D coordinate arrays.
    """

    y_axes: tuple
    xi_axes: tuple
    _shape: tuple = field(init=False, repr=False)

    def __post_init__(self):
        y_axes = tuple(np.asarray(a, dtype=float).ravel() for a in self.y_axes)
        xi_axes = tuple(np.asarray(a, dtype=float).ravel() for a in self.xi_axes)
        if len(y_axes) != len(xi_axes):
            raise DomainError("grid needs as many momentum axes as position axes")
        object.__setattr__(self, "y_axes", y_axes)
        object.__setattr__(self, "xi_axes", xi_axes)
        object.__setattr__(self, "_shape", tuple(a.size for a in y_axes + xi_axes))

    @classmethod
    def uniform(cls, y_bounds, xi_bounds, counts) -> "PhaseGrid":
        y_bounds = np.asarray(y_bounds, dtype=float).reshape(-1, 2)
        xi_bounds = np.asarray(xi_bounds, dtype=float).reshape(-1, 2)
        n = len(y_bounds)
        counts = [counts] * (2 * n) if np.isscalar(counts) else list(counts)
        y_axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(y_bounds, counts[:n])]
        xi_axes = [np.linspace(lo, hi, c) for (lo, hi), c in zip(xi_bounds, counts[n:])]
        return cls(tuple(y_axes), tuple(xi_axes))

    @property
    def n(self) -> int:
        return len(self.y_axes)

    @property
    def size(self) -> int:
        return int(np.prod(self._shape))

    def spacings(self) -> np.ndarray:
        return np.array([a[1] - a[0] if a.size > 1 else 0.0 for a in self.y_axes + self.xi_axes])

    def chunks(self, chunk_size: int = 1 << 20) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield ``(y, xi)`` blocks of shape ``(m, n)`` covering the grid in C order."""
        axes = self.y_axes + self.xi_axes
        n = self.n
        total = self.size
        for start in range(0, total, chunk_size):
            idx = np.unravel_index(np.arange(start, min(start + chunk_size, total)), self._shape)
            pts = np.stack([axes[k][idx[k]] for k in range(2 * n)], axis=-1)
            yield pts[:, :n], pts[:, n:]

    def points(self) -> tuple[np.ndarray, np.ndarray]:
        ys, xis = zip(*self.chunks(self.size or 1)) if self.size else ((), ())
        return np.concatenate(ys), np.concatenate(xis)


def ellipticity_margin(sym: SymbolExpansion, grid: PhaseGrid, xi_tail: float | None = None) -> float:
    """Minimum of ``|a_0|`` over the grid and over tail samples ``|xi| == xi_tail``.

    ``|a_0| >= C_0`` on the sampled set is the numerical form of
    ``|h^{-m} a_0| >= C_0 h^{-m}``; compare the result against the candidate ``C_0``.
    """
    if grid.size == 0:
        raise DomainError("empty grid")
    a0 = sym.principal
    margin = np.inf
    for y, xi in grid.chunks():
        margin = min(margin, float(np.min(np.abs(a0(y, xi)))))
    if xi_tail is not None and xi_tail > 0:
        n = sym.n
        dirs = np.concatenate([np.eye(n), -np.eye(n)])
        if n > 1:
            diag = np.array(list(itertools.product((-1.0, 1.0), repeat=n))) / np.sqrt(n)
            dirs = np.concatenate([dirs, diag])
        y_nodes = np.array(list(itertools.product(*grid.y_axes)))
        for d in dirs:
            xi = np.broadcast_to(xi_tail * d, y_nodes.shape)
            margin = min(margin, float(np.min(np.abs(a0(y_nodes, xi)))))
    return margin
