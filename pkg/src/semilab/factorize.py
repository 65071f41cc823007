"""Symbol factorization through the diffusion operator and the half-tube propagator.

The factorization writes an elliptic symbol as ``q ~ a # (xi_n - i B)`` with
``B(x, xi') >= c_0 > 0`` real. In the standard quantization the second factor is
affine in ``xi_n`` and its position derivatives are ``-i d_x^alpha B``, so the
``h^m`` coefficient of the product gives

    a_{-m} = (xi_n - i B)^{-1} (q_{-m} + i sum_{1<=l<=m} (-i)^l sum_{|alpha|=l}
             d_xi^alpha a_{-(m-l)} d_x^alpha B / alpha!).

The propagator part works on tensor samples of a Fermi tube: ``x'`` tangential,
``x_n`` the signed normal coordinate with ``H = {x_n = 0}``. For a constant
``B_0 > 0``

    (E f)(x', x_n) = -(i/h) int_0^{x_n} exp(-(x_n - t) B_0 / h) (R'f)(x', t) dt

solves ``(hD_{x_n} - i B_0) E f = -R'f`` with ``E f = 0`` on ``H``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import sympy as sp
from scipy import integrate
from scipy.signal import lfilter

from .errors import CapabilityError, EllipticityError, FitError, PreconditionError, ResolutionError
from .microlocal import frequencies
from .symbols import (
    PhaseGrid,
    SymbolExpansion,
    SymbolTerm,
    _factorial,
    _multi_indices,
    as_term,
    ellipticity_margin,
    phase_variables,
)

POINTS_PER_H = 8


# ---------------------------------------------------------------------- symbol level
@dataclass
class FactorizationResult:
    """Output of :func:`factor_symbols`.

    Attributes:
        a_terms: ``a_0, a_{-1}, ..., a_{-K}`` as an expansion in powers of ``h``.
        B: The tangential field.
        c0: Lower bound of ``B`` on the sampled region.
        q: The factored symbol.
        residual_trace: ``(h, residual)`` pairs filled by :func:`residual_order_fit`.
    """

    a_terms: SymbolExpansion
    B: SymbolTerm
    c0: float
    q: SymbolExpansion
    residual_trace: list = field(default_factory=list)
    slope: float | None = None

    @property
    def K(self) -> int:
        return self.a_terms.K

    def diffusion_symbol(self) -> SymbolTerm:
        n = self.B.n
        _, xis = phase_variables(n)
        return as_term(xis[-1], n) - self.B * 1j

    def recursion_residual(self, grid: PhaseGrid) -> float:
        """Largest relative defect of the recursion over ``grid``.

        Each ``a_{-m}`` is substituted back into ``a_{-m} (xi_n - i B) = q_{-m} + ...``.
        """
        worst = 0.0
        D = self.diffusion_symbol()
        for m in range(self.K + 1):
            rhs = _recursion_rhs(self.q, self.a_terms.terms, self.B, m)
            lhs = self.a_terms.terms[m] * D
            for y, xi in grid.chunks():
                l, r = lhs(y, xi), rhs(y, xi)
                scale = max(float(np.max(np.abs(r))), float(np.max(np.abs(l))), 1.0)
                worst = max(worst, float(np.max(np.abs(l - r))) / scale)
        return worst

    def to_json(self) -> str:
        terms = [
            {"order": -j, "name": t.name, "expr": None if t.expr is None else str(t.expr)}
            for j, t in enumerate(self.a_terms.terms)
        ]
        doc = {
            "K": self.K,
            "B": None if self.B.expr is None else str(self.B.expr),
            "c0": self.c0,
            "a_terms": terms,
            "residual_trace": [[float(h), float(r)] for h, r in self.residual_trace],
            "slope": self.slope,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def residual_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["h", "residual"])
        for h, r in self.residual_trace:
            w.writerow([f"{h:.12g}", f"{r:.12e}"])
        return buf.getvalue()


def _default_grid(n: int, count: int = 17) -> PhaseGrid:
    return PhaseGrid.uniform([(0.0, 2 * np.pi)] * n, [(-5.0, 5.0)] * n, count)


def _simplify(term: SymbolTerm) -> SymbolTerm:
    if term.expr is None:
        return term
    return SymbolTerm.from_expr(sp.cancel(sp.together(term.expr)), term.n)


def _recursion_rhs(q: SymbolExpansion, a_terms, B: SymbolTerm, m: int) -> SymbolTerm:
    n = B.n
    total = q.terms[m] if m <= q.K else SymbolTerm.from_expr(0, n)
    for l in range(1, m + 1):
        for alpha in _multi_indices(n, l):
            coef = 1j * (-1j) ** l / _factorial(alpha)
            total = total + a_terms[m - l].diff((), alpha) * B.diff(alpha, ()) * coef
    return total


def factor_symbols(q: SymbolExpansion, B, K: int, grid: PhaseGrid | None = None) -> FactorizationResult:
    """Factor ``q ~ a # (xi_n - i B)`` up to ``a_{-K}``.

    Args:
        q: Symbol expansion ``q_0 + h q_{-1} + ...``.
        B: Real tangential field (independent of ``xi_n``); anything accepted by
            :func:`semilab.symbols.as_term`.
        K: Truncation order.
        grid: Phase-space samples on which ``B >= c_0 > 0`` is checked; defaults
            to ``[0, 2 pi]^n x [-5, 5]^n``.

    Raises:
        EllipticityError: ``B`` is not bounded below by a positive constant.
        CapabilityError: a term cannot supply the derivatives the recursion needs.
        PreconditionError: ``B`` depends on ``xi_n`` or is not real.
    """
    if K < 0:
        raise ValueError("truncation order must be non-negative")
    n = q.n
    B = as_term(B, n)
    grid = grid if grid is not None else _default_grid(n)
    if B.expr is not None:
        _, xis = phase_variables(n)
        if sp.simplify(sp.diff(B.expr, xis[-1])) != 0:
            raise PreconditionError("B must not depend on the normal momentum")
    for term in (B,) + tuple(q.terms):
        if term.max_order() < K:
            raise CapabilityError(f"{term.name} supplies derivatives up to order {term.max_order()}, need {K}")
    c0 = np.inf
    for y, xi in grid.chunks():
        vals = B(y, xi)
        if np.max(np.abs(vals.imag)) > 1e-12 * max(1.0, float(np.max(np.abs(vals)))):
            raise PreconditionError("B must be real")
        c0 = min(c0, float(np.min(vals.real)))
    if not c0 > 0:
        raise EllipticityError(f"B is not bounded below by a positive constant (min {c0:.3g})")

    _, xis = phase_variables(n)
    D = as_term(xis[-1], n) - B * 1j
    terms = [_simplify(q.terms[0] / D)]
    for m in range(1, K + 1):
        terms.append(_simplify(_recursion_rhs(q, terms, B, m) / D))
    return FactorizationResult(SymbolExpansion(tuple(terms), q.order, q.region), B, c0, q)


def left_parametrix(a: SymbolExpansion, K: int, grid: PhaseGrid | None = None, tol: float = 1e-12) -> SymbolExpansion:
    """Symbol ``l`` with ``l # a = 1 + O(h^{K+1})``.

    ``l_0 = 1 / a_0`` and for ``j >= 1`` the ``h^j`` coefficient of ``l # a`` is
    solved for ``l_j``.

    Raises:
        EllipticityError: ``|a_0|`` is not bounded away from zero on ``grid``.
    """
    n = a.n
    grid = grid if grid is not None else _default_grid(n)
    margin = ellipticity_margin(a, grid)
    if not margin > tol:
        raise EllipticityError(f"principal symbol is not elliptic on the region (margin {margin:.3g})")
    zero = SymbolTerm.from_expr(0, n)
    a_t = list(a.terms) + [zero] * max(0, K + 1 - len(a.terms))
    l_terms = [_simplify(SymbolTerm.from_expr(1, n) / a_t[0])]
    for j in range(1, K + 1):
        rest = zero
        for order in range(j + 1):
            for i in range(j - order + 1):
                k = j - order - i
                if i == j:
                    continue
                for alpha in _multi_indices(n, order):
                    coef = (-1j) ** order / _factorial(alpha)
                    rest = rest + l_terms[i].diff((), alpha) * a_t[k].diff(alpha, ()) * coef
        l_terms.append(_simplify(-rest / a_t[0]))
    return SymbolExpansion(tuple(l_terms), -a.order, a.region)


# ---------------------------------------------------------------------- residual fits
def _symbol_1d(term: SymbolTerm) -> Callable:
    return lambda x, xi: term(np.asarray(x)[..., None], np.asarray(xi)[..., None])


def _op_matrix(sym: SymbolExpansion, h: float, x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Matrix of ``Op_h(sym)`` acting on Fourier coefficients ``fft(u) / N``."""
    X, XI = np.meshgrid(x, h * k, indexing="ij")
    vals = sym(X[..., None], XI[..., None], h)
    return vals * np.exp(1j * np.outer(x, k))


def wave_packet_pool(x: np.ndarray, h: float, count: int = 8, seed: int = 0, width: float = 0.4) -> np.ndarray:
    """Gaussian wave packets ``exp(-(x-x_0)^2 / 2w^2) e^{i xi_0 x / h}`` with ``|xi_0| <= 2``.

    Centres and momenta come from a seeded generator; the momenta are snapped
    to the grid frequencies so the packets stay periodic.
    """
    rng = np.random.default_rng(seed)
    L = x[-1] - x[0] + (x[1] - x[0])
    centres = x[0] + L * rng.uniform(0.3, 0.7, count)
    momenta = rng.uniform(-2.0, 2.0, count)
    step = 2 * np.pi / L
    out = np.empty((x.size, count), dtype=complex)
    for c, (x0, xi0) in enumerate(zip(centres, momenta)):
        freq = step * np.round(xi0 / h / step)
        dist = (x - x0 + L / 2) % L - L / 2
        out[:, c] = np.exp(-(dist**2) / (2 * width**2)) * np.exp(1j * freq * x)
    return out


def _slope(hs, rs) -> float:
    return float(np.polyfit(np.log(hs), np.log(rs), 1)[0])


def residual_order_fit(
    q: SymbolExpansion,
    fact: FactorizationResult,
    chi1: Callable,
    chi2: Callable,
    h_list: Sequence[float],
    test_functions: Callable | None = None,
    *,
    L: float = 2 * np.pi,
    points_per_wavelength: int = POINTS_PER_H,
) -> float:
    """Slope of ``log r(h)`` against ``log h`` for the truncated factorization.

    ``r(h) = max_u ||chi2 (Op(q) - Op(a) (hD_n - i B)) chi1 u|| / ||u||`` on a
    periodic grid of ``N ~ points_per_wavelength * L / (2 pi h)`` nodes. The
    product is never formed symbolically: each operator is applied to the
    samples. Residuals at the rounding floor are excluded from the fit.

    Args:
        test_functions: ``test_functions(x, h)`` returning an ``(N, m)`` array;
            defaults to :func:`wave_packet_pool`.

    Raises:
        CapabilityError: the symbols are not one dimensional.
        PreconditionError: ``chi2`` is not supported inside ``chi1``.
        ResolutionError: fewer than 8 grid points per ``h``.
    """
    if q.n != 1:
        raise CapabilityError("residual fits are implemented for one-dimensional symbols")
    if points_per_wavelength < POINTS_PER_H:
        raise ResolutionError(f"need at least {POINTS_PER_H} points per wavelength")
    test_functions = test_functions or wave_packet_pool
    trace = []
    for h in sorted(h_list, reverse=True):
        N = int(2 * math.ceil(points_per_wavelength * L / (2 * np.pi * h) / 2))
        x = L * np.arange(N) / N
        k = frequencies(N, L)
        c1, c2 = np.asarray(chi1(x), dtype=float), np.asarray(chi2(x), dtype=float)
        if np.any((c2 > 0) & (c1 <= 0)):
            raise PreconditionError("chi2 must be supported where chi1 is positive")
        U = np.asarray(test_functions(x, h))
        V = c1[:, None] * U
        Vhat = np.fft.fft(V, axis=0)
        Bx = fact.B(x[:, None], np.zeros((N, 1))).real
        W = np.fft.ifft((h * k)[:, None] * Vhat, axis=0) - 1j * Bx[:, None] * V
        Qv = _op_matrix(q, h, x, k) @ (Vhat / N)
        Aw = _op_matrix(fact.a_terms, h, x, k) @ (np.fft.fft(W, axis=0) / N)
        R = c2[:, None] * (Qv - Aw)
        r = float(np.max(np.linalg.norm(R, axis=0) / np.linalg.norm(U, axis=0)))
        trace.append((float(h), r))
    fact.residual_trace = trace
    floor = 1e3 * np.finfo(float).eps
    use = [(h, r) for h, r in trace if r > floor]
    if len(use) < 2:
        fact.slope = math.inf
        return math.inf
    fact.slope = _slope(*zip(*use))
    return fact.slope


# ---------------------------------------------------------------------- tube functions
@dataclass
class TubeFunction:
    """Samples ``values[i, j] = v(x'_i, x_n_j)`` over a Fermi tube.

    ``x'`` is periodic with rectangle-rule weights (a single ``x'`` node means no
    tangential variable). ``x_n`` must be uniform and contain ``0`` if the trace
    on ``H`` is needed.
    """

    values: np.ndarray
    xp: np.ndarray
    xn: np.ndarray
    h: float
    check_resolution: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        self.xp = np.atleast_1d(np.asarray(self.xp, dtype=float))
        self.xn = np.asarray(self.xn, dtype=float)
        if self.values.shape != (self.xp.size, self.xn.size):
            raise ValueError(f"values shape {self.values.shape} does not match grid ({self.xp.size}, {self.xn.size})")
        if self.xn.size < 2:
            raise ValueError("need at least two normal nodes")
        if not np.allclose(np.diff(self.xn), self.dxn, rtol=1e-9, atol=0):
            raise ValueError("x_n nodes must be uniform")
        if self.check_resolution:
            limit = self.h / POINTS_PER_H * (1 + 1e-9)
            if self.dxn > limit or (self.xp.size > 1 and self.dxp > limit):
                raise ResolutionError(f"tube grid does not resolve h = {self.h:g} with {POINTS_PER_H} points per h")

    @classmethod
    def from_callable(cls, func: Callable, xp, xn, h: float, **kw) -> "TubeFunction":
        XP, XN = np.meshgrid(np.atleast_1d(xp), xn, indexing="ij")
        return cls(func(XP, XN), xp, xn, h, **kw)

    @property
    def dxn(self) -> float:
        return float(self.xn[1] - self.xn[0])

    @property
    def dxp(self) -> float:
        return float(self.xp[1] - self.xp[0]) if self.xp.size > 1 else 1.0

    def replace(self, values) -> "TubeFunction":
        return TubeFunction(values, self.xp, self.xn, self.h, self.check_resolution)

    def _zero_index(self) -> int:
        j = int(np.argmin(np.abs(self.xn)))
        if abs(self.xn[j]) > 1e-9 * max(1.0, self.dxn):
            raise PreconditionError("the grid has no x_n = 0 slice")
        return j

    def gamma_H(self) -> np.ndarray:
        """Trace on ``H = {x_n = 0}``."""
        return self.values[:, self._zero_index()].copy()

    def chi_plus(self) -> "TubeFunction":
        """Restriction to the half-tube ``x_n >= 0``."""
        j = self._zero_index()
        return TubeFunction(self.values[:, j:], self.xp, self.xn[j:], self.h, self.check_resolution)

    def slice_norms(self) -> np.ndarray:
        """``N(x_n) = ||v(., x_n)||^2_{L^2(H_{x_n})}`` for each normal node."""
        return np.sum(np.abs(self.values) ** 2, axis=0) * self.dxp

    def norm2(self) -> float:
        """Squared ``L^2`` norm over the sampled tube (Simpson in ``x_n``)."""
        return float(integrate.simpson(self.slice_norms(), x=self.xn))


def fd_weights(offsets: Sequence[int], deriv: int = 1) -> np.ndarray:
    """Finite-difference weights on integer ``offsets`` for the ``deriv``-th derivative (unit spacing)."""
    s = np.asarray(offsets, dtype=float)
    V = np.vander(s, increasing=True).T
    rhs = np.zeros(s.size)
    rhs[deriv] = math.factorial(deriv)
    return np.linalg.solve(V, rhs)


def d_normal(values: np.ndarray, dx: float, order: int = 2) -> np.ndarray:
    """``d/dx_n`` along the last axis: centred stencils inside, one-sided near the ends.

    ``order`` is the (even) consistency order.
    """
    if order % 2 or order < 2:
        raise ValueError("order must be a positive even integer")
    values = np.asarray(values)
    M = values.shape[-1]
    width = order + 1
    if M < width:
        raise ResolutionError(f"need at least {width} normal nodes for order {order}")
    half = order // 2
    out = np.empty_like(values, dtype=complex if np.iscomplexobj(values) else float)
    centred = fd_weights(range(-half, half + 1))
    inner = sum(c * values[..., half + o : M - half + o] for c, o in zip(centred, range(-half, half + 1)))
    out[..., half : M - half] = inner
    for j in list(range(half)) + list(range(M - half, M)):
        start = min(max(j - half, 0), M - width)
        offs = np.arange(start, start + width) - j
        out[..., j] = np.tensordot(values[..., start : start + width], fd_weights(offs), axes=([-1], [0]))
    return out / dx


def diffusion_apply(v: TubeFunction, B0: float, order: int = 2) -> TubeFunction:
    """``(hD_{x_n} - i B_0) v`` with ``hD = (h/i) d/dx_n``."""
    dv = d_normal(v.values, v.dxn, order)
    return v.replace(-1j * v.h * dv - 1j * B0 * v.values)


# ---------------------------------------------------------------------- propagator
def _phi_moments(z: float, deg: int) -> np.ndarray:
    """``phi_j(z) = int_0^1 exp(-z (1 - t)) t^j dt`` for ``j = 0..deg``."""
    if z > 2.0:
        phi = [-math.expm1(-z) / z]
        for j in range(1, deg + 1):
            phi.append((1.0 - j * phi[-1]) / z)
        return np.array(phi)
    out = np.zeros(deg + 1)
    for j in range(deg + 1):
        term = math.factorial(j) / math.factorial(j + 1)
        total, m = term, 0
        while abs(term) > 1e-18 * abs(total):
            m += 1
            term *= -z / (j + m + 1)
            total += term
        out[j] = total
    return out


# monomial coefficients of the cubic through t = -1, 0, 1, 2 (and the shifted
# stencils used in the first and last cells)
_CUBIC_STENCILS = {s: np.linalg.inv(np.vander(np.arange(s, s + 4, dtype=float), increasing=True)) for s in (-2, -1, 0)}


def apply_propagator(Rf: TubeFunction, B0: float, h: float | None = None) -> TubeFunction:
    """Half-tube propagator ``E`` applied to the source ``R'f``.

    The source is interpolated by local cubics in ``x_n``; each cell is then
    integrated against the exact exponential kernel, so the scheme is exact for
    cubic sources. The result lives on ``x_n >= 0`` and vanishes on ``H``.

    Raises:
        PreconditionError: ``B_0 <= 0``.
    """
    if not B0 > 0:
        raise PreconditionError("B_0 must be positive")
    h = Rf.h if h is None else h
    src = Rf.chi_plus()
    g = src.values
    M = g.shape[1]
    if M < 4:
        raise ResolutionError("need at least four normal nodes on the half-tube")
    dx = src.dxn
    z = B0 * dx / h
    phi = _phi_moments(z, 3)
    decay = math.exp(-z)
    inc = np.zeros((g.shape[0], M - 1), dtype=complex)
    for k in range(M - 1):
        s = -1 if 1 <= k <= M - 3 else (0 if k == 0 else -2)
        nodes = g[:, k + s : k + s + 4]
        coeffs = nodes @ _CUBIC_STENCILS[s].T
        inc[:, k] = coeffs @ phi
    inc *= -1j * dx / h
    E = np.zeros_like(g)
    E[:, 1:] = lfilter([1.0], [1.0, -decay], inc, axis=1)
    return src.replace(E)


def propagator_identity_residual(Ef: TubeFunction, Rf: TubeFunction, B0: float, order: int = 6) -> float:
    """``max |(hD_n - i B_0) E f + R'f| / max |R'f|`` on the half-tube."""
    src = Rf.chi_plus()
    lhs = diffusion_apply(Ef, B0, order).values + src.values
    scale = max(float(np.max(np.abs(src.values))), np.finfo(float).tiny)
    return float(np.max(np.abs(lhs))) / scale


# ---------------------------------------------------------------------- transport chain
@dataclass
class TransportCheck:
    defect: float
    relative_defect: float
    N: np.ndarray
    D: np.ndarray


def transport_identity_check(v: TubeFunction, B0: float, h: float | None = None, *, forcing: str = "computed", order: int = 6) -> TransportCheck:
    """Defect of ``(h/2) N'(x_n) + B_0 N(x_n) - D(x_n) = 0``.

    ``N(x_n)`` is the squared ``L^2`` norm of the level slice ``H_{x_n}``; in
    Fermi coordinates the slices carry the measure of ``H``. ``D`` is
    ``Re(i <w, v>)`` for the forcing ``w = (hD_n - i B_0) v``. With
    ``forcing="none"`` the forcing is assumed to vanish and ``D = 0``, so the
    defect measures how far ``v`` is from the kernel.
    """
    h = v.h if h is None else h
    N = v.slice_norms()
    if forcing == "computed":
        w = diffusion_apply(v, B0, order).values
        D = np.real(1j * np.sum(w * np.conj(v.values), axis=0) * v.dxp)
    elif forcing == "none":
        D = np.zeros_like(N)
    else:
        raise ValueError("forcing must be 'computed' or 'none'")
    dN = d_normal(N, v.dxn, order)
    res = 0.5 * h * dN + B0 * N - D
    defect = float(np.max(np.abs(res)))
    scale = B0 * float(np.max(N)) if np.max(N) > 0 else 1.0
    return TransportCheck(defect, defect / scale if scale > 0 else defect, N, D)


@dataclass
class RestrictionBound:
    lhs: float
    rhs: float
    tolerance: float
    verdict: bool

    def as_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "tolerance": self.tolerance, "verdict": self.verdict}


def tube_to_restriction_bound(v: TubeFunction, B0: float, eps: float, h: float | None = None, order: int = 6) -> RestrictionBound:
    """Compare ``h ||gamma_H v||^2`` with ``2 B_0 ||v||^2`` over ``0 <= x_n <= eps/8``.

    Integrating the transport identity gives
    ``h N(0) = 2 B_0 int N + h N(eps/8) - 2 int D >= 2 B_0 int N - 2 int D^+``,
    so the verdict allows the forcing contribution plus quadrature slack.
    """
    h = v.h if h is None else h
    half = v.chi_plus()
    keep = half.xn <= eps / 8 + 1e-12 * max(1.0, eps)
    if np.count_nonzero(keep) < order + 1:
        raise ResolutionError("too few normal nodes inside the eps/8 tube")
    part = TubeFunction(half.values[:, keep], half.xp, half.xn[keep], h, half.check_resolution)
    N = part.slice_norms()
    lhs = h * float(N[0])
    rhs = 2 * B0 * float(integrate.simpson(N, x=part.xn))
    chk = transport_identity_check(part, B0, h, order=order)
    slack = 2 * float(integrate.simpson(np.maximum(chk.D, 0.0), x=part.xn))
    quad = 1e-8 * max(lhs, rhs) + part.xn[-1] * chk.defect
    tol = slack + quad
    return RestrictionBound(lhs, rhs, tol, bool(lhs >= rhs - tol))
