"""Carleman weights near a convex hypersurface and their bracket positivity.

Coordinates are ``y = (y', y_n)`` with ``y_n`` the signed normal offset from the
reference hypersurface ``{y_n = 0}``. A model is described by its tangential
dual metric ``G(y)`` (so that ``a(y', xi') - 2 y_n b(y', xi') + R(y, xi')`` equals
``xi'^T G(y) xi'``), a potential ``V`` and an energy ``E``:

    p(y, xi) = xi_n^2 + xi'^T G(y) xi' + V(y) - E.

The weight is ``psi = beta y_n + 2 tau rho_eps(y')`` and the conjugated symbol
is ``p_psi(y, xi) = p(y, xi + i grad psi)``. Since ``p`` is a polynomial in the
momentum, every derivative of ``p_psi`` is evaluated exactly through the
holomorphic extension in ``zeta = xi + i grad psi``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import sympy as sp
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import DomainError, GeometryError, InadmissibleModelError, ResolutionError
from .symbols import PhaseGrid, PhasePoint, SymbolExpansion, SymbolTerm, phase_variables

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------- smooth steps
def _smoothstep(t):
    """``S(t) = e(t) / (e(t) + e(1-t))`` with ``e(t) = exp(-1/t)``, plus ``S'`` and ``S''``."""
    t = np.clip(np.asarray(t, dtype=float), 0.0, 1.0)
    inner = (t > 0) & (t < 1)
    S = np.where(t >= 1, 1.0, 0.0)
    d1 = np.zeros_like(t)
    d2 = np.zeros_like(t)
    if np.any(inner):
        s = t[inner]
        u = 1.0 - s
        # work with the ratio q = g/f = exp(1/s - 1/u) to avoid underflow
        logq = 1.0 / s - 1.0 / u
        q = np.exp(np.clip(logq, -700, 700))
        Si = 1.0 / (1.0 + q)
        # dS/dt = S(1-S) * (1/s^2 + 1/u^2)
        w1 = 1.0 / s**2 + 1.0 / u**2
        w2 = -2.0 / s**3 + 2.0 / u**3
        d1i = Si * (1 - Si) * w1
        d2i = d1i * (1 - 2 * Si) * w1 + Si * (1 - Si) * w2
        S = S.astype(float)
        S[inner] = Si
        d1[inner] = d1i
        d2[inner] = d2i
    return S, d1, d2


# ---------------------------------------------------------------------- cutoffs
@dataclass(frozen=True)
class RhoCutoff:
    """Radial tangential cutoff ``rho_eps(y') = -S((|y'| - 3 eps) / (c_Y/3 - 3 eps))``.

    Zero on ``|y'| <= 3 eps``, identically -1 for ``|y'| >= c_Y / 3``, nonpositive,
    with ``sup |grad rho| = sup S' / (c_Y/3 - 3 eps)`` bounded as ``eps`` decreases.
    """

    eps: float
    c_Y: float

    @property
    def width(self) -> float:
        return self.c_Y / 3 - 3 * self.eps

    def _radial(self, s):
        S, d1, d2 = _smoothstep((s - 3 * self.eps) / self.width)
        return -S, -d1 / self.width, -d2 / self.width**2

    def __call__(self, yp) -> np.ndarray:
        s = np.linalg.norm(np.atleast_1d(yp)[..., None] if np.ndim(yp) == 0 else yp, axis=-1)
        return self._radial(s)[0]

    def derivatives(self, yp):
        """Return ``(rho, grad rho, hess rho)`` for ``yp`` of shape ``(..., m)``."""
        yp = np.asarray(yp, dtype=float)
        m = yp.shape[-1]
        s = np.linalg.norm(yp, axis=-1)
        R, R1, R2 = self._radial(s)
        safe = np.where(s > 0, s, 1.0)
        e = yp / safe[..., None]
        grad = R1[..., None] * e
        outer = e[..., :, None] * e[..., None, :]
        eye = np.eye(m)
        hess = R2[..., None, None] * outer + (R1 / safe)[..., None, None] * (eye - outer)
        # R1 and R2 vanish identically near s = 0 (flat zone), so the formula is exact there
        return R, grad, hess


def build_rho(eps: float, c_Y: float) -> RhoCutoff:
    """Tangential cutoff for the Carleman weight; requires ``0 < 3 eps < c_Y / 3``."""
    if eps <= 0 or c_Y <= 0:
        raise GeometryError("eps and c_Y must be positive", failed=("eps > 0", "c_Y > 0"))
    if not 3 * eps < c_Y / 3:
        raise GeometryError(f"3*eps = {3 * eps} must be below c_Y/3 = {c_Y / 3}", failed=("3 eps < c_Y/3",))
    return RhoCutoff(eps, c_Y)


@dataclass(frozen=True)
class CarlemanWeight:
    """``psi(y', y_n) = beta y_n + 2 tau rho_eps(y')``."""

    tau: float
    eps: float
    c_Y: float
    beta: float = 1.0
    rho: RhoCutoff | None = None

    def __post_init__(self):
        if self.tau < 0:
            raise DomainError("tau must be nonnegative")
        if self.rho is None:
            object.__setattr__(self, "rho", build_rho(self.eps, self.c_Y))

    def psi(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return self.beta * y[..., -1] + 2 * self.tau * self.rho.derivatives(y[..., :-1])[0]

    def derivatives(self, y):
        """``(psi, grad psi, hess psi)`` at points ``y`` of shape ``(..., n)``."""
        y = np.asarray(y, dtype=float)
        n = y.shape[-1]
        R, g, H = self.rho.derivatives(y[..., :-1])
        psi = self.beta * y[..., -1] + 2 * self.tau * R
        grad = np.zeros(y.shape)
        grad[..., :-1] = 2 * self.tau * g
        grad[..., -1] = self.beta
        hess = np.zeros(y.shape + (n,))
        hess[..., :-1, :-1] = 2 * self.tau * H
        return psi, grad, hess

    def with_tau(self, tau: float) -> "CarlemanWeight":
        return CarlemanWeight(tau, self.eps, self.c_Y, self.beta, self.rho)


# ---------------------------------------------------------------------- models
@dataclass(frozen=True)
class GeodesicSphereModel:
    """Principal symbol ``xi_n^2 + xi'^T G(y) xi' + V(y) - E`` near a geodesic sphere.

    ``A(y')`` and ``B(y')`` are the matrices of the quadratic forms ``a`` and
    ``b``; ``G`` is the full tangential dual metric, whose difference from
    ``A - 2 y_n B`` is the remainder ``R``. ``dG(y)`` returns the partials
    ``dG/dy_k`` stacked on axis ``-3``.
    """

    n: int
    A: Callable
    B: Callable
    G: Callable
    dG: Callable
    V: Callable = None
    dV: Callable = None
    E: float = 1.0
    name: str = "model"

    def __post_init__(self):
        if self.n < 2:
            raise DomainError("the model needs at least one tangential direction (n >= 2)")
        if self.V is None:
            object.__setattr__(self, "V", lambda y: np.zeros(np.shape(y)[:-1]))
            object.__setattr__(self, "dV", lambda y: np.zeros(np.shape(y)))

    @property
    def m(self) -> int:
        return self.n - 1

    # ---- built-ins
    @classmethod
    def flat(cls, n: int = 2, V=None, dV=None, E: float = 1.0) -> "GeodesicSphereModel":
        m = n - 1
        eye = np.eye(m)

        def const(val):
            return lambda y: np.broadcast_to(val, np.shape(y)[:-1] + (m, m))

        return cls(
            n,
            A=const(eye),
            B=const(np.zeros((m, m))),
            G=const(eye),
            dG=lambda y: np.zeros(np.shape(y)[:-1] + (n, m, m)),
            V=V,
            dV=dV,
            E=E,
            name="flat",
        )

    @classmethod
    def circle(cls, r: float, V=None, dV=None, E: float = 1.0, concave: bool = False) -> "GeodesicSphereModel":
        """Euclidean circle of radius ``r`` in the plane, ``y_n`` the outward radial offset.

        Polar coordinates give ``G = (r / (r + s y_n))^2`` exactly, with ``s = 1``
        (``s = -1`` for the concave side), hence ``a = xi'^2`` and ``b = s a / r``.
        """
        if r <= 0:
            raise DomainError("radius must be positive")
        s = -1.0 if concave else 1.0
        return cls._radial_family(2, r, s, V, dV, E, f"{'concave_' if concave else ''}circle_r{r:g}")

    @classmethod
    def sphere(cls, n: int, r: float, V=None, dV=None, E: float = 1.0) -> "GeodesicSphereModel":
        """Tangentially flat sphere model ``G = (r / (r + y_n))^2 I`` in dimension ``n``.

        This is the exact dual metric of ``dy_n^2 + ((r + y_n)/r)^2 |dy'|^2``, which
        shares ``a`` and ``b = a / r`` with the round sphere at the chart centre.
        """
        if r <= 0:
            raise DomainError("radius must be positive")
        return cls._radial_family(n, r, 1.0, V, dV, E, f"sphere{n}_r{r:g}")

    @classmethod
    def _radial_family(cls, n, r, s, V, dV, E, name):
        m = n - 1
        eye = np.eye(m)

        def G(y):
            yn = np.asarray(y, dtype=float)[..., -1]
            g = (r / (r + s * yn)) ** 2
            return g[..., None, None] * eye

        def dG(y):
            y = np.asarray(y, dtype=float)
            yn = y[..., -1]
            out = np.zeros(y.shape[:-1] + (n, m, m))
            out[..., -1, :, :] = (-2 * s * r**2 / (r + s * yn) ** 3)[..., None, None] * eye
            return out

        return cls(
            n,
            A=lambda y: np.broadcast_to(eye, np.shape(y)[:-1] + (m, m)),
            B=lambda y: np.broadcast_to(s * eye / r, np.shape(y)[:-1] + (m, m)),
            G=G,
            dG=dG,
            V=V,
            dV=dV,
            E=E,
            name=name,
        )

    @classmethod
    def from_expressions(cls, n: int, a, b, R="0", V="0", E: float = 1.0, name: str = "user") -> "GeodesicSphereModel":
        """Model from sympy-parsable quadratic forms ``a(y', xi')``, ``b(y', xi')``, ``R(y, xi')``.

        Variables are ``y1..yn`` and ``xi1..xi{n-1}``. Each form must be homogeneous
        quadratic in ``xi'``; its matrix is recovered as half the momentum Hessian.
        """
        ys, xis = phase_variables(n)
        loc = {s.name: s for s in ys + xis}
        xp = xis[:-1]

        def qmatrix(expr):
            e = sp.sympify(expr, locals=loc)
            M = sp.Matrix(n - 1, n - 1, lambda i, j: sp.Rational(1, 2) * sp.diff(e, xp[i], xp[j]))
            resid = sp.simplify(e - (sp.Matrix([xp]) * M * sp.Matrix(xp))[0, 0])
            if resid != 0:
                raise DomainError(f"{expr!r} is not a quadratic form in the tangential momenta")
            return M

        Am, Bm, Rm = qmatrix(a), qmatrix(b), qmatrix(R)
        Gm = Am - 2 * ys[-1] * Bm + Rm
        Ve = sp.sympify(V, locals=loc)
        m = n - 1

        def lam_matrix(M):
            f = sp.lambdify(ys, M, modules="numpy")

            def call(y):
                y = np.asarray(y, dtype=float)
                rows = f(*[y[..., k] for k in range(n)])
                out = np.empty(y.shape[:-1] + (m, m))
                for i in range(m):
                    for j in range(m):
                        out[..., i, j] = np.broadcast_to(rows[i][j], y.shape[:-1])
                return out

            return call

        dGs = [lam_matrix(Gm.diff(ys[k])) for k in range(n)]
        fV = sp.lambdify(ys, Ve, modules="numpy")
        fdV = [sp.lambdify(ys, Ve.diff(ys[k]), modules="numpy") for k in range(n)]

        def Vf(y):
            y = np.asarray(y, dtype=float)
            return np.broadcast_to(np.asarray(fV(*[y[..., k] for k in range(n)]), dtype=float), y.shape[:-1]).copy()

        def dVf(y):
            y = np.asarray(y, dtype=float)
            cols = [np.broadcast_to(np.asarray(g(*[y[..., k] for k in range(n)]), dtype=float), y.shape[:-1]) for g in fdV]
            return np.stack(cols, axis=-1)

        return cls(
            n,
            A=lam_matrix(Am),
            B=lam_matrix(Bm),
            G=lam_matrix(Gm),
            dG=lambda y: np.stack([d(y) for d in dGs], axis=-3),
            V=Vf,
            dV=dVf,
            E=E,
            name=name,
        )

    # ---- evaluation
    def p(self, y, xi) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        xi = np.asarray(xi)
        G = self.G(y)
        xp = xi[..., :-1]
        return xi[..., -1] ** 2 + np.einsum("...i,...ij,...j->...", xp, G, xp) + self.V(y) - self.E

    def remainder(self, y, xi_p) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        M = self.G(y) - self.A(y) + 2 * y[..., -1][..., None, None] * self.B(y)
        return np.einsum("...i,...ij,...j->...", xi_p, M, xi_p)

    def check(self, y_samples, xi_p_samples) -> dict:
        """Sampled invariants: ellipticity of ``a``, positive curvatures, ``|R| <= C y_n^2 |xi'|^2``."""
        y = np.asarray(y_samples, dtype=float)
        A = self.A(y)
        B = self.B(y)
        a_min = float(np.min(np.linalg.eigvalsh(A)))
        # eigenvalues of b relative to a: generalized problem B v = k A v
        L = np.linalg.cholesky(A)
        Linv = np.linalg.inv(L)
        rel = Linv @ B @ np.swapaxes(Linv, -1, -2)
        k_min = float(np.min(np.linalg.eigvalsh(0.5 * (rel + np.swapaxes(rel, -1, -2)))))
        xp = np.asarray(xi_p_samples, dtype=float)
        Rv = np.abs(self.remainder(y, xp))
        denom = y[..., -1] ** 2 * np.sum(xp**2, axis=-1)
        ok = denom > 1e-14
        C_R = float(np.max(Rv[ok] / denom[ok])) if ok.any() else 0.0
        return {"a_min_eig": a_min, "curvature_min": k_min, "remainder_C": C_R, "convex": k_min > 0, "elliptic": a_min > 0}


# ---------------------------------------------------------------------- conjugated symbol
def _y_data(model: GeodesicSphereModel, w: CarlemanWeight, y):
    """Position-only ingredients of ``p_psi``: ``grad psi``, ``hess psi``, ``G``, ``dG``, ``V - E``, ``dV``."""
    y = np.asarray(y, dtype=float)
    _, gpsi, hpsi = w.derivatives(y)
    return {"gpsi": gpsi, "hpsi": hpsi, "G": model.G(y), "dG": model.dG(y), "VE": model.V(y) - model.E, "dV": model.dV(y), "n": model.n}


def _eval_p(d, xi):
    """``p_psi`` and its exact y/xi gradients from cached position data."""
    zeta = np.asarray(xi, dtype=float) + 1j * d["gpsi"]
    hpsi = d["hpsi"]
    if d["n"] == 2:
        # scalar tangential metric: avoid the batched tensor contractions
        g = d["G"][..., 0, 0]
        zp, zn = zeta[..., 0], zeta[..., 1]
        gz = g * zp
        p = zn * zn + gz * zp + d["VE"]
        dz = np.stack([2 * gz, 2 * zn], axis=-1)
        dy_p = d["dG"][..., :, 0, 0] * (zp * zp)[..., None] + d["dV"]
        hz0 = hpsi[..., 0, 0] * dz[..., 0] + hpsi[..., 0, 1] * dz[..., 1]
        hz1 = hpsi[..., 1, 0] * dz[..., 0] + hpsi[..., 1, 1] * dz[..., 1]
        return p, dy_p + 1j * np.stack([hz0, hz1], axis=-1), dz
    zp = zeta[..., :-1]
    Gz = np.einsum("...ij,...j->...i", d["G"], zp)
    p = zeta[..., -1] ** 2 + np.einsum("...i,...i->...", zp, Gz) + d["VE"]
    dz = np.concatenate([2 * Gz, 2 * zeta[..., -1:]], axis=-1)
    dy_p = np.einsum("...i,...kij,...j->...k", zp, d["dG"], zp) + d["dV"]
    dy = dy_p + 1j * np.einsum("...kl,...l->...k", hpsi, dz)
    return p, dy, dz


def _subset(d, sel):
    return {k: (v[sel] if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def _zeta_parts(model: GeodesicSphereModel, w: CarlemanWeight, y, xi):
    """``p_psi`` and its exact y/xi gradients at arrays of points."""
    return _eval_p(_y_data(model, w, y), xi)


def conjugated_symbol(model: GeodesicSphereModel, w: CarlemanWeight) -> SymbolExpansion:
    """Principal symbol ``p_psi(y, xi) = p(y, xi + i grad psi)`` as a one-term expansion.

    First derivatives are supplied exactly; higher ones fall back to finite differences.
    """
    n = model.n

    def func(y, xi):
        return _zeta_parts(model, w, y, xi)[0]

    def provider(ay, ax):
        ay = tuple(ay) or (0,) * n
        ax = tuple(ax) or (0,) * n
        if sum(ay) + sum(ax) != 1:
            return None
        k = int(np.argmax(np.array(ay) + np.array(ax)))
        if sum(ay) == 1:
            return lambda y, xi: _zeta_parts(model, w, y, xi)[1][..., k]
        return lambda y, xi: _zeta_parts(model, w, y, xi)[2][..., k]

    term = SymbolTerm(func, n, derivative=provider, provided_order=1, name=f"p_psi[{model.name}]")
    return SymbolExpansion([term])


def bracket_values(model, w, y, xi):
    """``{Re p_psi, Im p_psi}`` and ``p_psi`` at arrays of points (exact)."""
    p, dy, dz = _zeta_parts(model, w, y, xi)
    br = np.sum(dz.real * dy.imag - dy.real * dz.imag, axis=-1)
    return br, p, dy, dz


# ---------------------------------------------------------------------- bracket scans
@dataclass
class BracketScan:
    """Result of a characteristic-set bracket scan."""

    margin: float | None
    witness: PhasePoint | None
    n_seeds: int
    n_char: int
    char_tol: float
    tau: float
    samples: np.ndarray = field(repr=False, default_factory=lambda: np.zeros((0, 0)))
    char_constants: dict = field(default_factory=dict)
    note: str = ""

    @property
    def found(self) -> bool:
        return self.n_char > 0

    def summary(self) -> dict:
        return {
            "margin": self.margin,
            "witness": None if self.witness is None else {"y": self.witness.y.tolist(), "xi": self.witness.xi.tolist()},
            "n_seeds": self.n_seeds,
            "n_char": self.n_char,
            "char_tol": self.char_tol,
            "tau": self.tau,
            "char_constants": self.char_constants,
            "note": self.note,
        }

    def to_json(self, extra: dict | None = None) -> str:
        d = self.summary()
        if extra:
            d.update(extra)
        return json.dumps(d, indent=2, sort_keys=True)

    def to_csv(self, max_rows: int = 20000) -> str:
        n = (self.samples.shape[1] - 2) // 2 if self.samples.size else 0
        head = [f"y{k + 1}" for k in range(n - 1)] + ["y_n"] + [f"xi{k + 1}" for k in range(n - 1)] + ["xi_n", "abs_p_psi", "bracket"]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(head)
        rows = self.samples
        if rows.shape[0] > max_rows:
            rows = rows[:: int(np.ceil(rows.shape[0] / max_rows))]
        for r in rows:
            wr.writerow([f"{v:.10g}" for v in r])
        return buf.getvalue()


def _project_to_char(d, xi, iters: int = 12, tol: float = 1e-12, max_move=np.inf):
    """Gauss-Newton (minimum-norm) projection of ``xi`` onto ``{p_psi(y, .) = 0}``.

    ``d`` holds the cached position data of the points. The Jacobian of
    ``(Re p_psi, Im p_psi)`` in ``xi`` is ``2 x n``; the step is
    ``-J^T (J J^T)^{-1} F`` with the 2x2 inverse written out. Points that
    wander further than ``max_move`` are abandoned and flagged in the mask.
    """
    xi0 = xi
    xi = xi.copy()
    failed = np.zeros(xi.shape[0], dtype=bool)
    max_move = np.broadcast_to(max_move, (xi.shape[0],))
    gpsi, VE = d["gpsi"], d["VE"]
    G = d["G"][..., 0, 0] if d["n"] == 2 else d["G"]
    active = np.arange(xi.shape[0])
    for _ in range(iters):
        if active.size == 0:
            break
        zeta = xi[active] + 1j * gpsi[active]
        if d["n"] == 2:
            gz = G[active] * zeta[:, 0]
            p = zeta[:, 1] ** 2 + gz * zeta[:, 0] + VE[active]
            dz = np.stack([2 * gz, 2 * zeta[:, 1]], axis=-1)
        else:
            Gz = np.einsum("mij,mj->mi", G[active], zeta[:, :-1])
            p = zeta[:, -1] ** 2 + np.einsum("mi,mi->m", zeta[:, :-1], Gz) + VE[active]
            dz = np.concatenate([2 * Gz, 2 * zeta[:, -1:]], axis=-1)
        Fr, Fi = p.real, p.imag
        Jr, Ji = dz.real, dz.imag
        a = np.sum(Jr * Jr, axis=-1)
        b = np.sum(Jr * Ji, axis=-1)
        c = np.sum(Ji * Ji, axis=-1)
        det = a * c - b * b
        safe = np.where(np.abs(det) > 1e-300, det, np.inf)
        l1 = (c * Fr - b * Fi) / safe
        l2 = (a * Fi - b * Fr) / safe
        xi[active] -= Jr * l1[:, None] + Ji * l2[:, None]
        gone = np.linalg.norm(xi[active] - xi0[active], axis=-1) > max_move[active]
        failed[active[gone]] = True
        active = active[(np.abs(p) > tol) & ~gone]
    return xi, failed


def bracket_margin(
    model: GeodesicSphereModel,
    w: CarlemanWeight,
    grid: PhaseGrid,
    char_tol: float | None = None,
    *,
    project: bool = True,
    chunk_size: int = 1 << 19,
    keep_samples: bool = True,
    max_samples: int = 20000,
) -> BracketScan:
    """Minimum of ``{Re p_psi, Im p_psi}`` over sampled points of the characteristic set.

    Seeds are grid points with ``|p_psi| < char_tol``; with ``char_tol=None`` the
    threshold is ``10 * max spacing * |grad p_psi|`` at each point. With
    ``project=True`` every seed is moved along the momentum fibre onto the exact
    characteristic set before the bracket is evaluated (seeds that fail to
    converge within a few grid cells, or that leave the scanned momentum box,
    are discarded). At most about
    ``max_samples`` characteristic points are retained for CSV output.
    """
    if grid.size == 0:
        raise DomainError("empty grid")
    if grid.n != model.n:
        raise DomainError("grid and model dimensions differ")
    if char_tol is not None and char_tol <= 0:
        raise DomainError("char_tol must be positive")
    h_max = float(np.max(grid.spacings()))
    xi_lo = np.array([a.min() for a in grid.xi_axes])
    xi_hi = np.array([a.max() for a in grid.xi_axes])
    best, witness = np.inf, None
    rows = []
    stride = max(1, grid.size // max_samples)
    n_seeds = n_char = 0
    tol_used = 0.0
    dev_a, dev_xin = 0.0, 0.0
    for y, xi in grid.chunks(chunk_size):
        d = _y_data(model, w, y)
        p, dy, dz = _eval_p(d, xi)
        gnorm = np.sqrt(np.sum(np.abs(dy) ** 2 + np.abs(dz) ** 2, axis=-1))
        tol = 10 * h_max * gnorm if char_tol is None else np.full(p.shape, char_tol)
        sel = np.abs(p) < tol
        if not sel.any():
            continue
        tol_used = max(tol_used, float(np.max(tol[sel])))
        idx = np.nonzero(sel)[0]
        ds, xs = _subset(d, idx), xi[idx]
        ys = y[idx]
        n_seeds += idx.size
        if project:
            limit = 5 * h_max + 5 * tol[idx] / np.maximum(gnorm[idx], 1e-300)
            xs_new, failed = _project_to_char(ds, xs, max_move=limit)
            keep = np.nonzero(~failed)[0]
            pres = np.abs(_eval_p(_subset(ds, keep), xs_new[keep])[0])
            keep = keep[pres < 1e-9]
            # projected points must stay inside the scanned momentum box
            inside = np.all((xs_new[keep] >= xi_lo) & (xs_new[keep] <= xi_hi), axis=-1)
            keep = keep[inside]
            ds, ys, xs = _subset(ds, keep), ys[keep], xs_new[keep]
        if ys.shape[0] == 0:
            continue
        p_c, dy_c, dz_c = _eval_p(ds, xs)
        brc = np.sum(dz_c.real * dy_c.imag - dy_c.real * dz_c.imag, axis=-1)
        n_char += ys.shape[0]
        k = int(np.argmin(brc))
        if brc[k] < best:
            best = float(brc[k])
            witness = PhasePoint(ys[k].copy(), xs[k].copy())
        # characteristic-set invariants: a ~ beta^2 + E - V and xi_n ~ 0
        a_val = np.einsum("...i,...ij,...j->...", xs[..., :-1], model.A(ys), xs[..., :-1])
        dev_a = max(dev_a, float(np.max(np.abs(a_val - (w.beta**2 - ds["VE"])))))
        dev_xin = max(dev_xin, float(np.max(np.abs(xs[..., -1]))))
        if keep_samples:
            rows.append(np.column_stack([ys, xs, np.abs(p_c), brc])[::stride])
    samples = np.concatenate(rows) if rows else np.zeros((0, 2 * model.n + 2))
    consts = {"a_deviation": dev_a, "xi_n_max": dev_xin}
    if w.tau > 0:
        consts.update({"C_a": dev_a / w.tau, "C_xi_n": dev_xin / w.tau})
    if n_char == 0:
        return BracketScan(None, None, n_seeds, 0, tol_used, w.tau, samples, consts, note="no char points found")
    return BracketScan(best, witness, n_seeds, n_char, tol_used, w.tau, samples, consts)


@dataclass
class TauEstimate:
    tau_Y: float
    history: list
    monotone: bool

    def to_dict(self):
        return {"tau_Y": self.tau_Y, "history": self.history, "monotone": self.monotone}


def max_tau_estimate(
    model: GeodesicSphereModel,
    weight_family: Callable[[float], CarlemanWeight] | CarlemanWeight,
    grid: PhaseGrid,
    *,
    tau_min: float = 1e-3,
    tau_max: float = 1.0,
    iters: int = 12,
    margin_tol: float = 1e-8,
) -> TauEstimate:
    """Largest tested ``tau`` with positive bracket margin, by bisection on ``[tau_min, tau_max]``."""
    family = weight_family.with_tau if isinstance(weight_family, CarlemanWeight) else weight_family

    def margin(t):
        scan = bracket_margin(model, family(t), grid, keep_samples=False)
        return -np.inf if scan.margin is None else scan.margin

    history = []
    m_lo = margin(tau_min)
    history.append((tau_min, m_lo))
    if not m_lo > margin_tol:
        raise InadmissibleModelError(f"bracket margin {m_lo:.3g} is not positive at tau = {tau_min}")
    m_hi = margin(tau_max)
    history.append((tau_max, m_hi))
    if m_hi > margin_tol:
        return TauEstimate(tau_max, history, True)
    lo, hi = tau_min, tau_max
    for _ in range(iters):
        mid = np.sqrt(lo * hi) if hi / lo > 4 else 0.5 * (lo + hi)
        mm = margin(mid)
        history.append((mid, mm))
        if mm > margin_tol:
            lo = mid
        else:
            hi = mid
    ordered = sorted(history)
    signs = [m > margin_tol for _, m in ordered]
    monotone = all(a >= b for a, b in zip(signs, signs[1:]))
    return TauEstimate(lo, [(float(t), float(m)) for t, m in history], monotone)


# ---------------------------------------------------------------------- regions
@dataclass(frozen=True)
class RegionBox:
    """``{r_lo <= |y'| <= r_hi, yn_lo <= y_n <= yn_hi}``."""

    r_lo: float
    r_hi: float
    yn_lo: float
    yn_hi: float

    def contains(self, y, slack: float = 0.0) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        s = np.linalg.norm(y[..., :-1], axis=-1)
        yn = y[..., -1]
        return (s >= self.r_lo - slack) & (s <= self.r_hi + slack) & (yn >= self.yn_lo - slack) & (yn <= self.yn_hi + slack)

    def as_dict(self):
        return {"r": [self.r_lo, self.r_hi], "y_n": [self.yn_lo, self.yn_hi]}


@dataclass(frozen=True)
class RegionPartition:
    """Control, black-box and transition regions with the product cutoff ``chi_eps``."""

    U_cn: RegionBox
    U_bb: RegionBox
    U_tr: RegionBox
    U_tr_tilde: RegionBox
    tau_H: float
    eps: float
    c_Y: float

    def _factors(self, y):
        y = np.asarray(y, dtype=float)
        yn = y[..., -1]
        s = np.linalg.norm(y[..., :-1], axis=-1)
        eps, tH, c = self.eps, self.tau_H, self.c_Y
        SY, dSY, _ = _smoothstep((yn + 2 * eps) / eps)  # 0 at -2eps, 1 at -eps
        SH, dSH, _ = _smoothstep((yn - (tH - eps / 2)) / eps)  # 0 at tH - eps/2, 1 at tH + eps/2
        rt_lo, rt_hi = self.U_tr_tilde.r_lo, self.U_tr_tilde.r_hi
        ST, dST, _ = _smoothstep((s - rt_lo) / (rt_hi - rt_lo))
        return (SY, dSY / eps), (1 - SH, -dSH / eps), (1 - ST, -dST / (rt_hi - rt_lo)), s

    def chi(self, y) -> np.ndarray:
        (a, _), (b, _), (c, _), _ = self._factors(y)
        return a * b * c

    def grad_chi(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        (a, da), (b, db), (c, dc), s = self._factors(y)
        g = np.zeros(y.shape)
        safe = np.where(s > 0, s, 1.0)
        g[..., :-1] = (a * b * dc / safe)[..., None] * y[..., :-1]
        g[..., -1] = da * b * c + a * db * c
        return g

    def gradient_support_test(self, samples: int = 10_000, seed: int = 0) -> dict:
        """Sample ``grad chi`` and confirm it vanishes outside ``U~_tr u U_bb u U_cn``."""
        rng = np.random.default_rng(seed)
        m = 1
        n_dim = m + 1
        lo = np.array([-self.c_Y] * m + [-3 * self.eps])
        hi = np.array([self.c_Y] * m + [self.tau_H + 3 * self.eps])
        y = lo + (hi - lo) * rng.random((samples, n_dim))
        g = np.linalg.norm(self.grad_chi(y), axis=-1)
        live = g > 1e-12
        inside = self.U_tr_tilde.contains(y, 1e-12) | self.U_bb.contains(y, 1e-12) | self.U_cn.contains(y, 1e-12)
        bad = live & ~inside
        return {"samples": samples, "live": int(live.sum()), "violations": int(bad.sum()), "ok": not bad.any()}

    def control_ball_ok(self, c0: float = 0.2, samples: int = 2000, seed: int = 1) -> bool:
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(samples, 2))
        pts *= (c0 * self.eps * rng.random(samples) / np.linalg.norm(pts, axis=-1))[:, None]
        return bool(np.allclose(self.chi(pts), 1.0))

    def tube_inclusion_k(self, dist_H: Callable, samples: int = 41) -> dict:
        """Sampled inclusion constant for the black-box neighbourhood of ``q_H``.

        The box ``{|y_n - tau_H| < eps, |y'| <= 4 eps}`` lies in the tube
        ``U_H(k eps)`` for every ``k > k_min = sup dist_H / eps``. The tube
        lower bound needs ``k > 2``, so ``k = max(k_min, 2)`` plus a small
        margin is reported together with ``k_min``.

        Args:
            dist_H: distance to the hypersurface, evaluated on ``(N, 2)`` points.
            samples: samples per axis of the box.
        """
        eps = self.eps
        r = np.linspace(-4 * eps, 4 * eps, samples)
        yn = np.linspace(self.tau_H - eps, self.tau_H + eps, samples)
        R, Y = np.meshgrid(r, yn, indexing="ij")
        d = np.asarray(dist_H(np.stack([R.ravel(), Y.ravel()], axis=-1)), dtype=float)
        k_min = float(np.max(d) / eps)
        return {"k_min": k_min, "k": max(k_min, 2.0) * (1 + 1e-6), "samples": int(d.size)}

    def as_dict(self):
        return {
            "U_cn": self.U_cn.as_dict(),
            "U_bb": self.U_bb.as_dict(),
            "U_tr": self.U_tr.as_dict(),
            "U_tr_tilde": self.U_tr_tilde.as_dict(),
            "tau_H": self.tau_H,
            "eps": self.eps,
            "c_Y": self.c_Y,
        }


def region_partition(tau_H: float, eps: float, c_Y: float, *, eps_Y: float, tau_Y: float) -> RegionPartition:
    """Build the partition after checking the parameter inequalities.

    Required: ``eps < eps_Y``, ``eps <= tau_H / 10``, ``eps_Y < tau_Y / 10``,
    ``eps_Y < c_Y / 10``, ``tau_H + 2 eps_Y < tau_Y`` and ``3 eps < c_Y / 3``.
    """
    checks = {
        "eps < eps_Y": eps < eps_Y,
        "eps <= tau_H/10": eps <= tau_H / 10 * (1 + 1e-12),
        "eps_Y < tau_Y/10": eps_Y < tau_Y / 10,
        "eps_Y < c_Y/10": eps_Y < c_Y / 10,
        "tau_H + 2 eps_Y < tau_Y": tau_H + 2 * eps_Y < tau_Y,
        "3 eps < c_Y/3": 3 * eps < c_Y / 3,
    }
    failed = tuple(k for k, ok in checks.items() if not ok)
    if failed:
        raise GeometryError("parameter constraints violated: " + "; ".join(failed), failed=failed)
    top = tau_H + eps
    return RegionPartition(
        U_cn=RegionBox(0.0, c_Y, -2 * eps, -eps),
        U_bb=RegionBox(0.0, c_Y, tau_H - eps, tau_H + eps),
        U_tr=RegionBox(c_Y / 3, c_Y, -2 * eps, top),
        U_tr_tilde=RegionBox(c_Y / 2, 5 * c_Y / 6, -2 * eps, top),
        tau_H=tau_H,
        eps=eps,
        c_Y=c_Y,
    )


def weight_envelope_report(w: CarlemanWeight, parts: RegionPartition, samples: int = 40) -> dict:
    """Check ``psi <= y_n`` on U_cn, ``psi <= -9 eps`` on U~_tr and ``psi <= tau_H + eps`` on U_bb."""

    def box_points(box: RegionBox):
        r = np.linspace(box.r_lo, box.r_hi, samples)
        yn = np.linspace(box.yn_lo, box.yn_hi, samples)
        R, Y = np.meshgrid(np.concatenate([-r[::-1], r]), yn, indexing="ij")
        return np.stack([R.ravel(), Y.ravel()], axis=-1)

    tol = 1e-12
    y = box_points(parts.U_cn)
    cn = bool(np.all(w.psi(y) <= y[:, -1] + tol))
    y = box_points(parts.U_tr_tilde)
    tr = bool(np.all(w.psi(y) <= -9 * parts.eps + tol))
    y = box_points(parts.U_bb)
    bb = bool(np.all(w.psi(y) <= parts.tau_H + parts.eps + tol))
    return {"control": cn, "transition": tr, "black_box": bb}


# ---------------------------------------------------------------------- discrete estimate
@dataclass
class SigmaMinResult:
    rows: list
    slope: float | None
    diagnostics: dict = field(default_factory=dict)


def _second_difference(N: int, d: float):
    return sparse.diags([np.ones(N - 1), -2 * np.ones(N), np.ones(N - 1)], [-1, 0, 1]) / d**2


def _first_difference(N: int, d: float):
    return sparse.diags([-np.ones(N - 1), np.ones(N - 1)], [-1, 1]) / (2 * d)


def conjugated_operator_2d(model: GeodesicSphereModel, w: CarlemanWeight, h: float, box, N: int):
    """Matrix of ``P_psi = e^{psi/h} P(h) e^{-psi/h}`` on the interior nodes of ``box`` (Dirichlet).

    ``P(h) = -h^2 d_n^2 - h^2 G(y) d'^2 + V - E``. Conjugation replaces ``h d_j`` by
    ``h d_j - psi_j``, so the weight enters through its derivatives only and the
    matrix carries no exponentially large entries. Centred differences throughout.
    """
    if model.n != 2:
        raise DomainError("the discretised estimate is implemented for 2D models only")
    (x0, x1), (n0, n1) = box
    dxp = (x1 - x0) / (N + 1)
    dxn = (n1 - n0) / (N + 1)
    wavelength = 2 * np.pi * h
    if max(dxp, dxn) > wavelength / 8:
        raise ResolutionError(f"grid spacing {max(dxp, dxn):.3g} exceeds 1/8 of the wavelength 2 pi h = {wavelength:.3g}")
    yp = x0 + dxp * np.arange(1, N + 1)
    yn = n0 + dxn * np.arange(1, N + 1)
    Yp, Yn = np.meshgrid(yp, yn, indexing="ij")
    pts = np.stack([Yp.ravel(), Yn.ravel()], axis=-1)
    G = model.G(pts)[:, 0, 0]
    _, grad, hess = w.derivatives(pts)
    I = sparse.identity(N)
    D2 = (sparse.kron(_second_difference(N, dxp), I), sparse.kron(I, _second_difference(N, dxn)))
    D1 = (sparse.kron(_first_difference(N, dxp), I), sparse.kron(I, _first_difference(N, dxn)))
    coef = (G, np.ones_like(G))
    P = sparse.diags(model.V(pts) - model.E)
    for j in range(2):
        gj = grad[:, j]
        # -(h d_j - psi_j)^2 = -h^2 d_j^2 + 2 h psi_j d_j + h psi_jj - psi_j^2
        Tj = -(h**2) * D2[j] + 2 * h * sparse.diags(gj) @ D1[j] + sparse.diags(h * hess[:, j, j] - gj**2)
        P = P + sparse.diags(coef[j]) @ Tj
    return P.tocsc()


def smallest_singular_value(M) -> float:
    """``sigma_min(M)`` of a (possibly rectangular, tall) sparse matrix.

    Uses shift-invert Lanczos on ``M^T M`` about zero with one sparse LU.
    """
    A = (M.T @ M).tocsc()
    n = A.shape[0]
    lu = spla.splu(A)
    op = spla.LinearOperator((n, n), matvec=lu.solve, dtype=float)
    val = spla.eigsh(op, k=1, which="LM", tol=1e-10, v0=np.ones(n), return_eigenvectors=False)
    return float(1.0 / np.sqrt(val[0]))


def interior_columns(N: int, layers: int = 1) -> np.ndarray:
    """Boolean mask of nodes at least ``layers`` nodes away from the Dirichlet boundary.

    Restricting the domain to these nodes imposes vanishing discrete Cauchy data,
    the discrete counterpart of compact support. Without it the conjugated
    operator carries boundary quasimodes with exponentially small singular values.
    """
    i = np.arange(N)
    ok = (i >= layers) & (i < N - layers)
    return np.outer(ok, ok).ravel()


def discrete_carleman_sigma_min(
    model: GeodesicSphereModel,
    w: CarlemanWeight,
    h_list: Sequence[float],
    grid_resolution: int = 96,
    box=None,
    layers: int = 1,
) -> SigmaMinResult:
    """Smallest singular values of the conjugated operator and the ``log sigma`` vs ``log h`` slope.

    The operator acts on grid functions vanishing within ``layers`` nodes of the
    boundary and its output is measured on the whole grid.
    """
    if box is None:
        box = ((-0.35, 0.35), (-0.35, 0.35))
    cols = interior_columns(grid_resolution, layers)
    rows = []
    for h in h_list:
        M = conjugated_operator_2d(model, w, h, box, grid_resolution)
        rows.append((float(h), smallest_singular_value(M[:, cols])))
    slope = None
    if len(rows) >= 2:
        lh = np.log([r[0] for r in rows])
        ls = np.log([r[1] for r in rows])
        slope = float(np.polyfit(lh, ls, 1)[0])
    (x0, x1), (n0, n1) = box
    diag = {
        "points_per_wavelength": [2 * np.pi * h / max((x1 - x0), (n1 - n0)) * (grid_resolution + 1) for h in h_list],
        "box": [list(box[0]), list(box[1])],
        "N": grid_resolution,
        "layers": layers,
    }
    return SigmaMinResult(rows, slope, diag)
