"""Periodic-grid quantization, defect-measure pairings, support estimates and lacunarity fits."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla
from scipy.special import logsumexp

from .analysis import _clean, decay_rate_fit
from .errors import DomainError, FitError, PreconditionError
from .models import EigenEntry, EigenfunctionFamily, numerov_matrices

log = logging.getLogger(__name__)

FLOOR_FACTOR = 1e3
R_TOL_FLOOR = 0.02


def floor_level(n_points: int) -> float:
    """Norms below ``1e3 * eps * N`` are treated as numerical noise."""
    return FLOOR_FACTOR * np.finfo(float).eps * n_points


# ---------------------------------------------------------------------- quantization
def frequencies(N: int, L: float) -> np.ndarray:
    """Angular frequencies matching :func:`numpy.fft.fft` ordering."""
    return 2 * np.pi * np.fft.fftfreq(N, d=L / N)


def quantize_apply(
    a,
    u: np.ndarray,
    h: float,
    *,
    x: np.ndarray | None = None,
    L: float = 2 * np.pi,
    xi_window: float | None = None,
    chunk: int = 256,
) -> np.ndarray:
    """Standard (left) quantization ``Op_h(a) u`` on a uniform periodic grid.

    ``a`` is either a callable ``a(x, xi)`` broadcasting over arrays, or a list
    of ``(f, g)`` pairs meaning the separable symbol ``sum f(x) g(xi)``; the
    latter is applied with one FFT per pair. General symbols use the direct
    semidiscrete sum ``(1/N) sum_k a(x_j, h k) U_k e^{i k (x_j - x_0)}`` at cost
    ``O(N^2)``.
    """
    u = np.asarray(u)
    N = u.size
    if x is None:
        x = L * np.arange(N) / N
    x = np.asarray(x, dtype=float)
    k = frequencies(N, L)
    U = np.fft.fft(u)
    if xi_window is not None:
        live = np.abs(U) > 1e-12 * max(np.max(np.abs(U)), 1e-300)
        if np.any(np.abs(h * k[live]) > xi_window):
            raise DomainError(f"momentum window exceeded: |hk| up to {np.max(np.abs(h * k[live])):.3g} > {xi_window}")
    if not callable(a):
        out = np.zeros(N, dtype=complex)
        for f, g in a:
            fx = f(x) if callable(f) else np.full(N, complex(f))
            gk = g(h * k) if callable(g) else np.full(N, complex(g))
            out += fx * np.fft.ifft(gk * U)
        return out
    col = np.broadcast_to(np.asarray(a(x, np.zeros_like(x)), dtype=complex), (N,))
    if all(np.allclose(np.broadcast_to(a(x, np.full_like(x, t)), (N,)), col, rtol=0, atol=0) for t in (0.37, -1.91, 5.3)):
        # xi-independent symbol: pointwise multiplication
        return col * u
    phase_x = x - x[0]
    out = np.empty(N, dtype=complex)
    for s in range(0, N, chunk):
        xs = x[s : s + chunk]
        sym = np.broadcast_to(np.asarray(a(xs[:, None], h * k[None, :]), dtype=complex), (xs.size, N))
        out[s : s + chunk] = (sym * np.exp(1j * np.outer(phase_x[s : s + chunk], k))) @ U / N
    return out


# ---------------------------------------------------------------------- defect mass
@dataclass
class DefectMass:
    hs: list
    pairings: list
    extrapolated: complex
    error: float
    converged: bool

    def to_dict(self):
        d = asdict(self)
        d["pairings"] = [[float(np.real(p)), float(np.imag(p))] for p in self.pairings]
        d["extrapolated"] = [float(np.real(self.extrapolated)), float(np.imag(self.extrapolated))]
        return _clean(d)


def pairing(entry: EigenEntry, a) -> complex:
    """``<Op_h(a) u, u>`` in the entry's measure (``f dx`` for warped surfaces)."""
    period = entry.meta.get("period")
    if not period:
        raise PreconditionError("pairings need a periodic chart")
    if entry.v.size != entry.x.size:
        raise PreconditionError("pairings are implemented for 1D samples only")
    Au = quantize_apply(a, entry.v, entry.h, x=entry.x, L=period)
    return complex(np.sum(Au * np.conj(entry.v) * entry.weight) * entry.dx)


def defect_mass(fam: EigenfunctionFamily, a) -> DefectMass:
    """Pairings per ``h`` and a linear-in-``h`` Richardson extrapolation to ``h = 0``.

    The error estimate is the spread between the extrapolants built from the
    last two and the previous two scales; the sequence is flagged non-convergent
    when its last increments oscillate in sign with amplitude above that estimate.
    """
    hs = [e.h for e in fam]
    p = [pairing(e, a) for e in fam]
    if len(p) == 1:
        return DefectMass(hs, p, p[0], np.inf, False)

    def rich(i, j):
        return (hs[i] * p[j] - hs[j] * p[i]) / (hs[i] - hs[j])

    n = len(p)
    R2 = rich(n - 2, n - 1)
    if n >= 3:
        R1 = rich(n - 3, n - 2)
        err = float(abs(R2 - R1))
        d1, d2 = p[n - 2] - p[n - 3], p[n - 1] - p[n - 2]
        osc = np.real(d1) * np.real(d2) < 0 and min(abs(d1), abs(d2)) > err
        converged = not osc
    else:
        err = float(abs(p[-1] - p[-2]))
        converged = True
    return DefectMass(hs, p, complex(R2), err, bool(converged))


# ---------------------------------------------------------------------- support
@dataclass
class SupportEstimate:
    """Per-cell mass decay rates and the sublevel-set estimate ``K_hat``."""

    edges: list
    rates: list
    stderr: list
    thresholds: list
    in_K: list
    below_floor: list
    r_tol: float | None = None
    sensitivity: dict = field(default_factory=dict)
    inclusion_ok: bool | None = None

    @property
    def centers(self) -> np.ndarray:
        e = np.asarray(self.edges)
        return 0.5 * (e[:-1] + e[1:])

    @property
    def intervals(self) -> list:
        """Maximal runs of selected cells as closed intervals (wrapping runs are split)."""
        out = []
        e = self.edges
        i, n = 0, len(self.in_K)
        while i < n:
            if self.in_K[i]:
                j = i
                while j + 1 < n and self.in_K[j + 1]:
                    j += 1
                out.append((float(e[i]), float(e[j + 1])))
                i = j + 1
            else:
                i += 1
        return out

    def measure(self) -> float:
        e = np.asarray(self.edges)
        return float(np.sum(np.diff(e)[np.asarray(self.in_K, dtype=bool)]))

    def to_json(self) -> str:
        d = asdict(self)
        d["intervals"] = self.intervals
        return json.dumps(_clean(d), indent=2, sort_keys=True)

    def csv_rows(self):
        return [(c, r, s) for c, r, s in zip(self.centers, self.rates, self.stderr)]


def cell_log_masses(entry: EigenEntry, edges: np.ndarray) -> np.ndarray:
    """``log int_c |u|^2`` per cell (entry measure), from the log-amplitude."""
    a = edges[0]
    period = entry.meta.get("period")
    x = entry.x if not period else (entry.x - a) % period + a
    idx = np.searchsorted(edges, x, side="right") - 1
    idx = np.clip(idx, 0, len(edges) - 2)
    dens = entry.density_log() if entry.v.size == entry.x.size else None
    if dens is None:
        raise PreconditionError("support estimates are implemented for 1D samples only")
    out = np.full(len(edges) - 1, -np.inf)
    for c in range(len(edges) - 1):
        sel = dens[idx == c]
        if sel.size == 0:
            raise DomainError("cell narrower than the grid spacing")
        out[c] = logsumexp(sel) + np.log(entry.dx)
    return out


def support_estimate(
    fam: EigenfunctionFamily,
    cell_size: float,
    r_tol: float | None = None,
    *,
    V: Callable | None = None,
    E: float | None = None,
) -> SupportEstimate:
    """Estimate ``K = supp(pi_* mu)`` from the decay rates of local masses.

    For each cell the rate ``r(c)`` is the constant term of the fit
    ``-h log int_c |u_h|^2 = r + c h``. A cell belongs to ``K_hat`` when
    ``r(c) <= r_tol``; with ``r_tol=None`` the per-cell threshold is
    ``max(0.02, 3 * stderr(c))``.
    """
    if len(fam) < 3:
        raise FitError("support estimation needs at least 3 scales")
    first = fam[0]
    bounds = first.meta.get("bounds")
    a, b = bounds
    ncell = max(1, int(round((b - a) / cell_size)))
    edges = a + (b - a) * np.arange(ncell + 1) / ncell
    logm = np.array([cell_log_masses(e, edges) for e in fam])
    hs = fam.hs
    rates, errs, floor = [], [], []
    for c in range(ncell):
        col = logm[:, c]
        try:
            fit = decay_rate_fit(hs, col)
            rates.append(fit.rate)
            errs.append(fit.stderr)
            floor.append(False)
        except FitError:
            rates.append(np.inf)
            errs.append(np.inf)
            floor.append(True)
    rates_a, errs_a = np.array(rates), np.array(errs)

    def select(tol):
        thr = np.maximum(R_TOL_FLOOR, 3 * errs_a) if tol is None else np.full(ncell, float(tol))
        return thr, (rates_a <= thr) & ~np.array(floor)

    thr, inK = select(r_tol)
    base = r_tol if r_tol is not None else R_TOL_FLOOR
    sens = {}
    for fac in (0.5, 2.0):
        _, m = select(base * fac)
        sens[f"{fac:g}x"] = float(np.sum(np.diff(edges)[m]))
    est = SupportEstimate(
        edges=edges.tolist(),
        rates=rates_a.tolist(),
        stderr=errs_a.tolist(),
        thresholds=thr.tolist(),
        in_K=inK.tolist(),
        below_floor=floor,
        r_tol=r_tol,
        sensitivity=sens,
    )
    if V is not None and E is not None:
        allowed = V(est.centers) <= E
        dil = allowed | np.roll(allowed, 1) | np.roll(allowed, -1)
        est.inclusion_ok = bool(np.all(dil[inK]))
        if not est.inclusion_ok:
            log.warning("estimated support leaves the classically allowed region by more than one cell")
    return est


# ---------------------------------------------------------------------- lacunarity
def smooth_plateau(center: float, half_width: float, ramp: float, period: float | None = 2 * np.pi):
    """Cutoff equal to 1 on ``|x - center| <= half_width`` and 0 beyond ``half_width + ramp``."""

    def step(t):
        t = np.clip(t, 0.0, 1.0)
        with np.errstate(divide="ignore", over="ignore"):
            a = np.where(t > 0, np.exp(-1.0 / np.where(t > 0, t, 1.0)), 0.0)
            b = np.where(t < 1, np.exp(-1.0 / np.where(t < 1, 1.0 - t, 1.0)), 0.0)
        return a / (a + b)

    def chi(x):
        d = np.abs(np.asarray(x, dtype=float) - center)
        if period:
            d = np.minimum(d % period, period - d % period)
        return 1.0 - step((d - half_width) / ramp)

    chi.support = (center - half_width - ramp, center + half_width + ramp)
    chi.plateau = (center - half_width, center + half_width)
    return chi


class IdentityQ:
    """``Q = I``; evaluated in the log domain so that tiny norms never underflow."""

    log_domain = True
    name = "identity"

    def __call__(self, entry, z):
        return z


class SchrodingerQ:
    """``Q = L(h)(P(h) - E(h))`` with the discrete operator used by the eigensolver.

    On a classically forbidden band ``P - E`` is already h-elliptic, so the
    parametrix ``L(h)`` may be taken as the identity there; a different left
    factor can be supplied as a callable acting on grid vectors.
    """

    log_domain = False
    name = "L(P-E)"

    def __init__(self, potential: Callable, liouville: Callable | None = None, L: Callable | None = None):
        self.potential = potential
        self.liouville = liouville
        self.L = L

    def __call__(self, entry, z):
        h, E, x, dx = entry.h, entry.E, entry.x, entry.dx
        Vx = self.potential(x, h)
        if self.liouville is not None:
            Vx = Vx + h**2 * self.liouville(x)
        sw = np.sqrt(entry.weight)
        w = sw * z
        K, B = numerov_matrices(Vx, h, dx, periodic=True)
        lu = spla.splu(B.tocsc())
        Kw = K @ w
        Pw = lu.solve(np.ascontiguousarray(Kw.real)) + 1j * lu.solve(np.ascontiguousarray(Kw.imag))
        out = (Pw + (Vx - E) * w) / sw
        return self.L(out) if self.L is not None else out


@dataclass
class LacunarityResult:
    C0: float
    C: float
    stderr: float
    floor_limited: bool
    log_n: list
    hs: list
    quality: dict = field(default_factory=dict)

    def to_dict(self):
        return _clean(asdict(self))


def lacunarity_fit(
    Qapply,
    fam: EigenfunctionFamily,
    chi1: Callable,
    chi2: Callable,
    h_grid: Sequence[float] | None = None,
    *,
    K_hat=None,
) -> LacunarityResult:
    """Fit ``-h log n(h) = C + C0 h`` with ``n(h) = ||chi2 Q chi1 u_h||^2``.

    Values under the numerical floor are excluded; when every scale is at the
    floor the operator annihilates the family to working precision and the
    result is reported as floor-limited with ``C = inf``.
    """
    if K_hat is not None:
        lo, hi = chi1.support
        for a, b in (K_hat.intervals if hasattr(K_hat, "intervals") else K_hat):
            if not (hi < a or lo > b):
                raise PreconditionError("cutoff supports intersect the estimated support")
    entries = [e for e in fam if h_grid is None or any(abs(e.h - h) < 1e-12 for h in h_grid)]
    log_n, hs = [], []
    for e in entries:
        c1, c2 = chi1(e.x), chi2(e.x)
        if getattr(Qapply, "log_domain", False):
            with np.errstate(divide="ignore"):
                dens = 2 * np.log(np.abs(c2 * c1)) + e.density_log()
            val = float(logsumexp(dens) + np.log(e.dx))
        else:
            out = c2 * Qapply(e, c1 * e.v)
            nrm2 = float(np.sum(np.abs(out) ** 2 * e.weight) * e.dx)
            val = np.log(nrm2) if np.sqrt(nrm2) > floor_level(e.x.size) else -np.inf
        log_n.append(val)
        hs.append(e.h)
    usable = np.isfinite(log_n)
    if usable.sum() == 0:
        return LacunarityResult(np.nan, np.inf, 0.0, True, log_n, hs, {"usable": 0})
    fit = decay_rate_fit(hs, log_n)
    return LacunarityResult(
        fit.slope_c, fit.rate, fit.stderr, False, log_n, hs, {"usable": int(usable.sum()), "residuals": fit.residuals}
    )
