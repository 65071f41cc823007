"""Restriction norms, tube masses, Agmon and Riemannian distances, rate fits and verdicts.

Conventions: decay rates refer to L^2 *norms*, i.e. for a sequence ``N(h)`` the
fitted rate ``r`` is the constant term of ``-h log N(h) ~ r + c h``.  All
small quantities are handled through their logarithms.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, optimize
from scipy.special import logsumexp

from .errors import DomainError, FitError, PreconditionError
from .models import EigenEntry, EigenfunctionFamily


@dataclass(frozen=True)
class HypersurfaceSpec:
    """Level set ``{x = x0}`` of the base coordinate.

    For the warped surface this is the circle ``{x0} x S^1``; for a 1D problem
    it is the point ``x0``; for a flat 2-torus it is the horizontal line
    ``{x_2 = x0}``. ``sub_arc`` restricts the fibre/line to an arc of the given
    angular length.
    """

    x0: float
    orientation: int = 1
    sub_arc: float | None = None

    def __post_init__(self):
        if self.orientation not in (1, -1):
            raise DomainError("orientation must be +1 or -1")
        if self.sub_arc is not None and not (0 < self.sub_arc <= 2 * np.pi):
            raise DomainError("sub_arc must lie in (0, 2 pi]")


# ---------------------------------------------------------------------- norms
def log_restriction_norm(entry: EigenEntry, H: HypersurfaceSpec) -> float:
    """``log ||u_h||_{L^2(H)}`` computed from the log-amplitude (never underflows)."""
    if entry.meta.get("model") == "flat_torus":
        n = entry.meta["dim"]
        ell = H.sub_arc if H.sub_arc is not None else 2 * np.pi
        if n == 1:
            return float(entry.log_abs[0])
        return float(0.5 * np.log(ell) - 0.5 * n * np.log(2 * np.pi))
    la = entry.log_abs_at(H.x0)
    weight = float(np.interp(H.x0, entry.x, entry.weight, period=entry.meta.get("period")))
    log_sq = 2 * la + np.log(weight)
    if H.sub_arc is not None:
        log_sq += np.log(H.sub_arc / (2 * np.pi))
    return float(0.5 * log_sq)


def restriction_norm(entry: EigenEntry, H: HypersurfaceSpec) -> float:
    """``||u_h||_{L^2(H)}``; for warped surfaces ``(f(x0) |v(x0)|^2)^{1/2}``."""
    return float(np.exp(log_restriction_norm(entry, H)))


def _arc_distance(x, x0, period):
    d = np.abs(np.asarray(x) - x0)
    if period:
        d = np.minimum(d % period, period - d % period)
    return d


def log_tube_norm(entry: EigenEntry, H: HypersurfaceSpec, eps: float) -> float:
    """``log ||u_h||_{L^2(U_H(eps))}`` over the Fermi tube ``{|x - x0| < eps}``."""
    if eps < 0:
        raise DomainError("tube radius must be nonnegative")
    if eps == 0:
        return -np.inf
    period = entry.meta.get("period")
    if entry.meta.get("model") == "flat_torus":
        n = entry.meta["dim"]
        frac = min(2 * eps, 2 * np.pi) / (2 * np.pi)
        return float(0.5 * np.log(frac)) if n >= 1 else 0.0
    if not period and not (entry.x[0] <= H.x0 <= entry.x[-1]):
        raise DomainError(f"tube centre {H.x0} outside the sampled chart")
    mask = _arc_distance(entry.x, H.x0, period) < eps
    if not mask.any():
        # tube thinner than one cell: midpoint rule on the interpolated density
        return float(0.5 * (2 * log_restriction_norm(entry, H) + np.log(2 * eps)))
    dens = entry.density_log()[mask]
    log_mass = logsumexp(dens) + np.log(entry.dx)
    if H.sub_arc is not None:
        log_mass += np.log(H.sub_arc / (2 * np.pi))
    return float(0.5 * log_mass)


def tube_mass(entry: EigenEntry, H: HypersurfaceSpec, eps: float) -> float:
    """``||u_h||^2_{L^2(U_H(eps))}`` in the model's measure (f dx for warped surfaces)."""
    return float(np.exp(2 * log_tube_norm(entry, H, eps)))


# ---------------------------------------------------------------------- distances
def _turning_point(g, a, b):
    """Root of ``g`` in ``[a, b]`` where ``g`` changes sign."""
    return optimize.brentq(g, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)


def _agmon_segment(g, xt, x):
    """``int_xt^x sqrt(g_+)`` with ``g(xt) = 0``, using ``t = xt + (x - xt) u^2``."""
    delta = x - xt
    if delta == 0:
        return 0.0

    def integrand(u):
        return np.sqrt(max(g(xt + delta * u * u), 0.0)) * 2 * abs(delta) * u

    val, _ = integrate.quad(integrand, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12, limit=200)
    return float(val)


def _walk_to_allowed(g, x0, direction, limit, step):
    """Walk from ``x0`` until ``g <= 0``; return the bracketing pair or None."""
    x_prev = x0
    n_steps = int(math.ceil(abs(limit - x0) / step))
    for k in range(1, n_steps + 1):
        x = x0 + direction * min(k * step, abs(limit - x0))
        if g(x) <= 0:
            return (x_prev, x)
        x_prev = x
    return None


def agmon_distance_1d(
    V: Callable,
    E: float,
    x_from: float,
    target: float | None = None,
    *,
    bounds: tuple = (-np.pi, np.pi),
    periodic: bool = True,
    step: float = 1e-3,
) -> float:
    """Agmon distance ``int sqrt((V - E)_+) dx`` from ``x_from`` to ``{V <= E}`` or to ``target``.

    On a circle both arcs are considered and the minimum returned. Simple
    turning points are integrated with a square-root substitution.
    """

    def g(x):
        return float(V(np.asarray(x, dtype=float))) - E

    a, b = bounds
    L = b - a
    if target is not None:
        return _agmon_between(g, x_from, target, bounds, periodic)
    if g(x_from) <= 0:
        return 0.0
    best = np.inf
    for direction in (-1, 1):
        limit = x_from + direction * L if periodic else (a if direction < 0 else b)
        br = _walk_to_allowed(g, x_from, direction, limit, step)
        if br is None:
            continue
        xt = _turning_point(g, min(br), max(br))
        best = min(best, _agmon_segment(g, xt, x_from))
    return float(best)


def _agmon_between(g, x1, x2, bounds, periodic):
    def seg(lo, hi):
        if hi <= lo:
            return 0.0
        val, _ = integrate.quad(lambda t: np.sqrt(max(g(t), 0.0)), lo, hi, epsabs=1e-13, epsrel=1e-11, limit=400)
        return float(val)

    lo, hi = min(x1, x2), max(x1, x2)
    direct = seg(lo, hi)
    if not periodic:
        return direct
    L = bounds[1] - bounds[0]
    other = seg(hi, lo + L)
    return float(min(direct, other))


def _intervals_of(K_hat):
    if hasattr(K_hat, "intervals"):
        return list(K_hat.intervals)
    return [tuple(iv) for iv in K_hat]


def riemannian_distance(H: HypersurfaceSpec, K_hat, period: float | None = 2 * np.pi) -> float:
    """Base-metric distance from ``x0`` to a union of closed intervals (both arcs on a circle)."""
    ivs = _intervals_of(K_hat)
    if not ivs:
        raise PreconditionError("estimated support is empty")
    best = np.inf
    for lo, hi in ivs:
        if lo <= H.x0 <= hi:
            return 0.0
        for end in (lo, hi):
            best = min(best, float(_arc_distance(end, H.x0, period)))
        if period:
            xs = (H.x0 - lo) % period
            if xs <= hi - lo:
                return 0.0
    return best


# ---------------------------------------------------------------------- fits
@dataclass
class RateFit:
    rate: float
    slope_c: float
    stderr: float
    residuals: list
    used: list

    def as_dict(self):
        return asdict(self)


def decay_rate_fit(hs, log_values, sigma=None) -> RateFit:
    """Least-squares fit of ``-h log N(h) = r + c h``.

    ``log_values`` are ``log N(h)``; non-finite entries (floor-limited) are
    dropped. ``sigma`` are optional absolute uncertainties of ``-h log N``; the
    reported standard error is scaled by the residual chi-square when that
    exceeds one.
    """
    hs = np.asarray(hs, dtype=float)
    lv = np.asarray(log_values, dtype=float)
    ok = np.isfinite(lv)
    if ok.sum() < 3:
        raise FitError(f"need at least 3 non-floor values, have {int(ok.sum())}")
    h = hs[ok]
    y = -h * lv[ok]
    s = np.ones_like(h) if sigma is None else np.maximum(np.asarray(sigma, dtype=float)[ok], 1e-12)
    A = np.column_stack([np.ones_like(h), h]) / s[:, None]
    coef, *_ = np.linalg.lstsq(A, y / s, rcond=None)
    res = y - (coef[0] + coef[1] * h)
    dof = max(len(h) - 2, 1)
    chi2 = float(np.sum((res / s) ** 2) / dof)
    cov = np.linalg.inv(A.T @ A)
    scale = max(chi2, 1.0) if sigma is not None else chi2
    stderr = float(np.sqrt(cov[0, 0] * scale))
    return RateFit(float(coef[0]), float(coef[1]), stderr, res.tolist(), np.nonzero(ok)[0].tolist())


# ---------------------------------------------------------------------- reports
@dataclass
class RestrictionReport:
    hs: list
    energies: list
    log_H: list
    log_tube: list
    tube_eps: float
    x0: float
    r_H: RateFit | None = None
    r_tube: RateFit | None = None
    d_R: float | None = None
    d_A: float | None = None
    beta: float | None = None
    eps_margin: float | None = None
    verdicts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        return out

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2, sort_keys=True)

    def trace_rows(self):
        return [(h, lh, lt) for h, lh, lt in zip(self.hs, self.log_H, self.log_tube)]


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def admissible_beta(V: Callable, E: float, bounds, factor: float = 1.05, samples: int = 20001) -> float:
    """``factor * max |V - E|^{1/2}`` over the base."""
    x = np.linspace(*bounds, samples)
    return float(factor * np.sqrt(np.max(np.abs(V(x) - E))))


def restriction_report(
    fam: EigenfunctionFamily,
    H: HypersurfaceSpec,
    *,
    tube_eps: float,
    K,
    V: Callable | None = None,
    E: float | None = None,
    bounds=(-np.pi, np.pi),
    periodic: bool = True,
    beta: float | None = None,
    eps_margin: float | None = None,
) -> RestrictionReport:
    """Assemble norms, rate fits, distances and verdicts for one hypersurface.

    ``K`` is the support used for ``d_R`` (a :class:`SupportEstimate` or a list
    of intervals). With ``V`` and ``E`` given, the Agmon distance and the
    admissible ``beta`` are computed and the energy drift of the family is
    propagated into the fit uncertainties through ``d d_A / dE``.
    """
    hs = [e.h for e in fam]
    log_H = [log_restriction_norm(e, H) for e in fam]
    log_T = [log_tube_norm(e, H, tube_eps) for e in fam]
    rep = RestrictionReport(
        hs=hs, energies=[e.E for e in fam], log_H=log_H, log_tube=log_T, tube_eps=tube_eps, x0=H.x0
    )
    rep.d_R = riemannian_distance(H, K, (bounds[1] - bounds[0]) if periodic else None)
    sigma = None
    if V is not None and E is not None:
        rep.d_A = agmon_distance_1d(V, E, H.x0, bounds=bounds, periodic=periodic)
        rep.beta = beta if beta is not None else admissible_beta(V, E, bounds)
        dE = 1e-4
        slope = (
            agmon_distance_1d(V, E + dE, H.x0, bounds=bounds, periodic=periodic)
            - agmon_distance_1d(V, E - dE, H.x0, bounds=bounds, periodic=periodic)
        ) / (2 * dE)
        sigma = np.maximum(np.abs(slope) * np.abs(np.array(rep.energies) - E), 1e-6)
        rep.meta.update({"dA_dE": float(slope), "E_target": float(E)})
    elif beta is not None:
        rep.beta = beta
    rep.eps_margin = eps_margin if eps_margin is not None else 0.05 * (rep.d_A or rep.d_R or 0.0)
    rep.r_H = decay_rate_fit(hs, log_H, sigma)
    rep.r_tube = decay_rate_fit(hs, log_T, sigma)
    rep.verdicts = theorem_verdicts(rep, rep.eps_margin)
    return rep


def theorem_verdicts(report: RestrictionReport, eps_margin: float | None = None, k_sigma: float = 2.0) -> dict:
    """Boolean verdicts for the restriction, tube, Schrodinger and Agmon bounds.

    Each comparison is inflated by ``k_sigma`` standard errors of the fit.
    """
    if report.r_H is None or report.d_R is None:
        raise PreconditionError("report needs r_H and d_R")
    eps = report.eps_margin if eps_margin is None else eps_margin
    if eps is None:
        raise PreconditionError("report needs eps_margin")
    rH, sH = report.r_H.rate, report.r_H.stderr
    out = {"laplace_restriction": rH - k_sigma * sH <= report.d_R + eps}
    if report.r_tube is not None:
        rT, sT = report.r_tube.rate, report.r_tube.stderr
        out["laplace_tube"] = rT - k_sigma * sT <= report.d_R + eps
        out["tube_restriction_consistency"] = rT <= rH + k_sigma * max(sH, sT)
    if report.beta is not None:
        out["schrodinger_restriction"] = rH - k_sigma * sH <= report.beta * (report.d_R + eps)
    if report.d_A is not None:
        out["agmon_lower"] = rH + k_sigma * sH >= report.d_A - eps
        if report.beta is not None:
            out["sandwich"] = out["agmon_lower"] and out["schrodinger_restriction"]
            out["metric_comparison"] = report.d_A <= report.beta * report.d_R + 1e-6
    return out


# ---------------------------------------------------------------------- plots
def decay_plot_svg(hs: Sequence[float], series: dict, title: str = "", width: int = 480, height: int = 320) -> str:
    """Minimal SVG line plot of ``-h log N`` against ``h`` for each named series."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    pad = 50
    hs = np.asarray(hs, dtype=float)
    ys_all = [-hs * np.asarray(v, dtype=float) for v in series.values()]
    finite = np.concatenate([y[np.isfinite(y)] for y in ys_all]) if ys_all else np.array([0.0])
    y_lo, y_hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    if y_hi - y_lo < 1e-12:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    x_lo, x_hi = 0.0, float(hs.max()) * 1.05

    def X(v):
        return pad + (v - x_lo) / (x_hi - x_lo) * (width - 2 * pad)

    def Y(v):
        return height - pad - (v - y_lo) / (y_hi - y_lo) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="16" text-anchor="middle">{title}</text>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 12}" text-anchor="middle">h</text>',
        f'<text x="14" y="{height / 2:.1f}" transform="rotate(-90 14 {height / 2:.1f})" text-anchor="middle">-h log N</text>',
        f'<text x="{pad - 4}" y="{Y(y_lo):.1f}" text-anchor="end">{y_lo:.3g}</text>',
        f'<text x="{pad - 4}" y="{Y(y_hi):.1f}" text-anchor="end">{y_hi:.3g}</text>',
        f'<text x="{X(hs.max()):.1f}" y="{height - pad + 14}" text-anchor="middle">{hs.max():.3g}</text>',
    ]
    for k, (name, y) in enumerate(zip(series.keys(), ys_all)):
        c = colors[k % len(colors)]
        pts = " ".join(f"{X(a):.2f},{Y(b):.2f}" for a, b in zip(hs, y) if np.isfinite(b))
        parts.append(f'<polyline fill="none" stroke="{c}" points="{pts}"/>')
        for a, b in zip(hs, y):
            if np.isfinite(b):
                parts.append(f'<circle cx="{X(a):.2f}" cy="{Y(b):.2f}" r="3" fill="{c}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * k}" fill="{c}" text-anchor="end">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
