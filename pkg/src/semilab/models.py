"""Eigenfunction families for the computable model problems.

Three model classes are provided:

* 1D semiclassical Schrodinger operators ``-h^2 d^2/dx^2 + V - E`` on a circle
  or on an interval with Dirichlet ends;
* warped products ``M x_f S^1`` reduced to the base by the fibre mode
  ``e^{i m theta}``, ``m = round(lambda / h)``;
* plane-wave joint eigenfunctions on the flat torus.

All 1D solves use the fourth-order Numerov discretisation.  The warped base
operator ``-h^2 f^{-1} (f v')' + lambda_h^2 / f^2`` is brought to Schrodinger
form by the Liouville substitution ``v = w / sqrt(f)``, which adds
``h^2 (sqrt f)'' / sqrt f`` to the potential and turns the f-weighted inner
product into the plain one.

Amplitudes in classically forbidden bands are recovered in the log domain by
running the discrete log-derivative (Riccati) recurrence from the far side of
each band towards its turning points, which is the numerically stable direction
for the decaying branch.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import DomainError, NumericalError, PreconditionError, ResolutionError

log = logging.getLogger(__name__)

DEGENERACY_RTOL = 1e-8


@dataclass(frozen=True)
class SchrodingerProblem1D:
    """``(-h^2 d^2/dx^2 + V - E) u = 0`` on a circle or a Dirichlet interval.

    ``bounds`` is the period cell ``[a, b)`` for a circle, the interval ``[a, b]``
    otherwise.
    """

    V: Callable[[np.ndarray], np.ndarray]
    E_target: float
    h_grid: tuple = ()
    domain: str = "circle"
    bounds: tuple = (-np.pi, np.pi)
    points_per_h: float = 24.0
    window: float = 0.5
    name: str = "schrodinger"

    def __post_init__(self):
        if self.domain not in ("circle", "interval"):
            raise DomainError(f"unknown domain type {self.domain!r}")
        a, b = self.bounds
        if not b > a:
            raise DomainError("domain bounds must be increasing")
        hs = tuple(float(h) for h in self.h_grid)
        if any(h <= 0 for h in hs) or any(h2 >= h1 for h1, h2 in zip(hs, hs[1:])):
            raise DomainError("h_grid must be positive and strictly decreasing")
        object.__setattr__(self, "h_grid", hs)

    @property
    def periodic(self) -> bool:
        return self.domain == "circle"

    @property
    def length(self) -> float:
        return self.bounds[1] - self.bounds[0]

    def regular_value_margin(self, samples: int = 20001) -> float:
        """Smallest ``|V'|`` at sampled crossings of ``V = E_target`` (``inf`` if none)."""
        x = np.linspace(*self.bounds, samples)
        g = self.V(x) - self.E_target
        dV = np.gradient(self.V(x), x)
        cross = np.nonzero(np.sign(g[:-1]) != np.sign(g[1:]))[0]
        if cross.size == 0:
            return np.inf
        return float(np.min(np.maximum(np.abs(dV[cross]), np.abs(dV[cross + 1]))))


@dataclass(frozen=True)
class WarpedProduct:
    """Surface ``M x_f S^1`` with metric ``dx^2 + f(x)^2 dtheta^2`` over a base circle."""

    f: Callable[[np.ndarray], np.ndarray]
    lam: float
    h_grid: tuple = ()
    n_fiber: int = 1
    bounds: tuple = (-np.pi, np.pi)
    points_per_h: float = 24.0
    df: Callable | None = None
    d2f: Callable | None = None
    name: str = "warped"

    def __post_init__(self):
        if self.n_fiber != 1:
            raise DomainError("only the circle fibre (n_fiber = 1) is implemented")
        x = np.linspace(*self.bounds, 4001)
        if np.min(self.f(x)) <= 0:
            raise DomainError("warping profile must be bounded below by a positive constant")
        hs = tuple(float(h) for h in self.h_grid)
        if any(h <= 0 for h in hs) or any(h2 >= h1 for h1, h2 in zip(hs, hs[1:])):
            raise DomainError("h_grid must be positive and strictly decreasing")
        object.__setattr__(self, "h_grid", hs)

    def mode(self, h: float) -> int:
        return int(round(self.lam / h))

    def lam_h(self, h: float) -> float:
        return self.mode(h) * h

    def potential(self, x, h: float | None = None) -> np.ndarray:
        """Effective potential ``lambda_h^2 / f^2`` (``lambda^2 / f^2`` when ``h`` is None)."""
        lam = self.lam if h is None else self.lam_h(h)
        return lam**2 / self.f(x) ** 2

    def _derivs(self, x):
        if self.df is not None and self.d2f is not None:
            return self.df(x), self.d2f(x)
        # spectral differentiation on the periodic base
        N = 4096
        xs = self.bounds[0] + (self.bounds[1] - self.bounds[0]) * np.arange(N) / N
        k = np.fft.fftfreq(N, d=(self.bounds[1] - self.bounds[0]) / N) * 2 * np.pi
        fh = np.fft.fft(self.f(xs))
        d1 = np.real(np.fft.ifft(1j * k * fh))
        d2 = np.real(np.fft.ifft(-(k**2) * fh))
        L = self.bounds[1] - self.bounds[0]
        xm = (np.asarray(x) - self.bounds[0]) % L + self.bounds[0]
        return np.interp(xm, xs, d1, period=L), np.interp(xm, xs, d2, period=L)

    def liouville_correction(self, x) -> np.ndarray:
        """``(sqrt f)'' / sqrt f = f''/(2f) - (f')^2/(4 f^2)``."""
        f = self.f(x)
        d1, d2 = self._derivs(x)
        return d2 / (2 * f) - d1**2 / (4 * f**2)


@dataclass
class EigenEntry:
    """One member of an eigenfunction family.

    ``v`` is normalised in the model's natural inner product (weighted by ``weight``),
    ``log_abs`` is ``log|v|`` valid everywhere including deep forbidden bands.
    """

    h: float
    E: float
    x: np.ndarray
    v: np.ndarray
    log_abs: np.ndarray
    weight: np.ndarray
    residual: float
    norm: float
    meta: dict = field(default_factory=dict)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    def density_log(self) -> np.ndarray:
        """``log(weight |v|^2)``: log of the L^2 density with respect to ``dx``."""
        return 2 * self.log_abs + np.log(self.weight)

    def log_abs_at(self, x0: float) -> float:
        """``log|v(x0)|`` by local cubic interpolation of ``log|v|`` or of ``v``."""
        x = self.x
        period = self.meta.get("period")
        if period:
            a = self.meta["bounds"][0]
            x0 = (x0 - a) % period + a
        elif not (x[0] - 1e-12 <= x0 <= x[-1] + 1e-12):
            raise DomainError(f"probe {x0} outside the sampled chart [{x[0]}, {x[-1]}]")
        dx = self.dx
        i = int(np.floor((x0 - x[0]) / dx))
        idx = np.arange(i - 1, i + 3)
        if period:
            idx = idx % x.size
        else:
            idx = np.clip(idx, 0, x.size - 1)
        nodes = x[0] + dx * np.arange(i - 1, i + 3)
        la = self.log_abs[idx]
        if np.all(np.isfinite(la)) and np.ptp(la) < 2.0 and np.max(np.abs(self.v[idx])) < 1e-6 * np.max(np.abs(self.v)):
            return float(_lagrange(nodes, la, x0))
        vals = self.v[idx]
        out = _lagrange(nodes, vals, x0)
        if abs(out) == 0:
            return float(_lagrange(nodes, la, x0))
        return float(np.log(abs(out)))


def _lagrange(nodes, values, x0):
    out = 0
    for j, xj in enumerate(nodes):
        others = np.delete(nodes, j)
        out = out + values[j] * np.prod((x0 - others) / (xj - others))
    return out


@dataclass
class EigenfunctionFamily:
    """Entries ordered by decreasing ``h`` plus model metadata."""

    entries: list
    meta: dict = field(default_factory=dict)

    @property
    def hs(self) -> np.ndarray:
        return np.array([e.h for e in self.entries])

    @property
    def energies(self) -> np.ndarray:
        return np.array([e.E for e in self.entries])

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, k):
        return self.entries[k]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (str, int, float, bool)) or obj is None:
        return obj
    return repr(obj)


def entry_csv(entry: EigenEntry) -> str:
    """CSV sample block ``x, re_v, im_v, log_abs`` for one family member."""
    v = np.asarray(entry.v, dtype=complex)
    lines = ["x,re_v,im_v,log_abs"]
    for row in zip(entry.x, v.real, v.imag, entry.log_abs):
        lines.append(",".join(f"{float(c):.17e}" for c in row))
    return "\n".join(lines) + "\n"


def family_json(fam: EigenfunctionFamily, sample_files: Sequence[str] | None = None) -> str:
    """JSON metadata for a family: model metadata plus per-entry scalars.

    ``sample_files`` optionally names the CSV block written for each entry.
    """
    import json

    entries = []
    for k, e in enumerate(fam):
        d = {"h": e.h, "E": e.E, "residual": e.residual, "norm": e.norm, "points": int(e.x.size),
             "meta": _jsonable(e.meta)}
        if sample_files is not None:
            d["samples"] = sample_files[k]
        entries.append(d)
    return json.dumps({"meta": _jsonable(fam.meta), "entries": entries}, indent=2, sort_keys=True)


def write_family(fam: EigenfunctionFamily, directory) -> list:
    """Write ``family.json`` plus one ``samples_<k>.csv`` per entry; return the file names."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [f"samples_{k}.csv" for k in range(len(fam))]
    for name, e in zip(names, fam):
        (directory / name).write_text(entry_csv(e))
    (directory / "family.json").write_text(family_json(fam, names) + "\n")
    return ["family.json", *names]


# ---------------------------------------------------------------------- discretisation
def make_grid(bounds, h: float, points_per_h: float, periodic: bool, anchors: Sequence[float] = ()):
    """Uniform grid with spacing ``<= h / points_per_h``.

    For intervals the returned nodes are interior points (Dirichlet ghosts at both
    ends). The cell count is rounded up to a multiple of 8 so that simple rational
    probe points such as quarter-lengths fall on nodes.
    """
    a, b = bounds
    L = b - a
    cells = int(np.ceil(L * points_per_h / h))
    cells += (-cells) % 8
    if periodic:
        x = a + L * np.arange(cells) / cells
    else:
        x = a + L * np.arange(1, cells) / cells
    return x, L / cells


def numerov_matrices(Vx: np.ndarray, h: float, dx: float, periodic: bool):
    """Return sparse ``(K, B)`` with ``(K + B diag(V - E)) w = 0`` the Numerov scheme."""
    N = Vx.size
    c = h**2 / dx**2
    main = np.full(N, 2 * c)
    off = np.full(N - 1, -c)
    K = sparse.diags([off, main, off], [-1, 0, 1], format="lil")
    B = sparse.diags([np.full(N - 1, 1 / 12), np.full(N, 10 / 12), np.full(N - 1, 1 / 12)], [-1, 0, 1], format="lil")
    if periodic:
        K[0, N - 1] = K[N - 1, 0] = -c
        B[0, N - 1] = B[N - 1, 0] = 1 / 12
    return K.tocsc(), B.tocsc()


def numerov_eigen(x, Vx, h, dx, E_target, periodic, n_eigs: int = 6):
    """Eigenpairs of the Numerov pencil nearest ``E_target`` (shift-invert Lanczos).

    The pencil ``K w = E B w - B V w`` is equivalent to the symmetric problem
    ``(B^{-1} K + V) w = E w`` because ``B`` and ``K`` commute on both the
    periodic and the Dirichlet grid; only sparse solves are ever needed.
    """
    N = Vx.size
    K, B = numerov_matrices(Vx, h, dx, periodic)
    D = sparse.diags(Vx)
    shifted = (K + B @ (D - E_target * sparse.identity(N))).tocsc()
    lu = spla.splu(shifted)
    lu_B = spla.splu(B)
    op_inv = spla.LinearOperator((N, N), matvec=lambda z: lu.solve(B @ z), dtype=float)
    op = spla.LinearOperator((N, N), matvec=lambda z: lu_B.solve(K @ z) + Vx * z, dtype=float)
    k = min(n_eigs, N - 2)
    vals, vecs = spla.eigsh(op, k=k, sigma=E_target, OPinv=op_inv, which="LM", tol=1e-13, v0=np.ones(N))
    order = np.argsort(np.abs(vals - E_target))
    return vals[order], vecs[:, order]


def recurrence_rows(Vx, E, h, dx):
    """Three-term coefficients ``(lo, d, up)`` of the Numerov rows at energy ``E``."""
    c = h**2 / dx**2
    g = Vx - E
    lo = -c + np.roll(g, 1) / 12
    up = -c + np.roll(g, -1) / 12
    d = 2 * c + 10 * g / 12
    return lo, d, up


def _band_log_profile(lo, d, up, iL, iR):
    """Log-magnitudes and signs of the two band solutions on indices ``iL..iR``.

    ``phiL`` equals 1 at ``iL`` and 0 at ``iR``; ``phiR`` the reverse. Both are
    built from ratio (log-derivative) recurrences that run away from the end
    where the solution vanishes, so neither ever overflows.
    """
    m = iR - iL + 1
    logL = np.full(m, -np.inf)
    sgnL = np.zeros(m)
    logR = np.full(m, -np.inf)
    sgnR = np.zeros(m)
    # backward ratios t_i = phi(i+1)/phi(i)
    t = np.zeros(m)
    for i in range(iR - 1, iL, -1):
        denom = d[i] + up[i] * t[i - iL]
        t[i - 1 - iL] = -lo[i] / denom
    logL[0], sgnL[0] = 0.0, 1.0
    for j in range(1, m - 1):
        r = t[j - 1]
        logL[j] = logL[j - 1] + np.log(abs(r)) if r != 0 else -np.inf
        sgnL[j] = sgnL[j - 1] * np.sign(r)
    # forward ratios s_i = phi(i-1)/phi(i)
    s = np.zeros(m)
    for i in range(iL + 1, iR):
        denom = lo[i] * s[i - iL] + d[i]
        s[i + 1 - iL] = -up[i] / denom
    logR[m - 1], sgnR[m - 1] = 0.0, 1.0
    for j in range(m - 2, 0, -1):
        r = s[j + 1]
        logR[j] = logR[j + 1] + np.log(abs(r)) if r != 0 else -np.inf
        sgnR[j] = sgnR[j + 1] * np.sign(r)
    return logL, sgnL, logR, sgnR


def _log_combine(cL, logL, sgnL, cR, logR, sgnR):
    """``log|cL phiL + cR phiR|`` computed without leaving the log domain."""
    with np.errstate(divide="ignore"):
        a = (np.log(abs(cL)) if cL != 0 else -np.inf) + logL
        b = (np.log(abs(cR)) if cR != 0 else -np.inf) + logR
    m = np.maximum(a, b)
    finite = np.isfinite(m)
    out = np.full_like(m, -np.inf)
    uL = cL / abs(cL) if cL != 0 else 0.0
    uR = cR / abs(cR) if cR != 0 else 0.0
    val = uL * sgnL[finite] * np.exp(a[finite] - m[finite]) + uR * sgnR[finite] * np.exp(b[finite] - m[finite])
    with np.errstate(divide="ignore"):
        out[finite] = np.log(np.abs(val)) + m[finite]
    return out


def forbidden_log_amplitude(Vx, E, h, dx, w, periodic: bool, min_band: int = 4):
    """``log|w|`` on the whole grid, reconstructed inside every forbidden band.

    Returns ``(log_abs, bands, overlap_err)`` where ``bands`` lists ``(iL, iR)``
    anchor indices in the extended (ghosted) indexing and ``overlap_err`` is the
    largest discrepancy with the direct vector where the latter is well above the
    floor.
    """
    N = Vx.size
    with np.errstate(divide="ignore"):
        direct = np.log(np.abs(w))
    if periodic:
        Vext, wext, offset = Vx, w, 0
    else:
        Vext = np.concatenate([[Vx[0]], Vx, [Vx[-1]]])
        wext = np.concatenate([[0.0], w, [0.0]])
        offset = 1
    forb = Vext - E > 0
    if not periodic:
        forb[0] = forb[-1] = False
    M = Vext.size
    if forb.all():
        raise NumericalError("no classically allowed point; cannot anchor the amplitude")
    lo, d, up = recurrence_rows(Vext, E, h, dx)
    # rotate so that index 0 is allowed and no band wraps
    shift = int(np.argmin(forb)) if periodic else 0
    fr = np.roll(forb, -shift)
    lo_r, d_r, up_r, w_r = (np.roll(z, -shift) for z in (lo, d, up, wext))
    runs = []
    i = 0
    while i < M:
        if fr[i]:
            j = i
            while j + 1 < M and fr[j + 1]:
                j += 1
            runs.append((i - 1, j + 1 if j + 1 < M else 0))
            i = j + 1
        else:
            i += 1
    out_r = np.roll(np.concatenate([[-np.inf] * offset, direct, [-np.inf] * offset]) if offset else direct.copy(), -shift)
    overlap = 0.0
    bands = []
    floor = np.max(np.abs(w)) * 1e-8
    for iL, iR in runs:
        if iR == 0:  # band closes on the wrapped anchor
            iR = M
            lo_b = np.concatenate([lo_r, lo_r[:1]])
            d_b = np.concatenate([d_r, d_r[:1]])
            up_b = np.concatenate([up_r, up_r[:1]])
            wR = w_r[0]
        else:
            lo_b, d_b, up_b, wR = lo_r, d_r, up_r, w_r[iR]
        if iR - iL - 1 < min_band:
            continue
        logL, sgnL, logR, sgnR = _band_log_profile(lo_b, d_b, up_b, iL, iR)
        rec = _log_combine(w_r[iL], logL, sgnL, wR, logR, sgnR)
        inner = np.arange(iL + 1, iR)
        vals = rec[1:-1]
        ref = np.abs(w_r[inner % M])
        good = ref > floor
        if good.any():
            overlap = max(overlap, float(np.max(np.abs(vals[good] - np.log(ref[good])))))
        out_r[inner % M] = vals
        bands.append(((iL + shift) % M, (iR + shift) % M))
    out = np.roll(out_r, shift)
    if offset:
        out = out[1:-1]
    return out, bands, overlap


def _operator_residual(Vx, E, h, dx, w, periodic):
    K, B = numerov_matrices(Vx, h, dx, periodic)
    r = K @ w + B @ ((Vx - E) * w)
    return float(np.linalg.norm(r) / np.linalg.norm(w))


def _parity(vec, refl):
    return float(np.sign(np.real(np.vdot(vec, vec[refl]))))


def _select(vals, vecs, E_target, window, parity=None, refl=None):
    if parity is not None:
        want = 1.0 if parity == "even" else -1.0
        keep = [j for j in range(len(vals)) if _parity(vecs[:, j], refl) == want]
        if not keep:
            raise NumericalError(f"no {parity} eigenvalue among the {len(vals)} nearest to {E_target}")
        vals, vecs = vals[keep], vecs[:, keep]
    E = float(vals[0])
    if abs(E - E_target) > window:
        raise NumericalError(f"no eigenvalue within {window} of {E_target} (nearest {E})")
    partners = [j for j in range(1, len(vals)) if abs(vals[j] - E) <= DEGENERACY_RTOL * max(1.0, abs(E))]
    if partners:
        # rotation-invariant eigenspace: return the complex (travelling) combination
        w = (vecs[:, 0] + 1j * vecs[:, partners[0]]) / np.sqrt(2)
        E = float(0.5 * (vals[0] + vals[partners[0]]))
        return E, w, True
    return E, vecs[:, 0].astype(complex), False


def reflection_index(x, bounds, periodic):
    """Index map of the reflection ``x -> a + b - x`` on a grid from :func:`make_grid`."""
    N = x.size
    i = np.arange(N)
    return (N - i) % N if periodic else N - 1 - i


def _solve_on_grid(x, dx, Veff, h, E_target, periodic, window, parity=None, bounds=None):
    refl = None
    if parity is not None:
        refl = reflection_index(x, bounds, periodic)
        if refl is None or not np.allclose(Veff[refl], Veff, rtol=1e-10, atol=1e-12):
            raise PreconditionError("parity selection needs a potential symmetric about the chart midpoint")
    vals, vecs = numerov_eigen(x, Veff, h, dx, E_target, periodic, n_eigs=10 if parity else 6)
    E, w, degenerate = _select(vals, vecs, E_target, window, parity, refl)
    w = w / np.sqrt(np.sum(np.abs(w) ** 2) * dx)
    # fix the global phase so that the largest component is real positive
    k = int(np.argmax(np.abs(w)))
    w = w * np.exp(-1j * np.angle(w[k]))
    if not degenerate:
        w = w.real.astype(complex)
    return E, w, degenerate


def solve_1d_eigen(prob: SchrodingerProblem1D, h: float, anchors: Sequence[float] = ()) -> EigenEntry:
    """Eigenpair nearest ``prob.E_target`` with underflow-free forbidden amplitudes.

    The returned entry carries ``log_abs`` which agrees with ``log|v|`` of the
    direct vector where that is above 1e-8 of its maximum and extends it inside
    classically forbidden bands down to arbitrarily small amplitudes.
    """
    x, dx = make_grid(prob.bounds, h, prob.points_per_h, prob.periodic, anchors)
    if dx > h / 8 * 2 * np.pi:
        raise ResolutionError("grid does not resolve the semiclassical wavelength")
    Vx = prob.V(x)
    E, w, degenerate = _solve_on_grid(x, dx, Vx, h, prob.E_target, prob.periodic, prob.window)
    notes = []
    if np.all(Vx - E <= 0):
        notes.append("no turning point: forbidden-region reconstruction skipped")
        with np.errstate(divide="ignore"):
            log_abs = np.log(np.abs(w))
        bands, overlap = [], 0.0
    else:
        log_abs, bands, overlap = forbidden_log_amplitude(Vx, E, h, dx, w, prob.periodic)
    return EigenEntry(
        h=h,
        E=E,
        x=x,
        v=w,
        log_abs=log_abs,
        weight=np.ones_like(x),
        residual=_operator_residual(Vx, E, h, dx, w, prob.periodic),
        norm=1.0,
        meta={
            "model": prob.name,
            "E_target": prob.E_target,
            "drift": E - prob.E_target,
            "degenerate": degenerate,
            "bands": bands,
            "overlap_error": overlap,
            "notes": notes,
            "bounds": tuple(prob.bounds),
            "period": prob.length if prob.periodic else None,
        },
    )


def schrodinger_family(prob: SchrodingerProblem1D, targets: Sequence[float] | None = None) -> EigenfunctionFamily:
    """Solve ``prob`` at every ``h`` of its grid (optionally with per-h target energies)."""
    entries = []
    for k, h in enumerate(prob.h_grid):
        p = prob if targets is None else _retarget(prob, targets[k])
        entries.append(solve_1d_eigen(p, h))
    return EigenfunctionFamily(entries, {"model": prob.name, "kind": "schrodinger", "E_target": prob.E_target})


def _retarget(prob, E):
    from dataclasses import replace

    return replace(prob, E_target=E)


def warped_eigenfamily(
    wp: WarpedProduct, E_target: float, window: float = 0.5, parity: str | None = None
) -> EigenfunctionFamily:
    """Fibre-mode eigenfunctions ``u_h = v(x) e^{i m theta} / sqrt(2 pi)`` of the warped surface.

    ``v`` solves ``-h^2 f^{-1} (f v')' + lambda_h^2 f^{-2} v = E v`` and is
    normalised by ``int |v|^2 f dx = 1``.

    With ``parity`` set to ``"even"`` or ``"odd"`` (symmetric profiles only) the
    eigenvalue nearest ``E_target`` is taken within that parity class. Odd
    states vanish identically on the fixed points of the reflection, so
    restriction experiments on such hypersurfaces should request even states.
    """
    if parity not in (None, "even", "odd"):
        raise DomainError(f"parity must be 'even', 'odd' or None, got {parity!r}")
    entries = []
    for h in wp.h_grid:
        x, dx = make_grid(wp.bounds, h, wp.points_per_h, True)
        m = wp.mode(h)
        lam_h = m * h
        Vx = wp.potential(x, h)
        Veff = Vx + h**2 * wp.liouville_correction(x)
        E, w, degenerate = _solve_on_grid(x, dx, Veff, h, E_target, True, window, parity, wp.bounds)
        log_w, bands, overlap = forbidden_log_amplitude(Veff, E, h, dx, w, True)
        f = wp.f(x)
        v = w / np.sqrt(f)
        entries.append(
            EigenEntry(
                h=h,
                E=E,
                x=x,
                v=v,
                log_abs=log_w - 0.5 * np.log(f),
                weight=f,
                residual=_operator_residual(Veff, E, h, dx, w, True),
                norm=float(np.sum(np.abs(v) ** 2 * f) * dx),
                meta={
                    "model": wp.name,
                    "m": m,
                    "lam_h": lam_h,
                    "lam_drift": lam_h - wp.lam,
                    "E_target": E_target,
                    "drift": E - E_target,
                    "degenerate": degenerate,
                    "parity": parity,
                    "bands": bands,
                    "overlap_error": overlap,
                    "notes": [],
                    "bounds": tuple(wp.bounds),
                    "period": wp.bounds[1] - wp.bounds[0],
                },
            )
        )
    return EigenfunctionFamily(
        entries, {"model": wp.name, "kind": "warped", "lam": wp.lam, "E_target": E_target, "parity": parity}
    )


def weighted_operator(wp: WarpedProduct, h: float, points_per_h: float | None = None):
    """Second-order matrix of ``-h^2 f^{-1}(f v')' + V`` and the weight ``f`` on the grid.

    ``diag(f) @ P`` is exactly symmetric, i.e. ``P`` is self-adjoint for the
    f-weighted inner product. Used for self-adjointness checks and lacunarity
    probes; eigen-solves go through the Liouville form.
    """
    x, dx = make_grid(wp.bounds, h, points_per_h or wp.points_per_h, True)
    f = wp.f(x)
    fp = wp.f(x + dx / 2)
    fm = wp.f(x - dx / 2)
    c = h**2 / dx**2
    N = x.size
    main = c * (fp + fm) / f + wp.potential(x, h)
    upper = -c * fp / f
    lower = -c * fm / f
    P = sparse.lil_matrix((N, N))
    P.setdiag(main)
    P.setdiag(upper[:-1], 1)
    P.setdiag(lower[1:], -1)
    P[N - 1, 0] = upper[-1]
    P[0, N - 1] = lower[0]
    return x, dx, P.tocsr(), f


def torus_joint_eigen(k: Sequence[float], h: float, points: int = 256) -> EigenEntry:
    """Plane-wave joint eigenfunction ``e^{i<k,x>/h} (2 pi)^{-n/2}`` of ``(hD_{x_j})^2``.

    ``k`` is the momentum vector; ``k / h`` must be an integer frequency vector.
    Samples are on ``[0, 2 pi)^n`` with ``points`` nodes per axis, flattened in C
    order; joint eigenvalues ``k_j^2`` are stored in ``meta['joint']``.
    """
    k = np.atleast_1d(np.asarray(k, dtype=float))
    freq = k / h
    if not np.allclose(freq, np.round(freq), atol=1e-9):
        raise PreconditionError(f"momentum {k} is not admissible at h={h}: k/h must be integral")
    n = k.size
    axes = [2 * np.pi * np.arange(points) / points] * n
    mesh = np.meshgrid(*axes, indexing="ij")
    phase = sum(np.round(freq[j]) * mesh[j] for j in range(n))
    u = np.exp(1j * phase).ravel() * (2 * np.pi) ** (-n / 2)
    x = axes[0]
    return EigenEntry(
        h=h,
        E=float(np.sum(k**2)),
        x=x,
        v=u,
        log_abs=np.full(u.size, -0.5 * n * np.log(2 * np.pi)),
        weight=np.ones(u.size),
        residual=0.0,
        norm=1.0,
        meta={
            "model": "flat_torus",
            "dim": n,
            "momentum": k.tolist(),
            "joint": (k**2).tolist(),
            "points": points,
            "bounds": (0.0, 2 * np.pi),
            "period": 2 * np.pi,
            "notes": [],
        },
    )


def torus_family(k: Sequence[float], h_grid: Sequence[float], points_per_h: float = 16.0) -> EigenfunctionFamily:
    """1D flat-torus family ``e^{i k x / h}`` over an h-grid (``k / h`` integral)."""
    entries = []
    for h in h_grid:
        pts = int(np.ceil(2 * np.pi * points_per_h / h))
        pts += (-pts) % 8
        entries.append(torus_joint_eigen(k, h, pts))
    return EigenfunctionFamily(entries, {"model": "flat_torus", "kind": "torus", "momentum": list(np.atleast_1d(k))})


# ---------------------------------------------------------------------- built-ins
def harmonic_oscillator(h_grid=(), E_target=1.0, half_width=8.0, points_per_h=24.0) -> SchrodingerProblem1D:
    return SchrodingerProblem1D(
        V=lambda x: np.asarray(x) ** 2,
        E_target=E_target,
        h_grid=tuple(h_grid),
        domain="interval",
        bounds=(-half_width, half_width),
        points_per_h=points_per_h,
        name="harmonic_oscillator",
    )


def cosine_warped(lam=1.0, h_grid=(), a=2.0, points_per_h=24.0) -> WarpedProduct:
    """Profile ``f = a + cos x`` on the base circle ``[-pi, pi)``."""
    return WarpedProduct(
        f=lambda x: a + np.cos(x),
        lam=lam,
        h_grid=tuple(h_grid),
        df=lambda x: -np.sin(x),
        d2f=lambda x: -np.cos(x),
        points_per_h=points_per_h,
        name="cosine_warped",
    )
