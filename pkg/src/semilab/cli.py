"""Command-line experiment runner: ``semilab run | verify | plot | list-models``.

Experiments are TOML files. Each top-level table switches on one pipeline:
``[model]`` (eigenfunctions, support, restriction reports), ``[carleman]``
(bracket scan and depth estimate) and ``[factorize]`` (residual order fits).
Every run writes CSV/JSON/SVG artifacts plus ``manifest.json`` into the output
directory; CSV bodies are byte-identical across runs of the same config.

Exit codes: 0 success (possibly with warnings), 2 invalid configuration or
artifacts, 3 numerical failure in a named stage, 1 failed verification.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import platform
import re
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
import scipy
import sympy as sp
import tomli

from . import __version__
from .analysis import (
    HypersurfaceSpec,
    _clean,
    decay_plot_svg,
    decay_rate_fit,
    restriction_report,
    theorem_verdicts,
)
from .errors import ArtifactError, ConfigError, LabError
from .symbols import PhaseGrid, SymbolExpansion

log = logging.getLogger("semilab")

SCHEMA_VERSION = 1
GENERATOR = "numpy.random.PCG64"
WORKERS_ENV = "SEMILAB_WORKERS"

# ---------------------------------------------------------------------- schema
_NUM = (int, float)
_SCHEMA: dict[str, dict[str, Any]] = {
    "": {
        "schema_version": int,
        "seed": int,
        "output": str,
        "workers": int,
        "model": dict,
        "h_grid": dict,
        "hypersurface": list,
        "support": dict,
        "lacunarity": dict,
        "tolerances": dict,
        "carleman": dict,
        "factorize": dict,
    },
    "model": {
        "type": str,
        "lam": _NUM,
        "a": _NUM,
        "E": _NUM,
        "parity": str,
        "window": _NUM,
        "points_per_h": _NUM,
        "half_width": _NUM,
        "V": str,
        "domain": str,
        "bounds": list,
        "k": list,
    },
    "h_grid": {"values": list},
    "hypersurface": {"name": str, "x0": _NUM, "tube_eps": _NUM, "sub_arc": _NUM},
    "support": {"source": str, "cell_size": _NUM, "r_tol": _NUM},
    "lacunarity": {"Q": str, "chi1": list, "chi2": list},
    "tolerances": {"k_sigma": _NUM, "eps_margin": _NUM},
    "carleman": {
        "model": str,
        "n": int,
        "r": _NUM,
        "concave": bool,
        "V": str,
        "E": _NUM,
        "weight": dict,
        "scan": dict,
        "tau_estimate": dict,
    },
    "carleman.weight": {"tau": _NUM, "eps": _NUM, "c_Y": _NUM, "beta": _NUM},
    "carleman.scan": {"y_bounds": list, "xi_bounds": list, "counts": int, "char_tol": _NUM},
    "carleman.tau_estimate": {"counts": int, "tau_min": _NUM, "tau_max": _NUM, "iters": int},
    "factorize": {"q": list, "B": str, "K": list, "h_list": list, "chi1": list, "chi2": list, "test_functions": int},
}
_REQUIRED = {
    "model": ("type",),
    "h_grid": ("values",),
    "hypersurface": ("x0", "tube_eps"),
    "carleman": ("model", "weight", "scan"),
    "carleman.weight": ("tau", "eps", "c_Y"),
    "carleman.scan": ("y_bounds", "xi_bounds", "counts"),
    "factorize": ("q", "B", "K", "h_list"),
}
MODEL_TYPES = {
    "cosine_warped": "surface of revolution with profile f = a + cos x, fibre mode m ~ lam/h",
    "harmonic_oscillator": "1D operator -h^2 d^2 + x^2 on [-half_width, half_width]",
    "schrodinger": "1D operator -h^2 d^2 + V(x) with V a sympy expression in x",
    "flat_torus": "plane waves e^{i k x / h} on the circle (k/h integral)",
}
CARLEMAN_MODELS = {
    "flat": "Euclidean half-space, G = I",
    "circle": "planar circle of radius r, y_n radial offset (concave = true for the inner side)",
    "sphere": "tangentially flat sphere model G = (r/(r+y_n))^2 I in dimension n",
}


@dataclass
class ExperimentConfig:
    """Validated experiment description."""

    data: dict
    text: str
    path: Path | None = None
    output: Path = Path("semilab_run")
    seed: int = 0
    workers: int = 1
    h_grid: list = field(default_factory=list)

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def block(self, name: str) -> dict | None:
        return self.data.get(name)


def _line_of(text: str, section: str, key: str | None) -> int | None:
    """Best-effort line number of ``key`` inside ``[section]`` (1-based)."""
    current = ""
    header = re.compile(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?\s*$")
    keyline = re.compile(r"^\s*([A-Za-z0-9_\"'.-]+)\s*=")
    section_line = None
    for i, line in enumerate(text.splitlines(), start=1):
        m = header.match(line)
        if m:
            current = m.group(1)
            if current == section and section_line is None:
                section_line = i
            continue
        k = keyline.match(line)
        if k and current == section and key is not None and k.group(1).strip("\"'") == key:
            return i
    return section_line


def _fail(text, section, key, message):
    name = f"{section}.{key}" if section and key else (section or key or "")
    raise ConfigError(message, line=_line_of(text, section, key), field=name)


def _check_table(text: str, section: str, table: dict, schema_key: str | None = None):
    schema = _SCHEMA[schema_key if schema_key is not None else section]
    for key, value in table.items():
        if key not in schema:
            _fail(text, section, key, f"unknown field '{key}'")
        want = schema[key]
        if want is _NUM:
            ok = isinstance(value, _NUM) and not isinstance(value, bool)
        elif want is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        else:
            ok = isinstance(value, want)
        if not ok:
            tname = "number" if want is _NUM else getattr(want, "__name__", str(want))
            _fail(text, section, key, f"expected {tname}, got {type(value).__name__}")
    for key in _REQUIRED.get(schema_key if schema_key is not None else section, ()):
        if key not in table:
            _fail(text, section, None, f"missing required field '{key}'")


def _check_positive(text, section, key, value):
    if not (isinstance(value, _NUM) and value > 0 and math.isfinite(value)):
        _fail(text, section, key, f"must be a positive number, got {value!r}")


def parse_config(text: str, path: Path | None = None) -> ExperimentConfig:
    """Parse and validate an experiment config.

    Raises:
        ConfigError: with ``line`` and ``field`` set where they can be located.
    """
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"TOML syntax error: {exc}", line=int(m.group(1)) if m else None) from None
    _check_table(text, "", data)
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        _fail(text, "", "schema_version", f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    pipelines = [k for k in ("model", "carleman", "factorize") if k in data]
    if not pipelines:
        raise ConfigError("no pipeline requested: add a [model], [carleman] or [factorize] table", line=1, field="")
    cfg = ExperimentConfig(data=data, text=text, path=path)
    cfg.seed = data.get("seed", 0)
    cfg.output = Path(data.get("output", "semilab_run"))
    cfg.workers = max(1, data.get("workers", 1))

    if "model" in data:
        _check_table(text, "model", data["model"])
        mtype = data["model"]["type"]
        if mtype not in MODEL_TYPES:
            _fail(text, "model", "type", f"unknown model type '{mtype}' (choose from {', '.join(MODEL_TYPES)})")
        if mtype != "flat_torus" and "E" not in data["model"]:
            _fail(text, "model", None, "missing required field 'E'")
        if "h_grid" not in data:
            raise ConfigError("the [model] pipeline needs an [h_grid] table", line=None, field="h_grid")
        _check_table(text, "h_grid", data["h_grid"])
        hs = data["h_grid"]["values"]
        if len(hs) < 3 or not all(isinstance(h, _NUM) and not isinstance(h, bool) and h > 0 for h in hs):
            _fail(text, "h_grid", "values", "need at least three positive h values")
        if any(b >= a for a, b in zip(hs, hs[1:])):
            _fail(text, "h_grid", "values", "h values must be strictly decreasing")
        cfg.h_grid = [float(h) for h in hs]
        for k, hs_block in enumerate(data.get("hypersurface", [])):
            if not isinstance(hs_block, dict):
                _fail(text, "hypersurface", None, "each [[hypersurface]] entry must be a table")
            _check_table(text, "hypersurface", hs_block)
            _check_positive(text, "hypersurface", "tube_eps", hs_block["tube_eps"])
        if "support" in data:
            _check_table(text, "support", data["support"])
            src = data["support"].get("source", "estimate")
            if src not in ("allowed", "estimate"):
                _fail(text, "support", "source", "source must be 'allowed' or 'estimate'")
            if "cell_size" in data["support"]:
                _check_positive(text, "support", "cell_size", data["support"]["cell_size"])
        if "lacunarity" in data:
            lac = data["lacunarity"]
            _check_table(text, "lacunarity", lac)
            for key in ("chi1", "chi2"):
                v = lac.get(key)
                if v is None or len(v) != 3 or not all(isinstance(t, _NUM) for t in v):
                    _fail(text, "lacunarity", key, "expected [center, half_width, ramp]")
            if lac.get("Q", "identity") not in ("identity", "schrodinger"):
                _fail(text, "lacunarity", "Q", "Q must be 'identity' or 'schrodinger'")
    if "tolerances" in data:
        _check_table(text, "tolerances", data["tolerances"])
    if "carleman" in data:
        c = data["carleman"]
        _check_table(text, "carleman", c)
        if c["model"] not in CARLEMAN_MODELS:
            _fail(text, "carleman", "model", f"unknown model '{c['model']}' (choose from {', '.join(CARLEMAN_MODELS)})")
        for sub in ("weight", "scan", "tau_estimate"):
            if sub in c:
                _check_table(text, f"carleman.{sub}", c[sub])
        for key in ("tau", "eps", "c_Y"):
            _check_positive(text, "carleman.weight", key, c["weight"][key])
        if c["scan"]["counts"] < 2:
            _fail(text, "carleman.scan", "counts", "need at least two samples per axis")
    if "factorize" in data:
        f = data["factorize"]
        _check_table(text, "factorize", f)
        if any(not isinstance(k, int) or k < 0 for k in f["K"]):
            _fail(text, "factorize", "K", "truncation orders must be non-negative integers")
        hl = f["h_list"]
        if len(hl) < 2 or any(not isinstance(h, _NUM) or h <= 0 for h in hl):
            _fail(text, "factorize", "h_list", "need at least two positive h values")
    return cfg


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text, p)


# ---------------------------------------------------------------------- helpers
def worker_count(cfg: ExperimentConfig | None = None) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            log.warning("ignoring non-integer %s=%r", WORKERS_ENV, env)
    return cfg.workers if cfg is not None else 1


def ordered_map(fn: Callable, items, workers: int) -> list:
    """``[fn(x) for x in items]`` on a thread pool; results keep the input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return repr(v) if not math.isfinite(v) else f"{v:.12e}"
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    return buf.getvalue()


def read_csv(path: Path) -> tuple[list, list]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ArtifactError(f"{path.name} is empty")
    return rows[0], rows[1:]


def _float(s: str) -> float:
    return float(s) if s not in ("true", "false") else float(s == "true")


def _x_lambda(expr: str, var: str = "x") -> Callable:
    sym = sp.Symbol(var, real=True)
    e = sp.sympify(expr, locals={var: sym})
    fn = sp.lambdify(sym, e, modules="numpy")
    return lambda x: np.broadcast_to(np.asarray(fn(np.asarray(x, dtype=float)), dtype=float), np.shape(x)).copy()


class Run:
    """Accumulates artifacts, provenance, timings and warnings for one run."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.artifacts: dict[str, dict] = {}
        self.timings: dict[str, float] = {}
        self.warnings: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str, operation: str, block: str):
        (self.out / name).write_text(text)
        self.artifacts[name] = {
            "sha256": hashlib.sha256(text.encode()).hexdigest(),
            "operation": operation,
            "config_block": block,
        }

    def warn(self, msg: str):
        log.warning(msg)
        self.warnings.append(msg)

    def manifest(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "semilab_version": __version__,
            "versions": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "sympy": sp.__version__,
            },
            "config_sha256": self.cfg.sha256,
            "config_path": str(self.cfg.path) if self.cfg.path else None,
            "seed": self.cfg.seed,
            "generator": GENERATOR,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "timings": self.timings,
            "warnings": self.warnings,
            "artifacts": self.artifacts,
        }


class StageError(Exception):
    def __init__(self, stage: str, exc: Exception):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage


class _Stage:
    def __init__(self, run: Run, name: str):
        self.run, self.name = run, name

    def __enter__(self):
        self.t0 = time.perf_counter()
        log.info("stage %s", self.name)

    def __exit__(self, et, ev, tb):
        self.run.timings[self.name] = round(time.perf_counter() - self.t0, 3)
        if ev is not None and isinstance(ev, (LabError, ArithmeticError, np.linalg.LinAlgError, RuntimeError)):
            raise StageError(self.name, ev) from ev
        return False


# ---------------------------------------------------------------------- eigen pipeline
@dataclass
class ModelSetup:
    family_fn: Callable
    V: Callable | None
    E: float | None
    bounds: tuple
    periodic: bool
    name: str
    warped: Any = None


def build_model(cfg: ExperimentConfig) -> ModelSetup:
    from . import models

    m = cfg.block("model")
    mtype = m["type"]
    ppw = float(m.get("points_per_h", 24.0))
    if mtype == "cosine_warped":
        wp = models.cosine_warped(lam=float(m.get("lam", 1.0)), a=float(m.get("a", 2.0)), points_per_h=ppw)
        E = float(m["E"])
        window = float(m.get("window", 0.5))
        parity = m.get("parity")

        def fam(h):
            return models.warped_eigenfamily(dataclasses.replace(wp, h_grid=(h,)), E, window, parity)[0]

        return ModelSetup(fam, wp.potential, E, tuple(wp.bounds), True, wp.name, wp)
    if mtype in ("harmonic_oscillator", "schrodinger"):
        E = float(m["E"])
        if mtype == "harmonic_oscillator":
            prob = models.harmonic_oscillator((), E, float(m.get("half_width", 8.0)), ppw)
        else:
            if "V" not in m:
                raise ConfigError("schrodinger model needs V", line=_line_of(cfg.text, "model", None), field="model.V")
            domain = m.get("domain", "circle")
            bounds = tuple(m.get("bounds", [-np.pi, np.pi]))
            prob = models.SchrodingerProblem1D(
                V=_x_lambda(m["V"]), E_target=E, h_grid=(), domain=domain, bounds=bounds, points_per_h=ppw,
                window=float(m.get("window", 0.5)), name="schrodinger",
            )

        def fam(h):
            return models.solve_1d_eigen(prob, h)

        return ModelSetup(fam, prob.V, E, tuple(prob.bounds), prob.periodic, prob.name)
    if mtype == "flat_torus":
        k = m.get("k", [1.0])

        def fam(h):
            return models.torus_family(k, (h,), ppw)[0]

        return ModelSetup(fam, None, None, (0.0, 2 * np.pi), True, "flat_torus")
    raise ConfigError(f"unknown model type {mtype}", field="model.type")


def _eigen_pipeline(run: Run, cfg: ExperimentConfig):
    from .microlocal import IdentityQ, SchrodingerQ, lacunarity_fit, smooth_plateau, support_estimate
    from .models import EigenfunctionFamily, entry_csv, family_json

    setup = build_model(cfg)
    with _Stage(run, "models"):
        entries = ordered_map(setup.family_fn, cfg.h_grid, worker_count(cfg))
        fam = EigenfunctionFamily(entries, {"model": setup.name})
        rows = [
            (e.h, e.E, e.meta.get("drift", 0.0), e.residual, e.norm, e.meta.get("overlap_error", 0.0))
            for e in fam
        ]
        run.write("eigen.csv", csv_text(["h", "E", "drift", "residual", "norm", "overlap_error"], rows),
                  "semilab.models family solve", "model")
        names = [f"samples_h{k}.csv" for k in range(len(fam))]
        for name, e in zip(names, fam):
            run.write(name, entry_csv(e), "semilab.models.entry_csv", "model")
        run.write("family.json", family_json(fam, names) + "\n", "semilab.models.family_json", "model")
    tol = cfg.block("tolerances") or {}
    k_sigma = float(tol.get("k_sigma", 2.0))
    sup = cfg.block("support") or {}
    with _Stage(run, "microlocal"):
        cell = float(sup.get("cell_size", 0.02))
        est = support_estimate(fam, cell, sup.get("r_tol"), V=setup.V, E=setup.E)
        run.write("support.csv", csv_text(["center", "rate", "stderr", "threshold", "in_K"],
                  [(c, r, s, t, k) for (c, r, s), t, k in zip(est.csv_rows(), est.thresholds, est.in_K)]),
                  "semilab.microlocal.support_estimate", "support")
        run.write("support.json", est.to_json() + "\n", "semilab.microlocal.support_estimate", "support")
        if sup.get("source", "estimate") == "allowed" and setup.V is not None:
            K = _allowed_intervals(setup.V, setup.E, setup.bounds)
        else:
            K = est
        if not getattr(K, "intervals", K):
            raise StageError("microlocal", LabError("support is empty"))
        lac = cfg.block("lacunarity")
        if lac:
            c1 = smooth_plateau(*lac["chi1"])
            c2 = smooth_plateau(*lac["chi2"])
            if lac.get("Q", "identity") == "identity":
                Q = IdentityQ()
            elif setup.warped is not None:
                Q = SchrodingerQ(setup.warped.potential, setup.warped.liouville_correction)
            else:
                Q = SchrodingerQ(lambda x, h: setup.V(x))
            res = lacunarity_fit(Q, fam, c1, c2)
            if res.floor_limited:
                run.warn(f"lacunarity ({Q.name}) is floor-limited: certified lacunary to working precision")
            run.write("lacunarity.json", json.dumps(res.to_dict(), indent=2, sort_keys=True) + "\n",
                      "semilab.microlocal.lacunarity_fit", "lacunarity")
            run.write("lacunarity.csv", csv_text(["h", "log_norm2"], zip(res.hs, res.log_n)),
                      "semilab.microlocal.lacunarity_fit", "lacunarity")
    with _Stage(run, "analysis"):
        for k, hb in enumerate(cfg.data.get("hypersurface", [])):
            name = hb.get("name", f"H{k}")
            H = HypersurfaceSpec(float(hb["x0"]), sub_arc=hb.get("sub_arc"))
            rep = restriction_report(
                fam, H, tube_eps=float(hb["tube_eps"]), K=K, V=setup.V, E=setup.E,
                bounds=setup.bounds, periodic=setup.periodic, eps_margin=tol.get("eps_margin"),
            )
            rep.verdicts = theorem_verdicts(rep, rep.eps_margin, k_sigma)
            rep.meta.update({"name": name, "k_sigma": k_sigma, "support_source": sup.get("source", "estimate")})
            block = f"hypersurface[{k}]"
            run.write(f"report_{name}.json", rep.to_json() + "\n", "semilab.analysis.restriction_report", block)
            run.write(f"trace_{name}.csv", csv_text(["h", "E", "log_restriction", "log_tube"],
                      [(h, E, a, b) for (h, a, b), E in zip(rep.trace_rows(), rep.energies)]),
                      "semilab.analysis.restriction_report", block)
            svg = decay_plot_svg(rep.hs, {"restriction": rep.log_H, "tube": rep.log_tube}, f"{setup.name}: {name}")
            run.write(f"decay_{name}.svg", svg, "semilab.analysis.decay_plot_svg", block)
            bad = [k2 for k2, ok in rep.verdicts.items() if not ok]
            if bad:
                run.warn(f"hypersurface {name}: verdicts false: {', '.join(bad)}")


def _allowed_intervals(V: Callable, E: float, bounds, samples: int = 200001) -> list:
    """Closed intervals where ``V <= E`` (classically allowed region), refined by bisection."""
    from scipy.optimize import brentq

    x = np.linspace(bounds[0], bounds[1], samples)
    ok = V(x) <= E
    out, i = [], 0
    g = lambda t: float(V(np.array([t]))[0] - E)  # noqa: E731
    while i < samples:
        if ok[i]:
            j = i
            while j + 1 < samples and ok[j + 1]:
                j += 1
            lo = x[i] if i == 0 else brentq(g, x[i - 1], x[i], xtol=1e-14)
            hi = x[j] if j == samples - 1 else brentq(g, x[j], x[j + 1], xtol=1e-14)
            out.append((float(lo), float(hi)))
            i = j + 1
        else:
            i += 1
    return out


# ---------------------------------------------------------------------- carleman pipeline
def _carleman_potential(expr: str, n: int):
    ys = sp.symbols(" ".join(f"y{k + 1}" for k in range(n)), real=True, seq=True)
    e = sp.sympify(expr, locals={s.name: s for s in ys})
    f = sp.lambdify(ys, e, modules="numpy")
    grads = [sp.lambdify(ys, e.diff(s), modules="numpy") for s in ys]

    def V(y):
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(np.asarray(f(*[y[..., k] for k in range(n)]), dtype=float), y.shape[:-1]).copy()

    def dV(y):
        y = np.asarray(y, dtype=float)
        cols = [np.broadcast_to(np.asarray(g(*[y[..., k] for k in range(n)]), dtype=float), y.shape[:-1]) for g in grads]
        return np.stack(cols, axis=-1)

    return V, dV


def build_carleman(cfg: ExperimentConfig):
    from .carleman import CarlemanWeight, GeodesicSphereModel

    c = cfg.block("carleman")
    kind = c["model"]
    n = int(c.get("n", 2))
    V, dV = _carleman_potential(c.get("V", "0"), 2 if kind == "circle" else n)
    E = float(c.get("E", 1.0))
    if kind == "circle":
        model = GeodesicSphereModel.circle(float(c.get("r", 1.0)), V, dV, E, bool(c.get("concave", False)))
    elif kind == "sphere":
        model = GeodesicSphereModel.sphere(n, float(c.get("r", 1.0)), V, dV, E)
    else:
        model = GeodesicSphereModel.flat(n, V, dV, E)
    w = c["weight"]
    weight = CarlemanWeight(float(w["tau"]), float(w["eps"]), float(w["c_Y"]), float(w.get("beta", 1.0)))
    return model, weight


def _carleman_pipeline(run: Run, cfg: ExperimentConfig):
    from .carleman import bracket_margin, max_tau_estimate

    c = cfg.block("carleman")
    with _Stage(run, "carleman"):
        model, weight = build_carleman(cfg)
        s = c["scan"]
        grid = PhaseGrid.uniform(s["y_bounds"], s["xi_bounds"], int(s["counts"]))
        scan = bracket_margin(model, weight, grid, s.get("char_tol"))
        if not scan.found:
            run.warn("bracket scan found no characteristic points")
        run.write("bracket.json", scan.to_json({"model": model.name}) + "\n", "semilab.carleman.bracket_margin", "carleman.scan")
        run.write("bracket_margin.csv", scan.to_csv(), "semilab.carleman.bracket_margin", "carleman.scan")
        te = c.get("tau_estimate")
        if te is not None:
            tgrid = PhaseGrid.uniform(s["y_bounds"], s["xi_bounds"], int(te.get("counts", 20)))
            est = max_tau_estimate(
                model, weight, tgrid, tau_min=float(te.get("tau_min", 1e-3)), tau_max=float(te.get("tau_max", 1.0)),
                iters=int(te.get("iters", 12)),
            )
            run.write("tau_estimate.json", json.dumps(_clean(est.to_dict()), indent=2, sort_keys=True) + "\n",
                      "semilab.carleman.max_tau_estimate", "carleman.tau_estimate")
            run.write("tau_history.csv", csv_text(["tau", "margin"], est.history),
                      "semilab.carleman.max_tau_estimate", "carleman.tau_estimate")


# ---------------------------------------------------------------------- factorize pipeline
def _factorize_pipeline(run: Run, cfg: ExperimentConfig):
    from .factorize import factor_symbols, residual_order_fit, wave_packet_pool
    from .microlocal import smooth_plateau

    f = cfg.block("factorize")
    with _Stage(run, "factorize"):
        q = SymbolExpansion.from_exprs(f["q"], 1)
        chi1 = smooth_plateau(*f.get("chi1", [np.pi, 2.0, 0.5]))
        chi2 = smooth_plateau(*f.get("chi2", [np.pi, 1.2, 0.4]))
        count = int(f.get("test_functions", 8))
        pool = lambda x, h: wave_packet_pool(x, h, count=count, seed=cfg.seed)  # noqa: E731
        for K in f["K"]:
            fact = factor_symbols(q, f["B"], int(K))
            slope = residual_order_fit(q, fact, chi1, chi2, f["h_list"], pool)
            if slope < K + 0.7:
                run.warn(f"factorization K={K}: residual slope {slope:.3f} below {K + 0.7:.1f}")
            run.write(f"factorization_K{K}.json", fact.to_json() + "\n", "semilab.factorize.factor_symbols", "factorize")
            run.write(f"residual_K{K}.csv", fact.residual_csv(), "semilab.factorize.residual_order_fit", "factorize")


# ---------------------------------------------------------------------- commands
def run_experiment(cfg: ExperimentConfig, out: Path | None = None) -> tuple[int, Path]:
    """Execute every requested pipeline; returns ``(exit_code, output_dir)``."""
    out = Path(out) if out is not None else cfg.output
    run = Run(cfg, out)
    code = 0
    try:
        if cfg.block("model"):
            _eigen_pipeline(run, cfg)
        if cfg.block("carleman"):
            _carleman_pipeline(run, cfg)
        if cfg.block("factorize"):
            _factorize_pipeline(run, cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        run.warnings.append(str(exc))
        code = 3
    (out / "manifest.json").write_text(json.dumps(_clean(run.manifest()), indent=2, sort_keys=True) + "\n")
    for w in run.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return code, out


def _check(results: list, name: str, ok: bool, detail: str = ""):
    results.append((name, bool(ok), detail))


def verify_directory(path: str | os.PathLike) -> list[tuple[str, bool, str]]:
    """Re-check stored artifacts without re-running solvers.

    Raises:
        ArtifactError: missing manifest, missing artifacts or a schema mismatch.
    """
    d = Path(path)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise ArtifactError(f"no manifest.json in {d}")
    manifest = json.loads(mpath.read_text())
    version = manifest.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ArtifactError(f"schema version mismatch: artifacts have {version}, this build reads {SCHEMA_VERSION}")
    arts = manifest.get("artifacts", {})
    missing = [n for n in arts if not (d / n).exists()]
    if missing:
        raise ArtifactError(f"missing artifacts: {', '.join(missing)}")
    results: list = []
    edited = [n for n, meta in arts.items() if hashlib.sha256((d / n).read_bytes()).hexdigest() != meta["sha256"]]
    _check(results, "artifact_hashes", True, "modified: " + ", ".join(edited) if edited else "all match")

    if "eigen.csv" in arts:
        _, rows = read_csv(d / "eigen.csv")
        hs = [float(r[0]) for r in rows]
        _check(results, "h_grid_decreasing", all(b < a for a, b in zip(hs, hs[1:])))
        norms = [float(r[4]) for r in rows]
        _check(results, "normalization", all(abs(v - 1) < 1e-8 for v in norms), f"max |norm-1| = {max(abs(v - 1) for v in norms):.2e}")
        res = [float(r[3]) for r in rows]
        _check(results, "eigen_residual", all(v < 1e-6 for v in res), f"max residual = {max(res):.2e}")
    for name in sorted(n for n in arts if n.startswith("report_") and n.endswith(".json")):
        stem = name[len("report_") : -len(".json")]
        rep = json.loads((d / name).read_text())
        _, rows = read_csv(d / f"trace_{stem}.csv")
        hs = np.array([float(r[0]) for r in rows])
        lH = np.array([_float(r[2]) for r in rows])
        lT = np.array([_float(r[3]) for r in rows])
        rH = rep["r_H"]
        decaying = rH["rate"] > 2 * rH["stderr"] + 1e-3
        if decaying:
            mono = bool(np.all(np.diff(lH) < 0) and np.all(np.diff(lT) < 0))
            _check(results, f"monotonicity[{stem}]", mono, "log norms must decrease along the decreasing h-grid")
        sigma = None
        if rep.get("d_A") is not None:
            # the fit uses energy-drift weights; recover them from the stored trace
            energies = np.array([float(r[1]) for r in rows])
            sigma = _drift_sigma(rep, energies)
        for key, series in (("r_H", lH), ("r_tube", lT)):
            fit = decay_rate_fit(hs, series, sigma)
            stored = rep[key]["rate"]
            _check(results, f"rate_refit[{stem}.{key}]", abs(fit.rate - stored) <= 1e-8 * max(1.0, abs(stored)),
                   f"refit {fit.rate:.10f} vs stored {stored:.10f}")
        from .analysis import RateFit, RestrictionReport

        rr = RestrictionReport(hs=list(hs), energies=rep["energies"], log_H=list(lH), log_tube=list(lT),
                               tube_eps=rep["tube_eps"], x0=rep["x0"], d_R=rep["d_R"], d_A=rep.get("d_A"),
                               beta=rep.get("beta"), eps_margin=rep["eps_margin"])
        rr.r_H = RateFit(**rep["r_H"])
        rr.r_tube = RateFit(**rep["r_tube"])
        again = theorem_verdicts(rr, rep["eps_margin"], rep.get("meta", {}).get("k_sigma", 2.0))
        _check(results, f"verdicts[{stem}]", again == rep["verdicts"], json.dumps(again, sort_keys=True))
    if "bracket.json" in arts:
        summ = json.loads((d / "bracket.json").read_text())
        header, rows = read_csv(d / "bracket_margin.csv")
        if rows and summ.get("margin") is not None:
            vals = [float(r[-1]) for r in rows]
            _check(results, "bracket_margin_is_min", min(vals) >= float(summ["margin"]) - 1e-9 * max(1, abs(summ["margin"])),
                   f"sample min {min(vals):.6g} vs margin {summ['margin']:.6g}")
            resid = [float(r[-2]) for r in rows]
            _check(results, "characteristic_samples", max(resid) < 1e-8, f"max |p_psi| = {max(resid):.2e}")
    if "tau_estimate.json" in arts:
        te = json.loads((d / "tau_estimate.json").read_text())
        _, rows = read_csv(d / "tau_history.csv")
        hist = [(float(a), float(b)) for a, b in rows]
        ok = all(m > 0 for t, m in hist if t <= te["tau_Y"] + 1e-15)
        _check(results, "tau_estimate_consistency", ok, f"tau_Y = {te['tau_Y']:.6g}")
    for name in sorted(n for n in arts if n.startswith("factorization_K")):
        fj = json.loads((d / name).read_text())
        K = fj["K"]
        _, rows = read_csv(d / f"residual_K{K}.csv")
        hs = np.array([float(r[0]) for r in rows])
        rs = np.array([float(r[1]) for r in rows])
        use = rs > 1e3 * np.finfo(float).eps
        slope = float(np.polyfit(np.log(hs[use]), np.log(rs[use]), 1)[0]) if use.sum() >= 2 else math.inf
        stored = fj["slope"] if isinstance(fj["slope"], (int, float)) else math.inf
        _check(results, f"residual_slope_refit[K{K}]", abs(slope - stored) < 1e-8 or slope == stored, f"{slope:.6f}")
        _check(results, f"residual_order[K{K}]", slope >= K + 0.7, f"slope {slope:.3f} vs {K + 0.7:.1f}")
    return results


def _drift_sigma(rep: dict, energies: np.ndarray):
    meta = rep.get("meta", {})
    slope = meta.get("dA_dE")
    E = meta.get("E_target")
    if slope is None or E is None:
        return None
    return np.maximum(np.abs(slope) * np.abs(energies - E), 1e-6)


def replot(path: str | os.PathLike) -> list[Path]:
    """Re-emit decay SVGs from stored trace CSVs."""
    d = Path(path)
    written = []
    for csv_path in sorted(d.glob("trace_*.csv")):
        stem = csv_path.stem[len("trace_") :]
        _, rows = read_csv(csv_path)
        hs = [float(r[0]) for r in rows]
        svg = decay_plot_svg(hs, {"restriction": [_float(r[2]) for r in rows], "tube": [_float(r[3]) for r in rows]}, stem)
        out = d / f"decay_{stem}.svg"
        out.write_text(svg)
        written.append(out)
    if not written:
        raise ArtifactError(f"no trace_*.csv files in {d}")
    return written


def bundled_config(name: str) -> str:
    """Text of a config shipped with the package (e.g. ``warped_goodness.toml``)."""
    return resources.files("semilab").joinpath("configs", name).read_text()


def list_models() -> str:
    lines = ["eigenfunction models ([model] type):"]
    lines += [f"  {k:<20} {v}" for k, v in MODEL_TYPES.items()]
    lines.append("carleman models ([carleman] model):")
    lines += [f"  {k:<20} {v}" for k, v in CARLEMAN_MODELS.items()]
    lines.append("bundled configs:")
    for p in sorted(resources.files("semilab").joinpath("configs").iterdir(), key=lambda p: p.name):
        if p.name.endswith(".toml"):
            lines.append(f"  {p.name}")
    return "\n".join(lines)


def _resolve_config(arg: str) -> ExperimentConfig:
    p = Path(arg)
    if not p.exists():
        try:
            return parse_config(bundled_config(arg), Path(arg))
        except (FileNotFoundError, OSError):
            pass
    return load_config(p)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="semilab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", help="path to a TOML config, or the name of a bundled config")
    p_run.add_argument("-o", "--out", help="output directory (overrides the config)")
    p_ver = sub.add_parser("verify", help="re-check invariants of a run directory")
    p_ver.add_argument("directory")
    p_plot = sub.add_parser("plot", help="re-emit SVG plots from stored CSV traces")
    p_plot.add_argument("directory")
    sub.add_parser("list-models", help="list model types and bundled configs")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

    if args.command == "list-models":
        print(list_models())
        return 0
    if args.command == "run":
        try:
            cfg = _resolve_config(args.config)
        except ConfigError as exc:
            where = f" (line {exc.line})" if exc.line else ""
            fld = f" [{exc.field}]" if exc.field else ""
            print(f"config error{where}{fld}: {exc}", file=sys.stderr)
            return 2
        code, out = run_experiment(cfg, args.out)
        print(f"artifacts written to {out}")
        return code
    if args.command == "verify":
        try:
            results = verify_directory(args.directory)
        except ArtifactError as exc:
            print(f"artifact error: {exc}", file=sys.stderr)
            return 2
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
        return 0 if all(ok for _, ok, _ in results) else 1
    if args.command == "plot":
        try:
            for p in replot(args.directory):
                print(p)
        except ArtifactError as exc:
            print(f"artifact error: {exc}", file=sys.stderr)
            return 2
        return 0
    return 2  # pragma: no cover


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
