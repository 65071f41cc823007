import json

import numpy as np
import pytest

from semilab.errors import CapabilityError, EllipticityError, PreconditionError, ResolutionError
from semilab.factorize import (
    TubeFunction,
    apply_propagator,
    d_normal,
    diffusion_apply,
    factor_symbols,
    fd_weights,
    left_parametrix,
    propagator_identity_residual,
    residual_order_fit,
    transport_identity_check,
    tube_to_restriction_bound,
    wave_packet_pool,
)
from semilab.microlocal import quantize_apply, smooth_plateau
from semilab.symbols import PhaseGrid, SymbolExpansion, SymbolTerm, compose

Y = np.linspace(0, 2 * np.pi, 7)[:, None]
XI = np.linspace(-3, 3, 7)[:, None]
GRID = PhaseGrid.uniform([(0, 2 * np.pi)], [(-4, 4)], 9)


def q_oscillator():
    return SymbolExpansion.from_exprs(["xi1**2 + 1"], 1)


# ---------------------------------------------------------------------- factor_symbols
def test_exact_factor():
    fact = factor_symbols(SymbolExpansion.from_exprs(["xi1 - 2*I"], 1), 2, 3)
    assert np.allclose(fact.a_terms.terms[0](Y, XI), 1.0)
    for term in fact.a_terms.terms[1:]:
        assert np.allclose(term(Y, XI), 0.0)


def test_constant_B_factor():
    fact = factor_symbols(q_oscillator(), 1, 2)
    assert np.allclose(fact.a_terms.terms[0](Y, XI), XI[:, 0] + 1j)
    assert np.allclose(fact.a_terms.terms[1](Y, XI), 0.0)
    assert fact.c0 == pytest.approx(1.0)


def test_first_correction_matches_composition_oracle():
    # (a_0 + h a_{-1}) # (xi - i B) must reproduce q with no h^1 term
    fact = factor_symbols(q_oscillator(), "2 + sin(y1)", 1)
    D = SymbolExpansion((fact.diffusion_symbol(),))
    prod = compose(fact.a_terms, D, 1)
    y = np.random.default_rng(0).uniform(0, 2 * np.pi, (50, 1))
    xi = np.random.default_rng(1).uniform(-3, 3, (50, 1))
    assert np.allclose(prod.terms[0](y, xi), xi[:, 0] ** 2 + 1)
    assert np.max(np.abs(prod.terms[1](y, xi))) < 1e-12


def test_recursion_consistency():
    fact = factor_symbols(q_oscillator(), "2 + sin(y1)", 2)
    assert fact.recursion_residual(GRID) < 1e-10


def test_factor_preconditions():
    with pytest.raises(EllipticityError):
        factor_symbols(q_oscillator(), "sin(y1)", 1)
    with pytest.raises(PreconditionError):
        factor_symbols(q_oscillator(), "1 + xi1**2", 1)
    opaque = SymbolTerm(lambda y, xi: xi[..., 0] ** 2 + 1, 1, allow_fd=False)
    with pytest.raises(CapabilityError):
        factor_symbols(SymbolExpansion((opaque,)), 1, 2)


def test_factorization_serialisation():
    fact = factor_symbols(q_oscillator(), "2 + sin(y1)", 1)
    doc = json.loads(fact.to_json())
    assert doc["K"] == 1 and len(doc["a_terms"]) == 2
    assert fact.residual_csv().splitlines()[0].startswith("h")


# ---------------------------------------------------------------------- parametrix
def test_parametrix_of_constant():
    ell = left_parametrix(SymbolExpansion.from_exprs([2], 1), 2)
    assert np.allclose(ell.terms[0](Y, XI), 0.5)
    assert all(np.allclose(t(Y, XI), 0) for t in ell.terms[1:])


def test_parametrix_composes_to_identity():
    a = SymbolExpansion.from_exprs(["xi1 + I + sin(y1)/4"], 1)
    K = 2
    ell = left_parametrix(a, K)
    assert np.allclose(ell.terms[0](Y, XI), 1 / (XI[:, 0] + 1j + np.sin(Y[:, 0]) / 4))
    prod = compose(ell, a, K)
    assert np.allclose(prod.terms[0](Y, XI), 1.0)
    for t in prod.terms[1:]:
        assert np.max(np.abs(t(Y, XI))) < 1e-12


def test_parametrix_requires_ellipticity():
    with pytest.raises(EllipticityError):
        left_parametrix(SymbolExpansion.from_exprs(["xi1"], 1), 1, grid=GRID)


# ---------------------------------------------------------------------- residual fits
CHI1 = smooth_plateau(np.pi, 2.0, 0.5)
CHI2 = smooth_plateau(np.pi, 1.2, 0.4)


def test_exact_factor_residual_at_floor():
    q = SymbolExpansion.from_exprs(["xi1 - 2*I"], 1)
    fact = factor_symbols(q, 2, 0)
    slope = residual_order_fit(q, fact, CHI1, CHI2, [1 / 16, 1 / 32, 1 / 64])
    assert slope == np.inf
    assert max(r for _, r in fact.residual_trace) < 1e-12


def test_truncation_order_one_slope():
    q = q_oscillator()
    fact = factor_symbols(q, "2 + sin(y1)", 1)
    assert residual_order_fit(q, fact, CHI1, CHI2, [1 / 16, 1 / 32, 1 / 64]) >= 1.7


def test_residual_fit_guards():
    q = q_oscillator()
    fact = factor_symbols(q, "2 + sin(y1)", 1)
    with pytest.raises(PreconditionError):
        residual_order_fit(q, fact, CHI2, CHI1, [1 / 16, 1 / 32])
    with pytest.raises(ResolutionError):
        residual_order_fit(q, fact, CHI1, CHI2, [1 / 16], points_per_wavelength=4)


def _factored_apply(fact, u, h, x):
    B = fact.B(x[:, None], np.zeros((x.size, 1))).real
    w = quantize_apply([(1.0, lambda xi: xi)], u, h, x=x) - 1j * B * u
    a = fact.a_terms
    return quantize_apply(lambda X, XI: a(X[..., None] + 0 * XI[..., None], XI[..., None] + 0 * X[..., None], h), w, h, x=x)


def test_factorization_non_uniqueness():
    q = q_oscillator()
    K = 1
    f1 = factor_symbols(q, "2 + sin(y1)", K)
    f2 = factor_symbols(q, "3 + cos(y1)/2", K)
    y = np.array([[1.0]])
    xi = np.array([[0.5]])
    assert abs(f1.a_terms.terms[0](y, xi)[0] - f2.a_terms.terms[0](y, xi)[0]) > 1e-2
    hs = [1 / 8, 1 / 16, 1 / 32]
    diffs = []
    for h in hs:
        N = 2 * int(np.ceil(4 / h))
        x = 2 * np.pi * np.arange(N) / N
        pool = wave_packet_pool(x, h, count=2, seed=4)
        diffs.append(max(np.linalg.norm(_factored_apply(f1, u, h, x) - _factored_apply(f2, u, h, x)) / np.linalg.norm(u) for u in pool.T))
    assert np.polyfit(np.log(hs), np.log(diffs), 1)[0] >= K + 0.7


# ---------------------------------------------------------------------- tube functions and propagator
H = 0.05
XP = np.linspace(0, 2 * np.pi, 1024, endpoint=False)


def normal_grid(length=0.5, per_h=40):
    return np.arange(0, length + 1e-12, H / per_h)


def test_tube_resolution_guard():
    with pytest.raises(ResolutionError):
        TubeFunction.from_callable(lambda a, b: a + b, np.linspace(0, 6, 10), normal_grid(), H)


def test_fd_weights_and_normal_derivative():
    assert np.allclose(fd_weights([-1, 0, 1]), [-0.5, 0, 0.5])
    x = np.linspace(0, 1, 101)
    d = d_normal(np.sin(3 * x), x[1] - x[0], order=6)
    assert np.max(np.abs(d - 3 * np.cos(3 * x))) < 1e-8


def test_propagator_zero_source():
    Rf = TubeFunction(np.zeros((XP.size, normal_grid().size)), XP, normal_grid(), H)
    assert np.all(apply_propagator(Rf, 1.0).values == 0)


def test_propagator_constant_source_closed_form():
    xn = normal_grid()
    Rf = TubeFunction.from_callable(lambda a, b: 0 * a + 2.0, XP[:8], xn, H, check_resolution=False)
    Ef = apply_propagator(Rf, 1.0)
    exact = -(2j / 1.0) * (1 - np.exp(-xn / H))
    assert np.max(np.abs(Ef.values - exact)) < 1e-10 * np.max(np.abs(exact))


def test_propagator_trace_and_ode_identity():
    rng = np.random.default_rng(7)
    xn = normal_grid()
    for _ in range(3):
        c = rng.normal(size=4)
        Rf = TubeFunction.from_callable(lambda a, b: (c[0] + np.sin(a + c[1])) * np.cos(c[2] * b + c[3]), XP, xn, H)
        Ef = apply_propagator(Rf, 1.0)
        assert np.all(Ef.gamma_H() == 0)
        assert propagator_identity_residual(Ef, Rf, 1.0) < 1e-8


def test_propagator_rejects_nonpositive_B0():
    Rf = TubeFunction(np.ones((4, normal_grid().size)), XP[:4], normal_grid(), H, check_resolution=False)
    with pytest.raises(PreconditionError):
        apply_propagator(Rf, 0.0)


def test_propagator_smallness_tracks_source():
    J = 2
    hs = [0.05, 0.025, 0.0125]
    norms = []
    for h in hs:
        xn = np.arange(0, 0.2 + 1e-12, h / 16)
        Rf = TubeFunction.from_callable(lambda a, b: h**J * np.cos(a) * np.exp(-b), XP[::16], xn, h, check_resolution=False)
        norms.append(np.sqrt(apply_propagator(Rf, 1.0).norm2()))
    assert np.polyfit(np.log(hs), np.log(norms), 1)[0] >= J - 0.3


def test_diffusion_commutes_with_tangential_multiplier():
    rng = np.random.default_rng(2)
    xn = normal_grid(0.2)
    v = TubeFunction(rng.normal(size=(XP.size, xn.size)) + 1j * rng.normal(size=(XP.size, xn.size)), XP, xn, H)
    psi = (1 + 0.5 * np.cos(XP))[:, None]
    lhs = diffusion_apply(v.replace(psi * v.values), 1.0).values
    rhs = psi * diffusion_apply(v, 1.0).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(rhs))


# ---------------------------------------------------------------------- transport chain
def kernel_function(B0, eps=0.8):
    xn = np.arange(0, eps / 8 + 1e-12, H / 100)
    return TubeFunction.from_callable(lambda a, b: np.exp(-B0 * b / H) * (1 + 0.5 * np.cos(a)), XP, xn, H)


def test_transport_identity_on_kernel():
    assert transport_identity_check(kernel_function(1.0), 1.0).relative_defect < 1e-8


def test_transport_trivial_case():
    v = TubeFunction.from_callable(lambda a, b: np.sin(a) + 0 * b, XP, normal_grid(0.1), H)
    assert transport_identity_check(v, 0.0).defect < 1e-12


def test_transport_detects_injected_forcing():
    delta, B0 = 1e-3, 1.0
    xn = np.arange(0, 0.1 + 1e-12, H / 100)
    v = TubeFunction.from_callable(
        lambda a, b: np.sqrt((delta / B0 + np.exp(-2 * B0 * b / H)) / (2 * np.pi)) + 0 * a, XP, xn, H
    )
    assert transport_identity_check(v, B0, forcing="none").defect == pytest.approx(delta, rel=1e-4)


@pytest.mark.parametrize("B0", [0.5, 1.0, 2.0])
def test_restriction_bound_ratio(B0):
    eps = 0.8
    bound = tube_to_restriction_bound(kernel_function(B0, eps), B0, eps)
    assert bound.verdict
    assert bound.lhs / bound.rhs == pytest.approx(1 / (1 - np.exp(-B0 * eps / (4 * H))), rel=1e-6)


def test_restriction_bound_zero_function():
    v = TubeFunction(np.zeros((XP.size, normal_grid(0.1).size)), XP, normal_grid(0.1), H)
    bound = tube_to_restriction_bound(v, 1.0, 0.8)
    assert bound.lhs == 0 and bound.rhs == 0 and bound.verdict
