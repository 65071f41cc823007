import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semilab.errors import CapabilityError, DomainError
from semilab.factorize import wave_packet_pool
from semilab.microlocal import quantize_apply
from semilab.symbols import (
    BoxRegion,
    PhaseGrid,
    PhasePoint,
    SymbolExpansion,
    SymbolTerm,
    compose,
    ellipticity_margin,
    eval_symbol,
    poisson_bracket,
)


def pt(y, xi):
    return PhasePoint(np.array(y, dtype=float), np.array(xi, dtype=float))


def test_eval_constant_symbol():
    sym = SymbolExpansion.from_exprs([1], 2)
    assert eval_symbol(sym, pt([0.3, -1.0], [2.0, 0.5]), 0.1) == pytest.approx(1.0)


def test_eval_sums_lower_order_terms():
    sym = SymbolExpansion.from_exprs(["xi1", 1], 1)
    assert eval_symbol(sym, pt([0.0], [2.0]), 0.5) == pytest.approx(2.5)


def test_eval_principal_polynomial_near_sphere():
    # xi_n^2 + a - 2 y_n b - E with a = 2|xi'|^2, b = |xi'|^2, E = 1
    p = SymbolExpansion.from_exprs(["xi2**2 + 2*xi1**2 - 2*y2*xi1**2 - 1"], 2)
    assert eval_symbol(p, pt([0.0, 0.1], [1.0, 0.0]), 0.2) == pytest.approx(0.8)


def test_eval_order_prefactor():
    sym = SymbolExpansion.from_exprs(["xi1**2"], 1, order=2)
    assert eval_symbol(sym, pt([0.0], [3.0]), 0.5) == pytest.approx(9.0 / 0.25)


def test_eval_outside_region_is_domain_error():
    region = BoxRegion.from_bounds([(-1, 1)], [(-2, 2)])
    sym = SymbolExpansion.from_exprs(["xi1"], 1, region=region)
    with pytest.raises(DomainError):
        eval_symbol(sym, pt([0.0], [3.0]), 0.1)
    with pytest.raises(DomainError):
        eval_symbol(sym, pt([0.0], [1.0]), 0.0)


def test_bracket_canonical_pair_and_antisymmetry():
    xi1 = SymbolTerm.from_expr("xi1", 2)
    y1 = SymbolTerm.from_expr("y1", 2)
    f = SymbolTerm.from_expr("sin(y1)*xi2 + y2*xi1**2", 2)
    p = pt([0.4, -0.2], [1.3, 0.7])
    assert poisson_bracket(xi1, y1, p) == pytest.approx(1.0)
    assert poisson_bracket(f, f, p) == pytest.approx(0.0)


def test_bracket_symbolic_example():
    f = SymbolTerm.from_expr("xi2**2", 2)
    g = SymbolTerm.from_expr("y2", 2)
    assert poisson_bracket(f, g, pt([0.0, 0.0], [0.0, 3.0])) == pytest.approx(6.0)


coeffs = st.lists(st.floats(-2, 2, allow_nan=False), min_size=4, max_size=4)


def _poly(c):
    return SymbolTerm.from_expr(
        f"{c[0]}*xi1**2*y2 + {c[1]}*y1*xi2 + {c[2]}*xi1*xi2*y1**2 + {c[3]}*y2**3", 2
    )


@settings(max_examples=25, deadline=None)
@given(coeffs, coeffs, coeffs, st.tuples(*[st.floats(-1, 1)] * 4))
def test_bracket_leibniz_and_antisymmetry(c1, c2, c3, p4):
    f, g, k = _poly(c1), _poly(c2), _poly(c3)
    p = pt(p4[:2], p4[2:])
    lhs = poisson_bracket(f, g * k, p)
    rhs = poisson_bracket(f, g, p) * k(p.y, p.xi) + g(p.y, p.xi) * poisson_bracket(f, k, p)
    scale = 1 + abs(lhs) + abs(rhs)
    assert abs(lhs - rhs) < 1e-8 * scale
    assert abs(poisson_bracket(f, g, p) + poisson_bracket(g, f, p)) < 1e-12 * scale


def test_finite_differences_match_analytic():
    expr = "exp(y1/2)*cos(xi1) + y1**2*xi1**3"
    exact = SymbolTerm.from_expr(expr, 1)
    opaque = SymbolTerm(lambda y, xi: exact(y, xi), 1)
    y = np.array([[0.3], [1.1], [-0.7]])
    xi = np.array([[0.2], [-1.4], [0.9]])
    for ay, ax in [((1,), ()), ((), (1,)), ((1,), (1,))]:
        a = exact.diff(ay, ax)(y, xi)
        b = opaque.diff(ay, ax)(y, xi)
        assert np.max(np.abs(a - b) / np.maximum(np.abs(a), 1.0)) < 1e-6


def test_compose_identity_left():
    one = SymbolExpansion.from_exprs([1], 1)
    b = SymbolExpansion.from_exprs(["sin(y1)*xi1**2", "y1"], 1)
    y, xi = np.array([[0.3], [1.2]]), np.array([[0.5], [-2.0]])
    for K in range(3):
        c = compose(one, b, K)
        assert np.allclose(c(y, xi, 0.1), b.truncate(K)(y, xi, 0.1))


def test_compose_canonical_pair():
    c = compose(SymbolExpansion.from_exprs(["xi1"], 1), SymbolExpansion.from_exprs(["y1"], 1), 1)
    y, xi = np.array([[0.7]]), np.array([[1.9]])
    assert c.terms[0](y, xi)[0] == pytest.approx(0.7 * 1.9)
    assert c.terms[1](y, xi)[0] == pytest.approx(-1j)


def test_compose_constant_coefficient_factor_has_no_corrections():
    a = SymbolExpansion.from_exprs(["xi1 - I"], 1)
    b = SymbolExpansion.from_exprs(["(xi1**2 + 1)/(xi1 - I)"], 1)
    c = compose(a, b, 2)
    y, xi = np.zeros((5, 1)), np.linspace(-3, 3, 5)[:, None]
    assert np.allclose(c.terms[0](y, xi), xi[:, 0] ** 2 + 1)
    assert np.allclose(c.terms[1](y, xi), 0) and np.allclose(c.terms[2](y, xi), 0)


def test_compose_capability_error():
    opaque = SymbolTerm(lambda y, xi: xi[..., 0] ** 2, 1, allow_fd=False)
    with pytest.raises(CapabilityError):
        compose(SymbolExpansion((opaque,)), SymbolExpansion.from_exprs(["y1"], 1), 2)


def _apply(sym, u, h, x):
    return quantize_apply(lambda X, XI: sym(X[..., None] + 0 * XI[..., None], XI[..., None] + 0 * X[..., None], h), u, h, x=x)


def test_composition_matches_operator_product():
    a = SymbolExpansion.from_exprs(["(1 + sin(y1)/3)*xi1**3 + cos(y1)*xi1"], 1)
    b = SymbolExpansion.from_exprs(["sin(y1)*xi1**2 + 2 + cos(2*y1)"], 1)
    hs = [1 / 8, 1 / 16, 1 / 32]
    for K in (0, 1):
        c = compose(a, b, K)
        rs = []
        for h in hs:
            N = 2 * int(np.ceil(4 / h))
            x = 2 * np.pi * np.arange(N) / N
            pool = wave_packet_pool(x, h, count=3, seed=1)
            r = 0.0
            for u in pool.T:
                diff = _apply(c, u, h, x) - _apply(a, _apply(b, u, h, x), h, x)
                r = max(r, np.linalg.norm(diff) / np.linalg.norm(u))
            rs.append(r)
        slope = np.polyfit(np.log(hs), np.log(rs), 1)[0]
        assert slope >= K + 0.7


def test_ellipticity_margin_examples():
    grid = PhaseGrid.uniform([(0, 1)], [(-10, 10)], [3, 2001])
    assert ellipticity_margin(SymbolExpansion.from_exprs(["xi1 - I"], 1), grid) >= 1 - 1e-12
    assert ellipticity_margin(SymbolExpansion.from_exprs(["xi1"], 1), grid) == pytest.approx(0.0)
    quot = SymbolExpansion.from_exprs(["(xi1**2 + 1)/(xi1 - I)"], 1)
    # |a_0| = sqrt(xi^2 + 1) is smallest at xi = 0 and grows in the tail
    assert ellipticity_margin(quot, grid, xi_tail=1e3) == pytest.approx(1.0)
