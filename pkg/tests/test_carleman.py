import numpy as np
import pytest

from semilab.carleman import (
    CarlemanWeight,
    GeodesicSphereModel,
    RhoCutoff,
    bracket_margin,
    build_rho,
    conjugated_symbol,
    discrete_carleman_sigma_min,
    max_tau_estimate,
    region_partition,
    weight_envelope_report,
)
from semilab.errors import DomainError, GeometryError, InadmissibleModelError, ResolutionError
from semilab.symbols import PhaseGrid


def circle_grid(counts=16, yn=0.002, c_Y=6.0):
    return PhaseGrid.uniform([(-c_Y, c_Y), (-yn, yn)], [(-1.6, 1.6), (-1.6, 1.6)], counts)


# ---------------------------------------------------------------------- cutoff and weight
def test_rho_flat_zone_and_outer_annulus():
    rho = build_rho(0.01, 3.0)
    assert rho(np.array([0.01])) == 0.0
    assert rho(np.array([1.5])) == pytest.approx(-1.0)
    r = np.linspace(-3, 3, 20001)[:, None]
    vals = rho(r)
    assert np.all(vals <= 0)
    assert np.all(vals[np.abs(r[:, 0]) <= 0.03] == 0)
    assert np.allclose(vals[(np.abs(r[:, 0]) > 1.0) & (np.abs(r[:, 0]) < 3.0)], -1.0)


def test_rho_gradient_bounded_uniformly_in_eps():
    r = np.linspace(-3, 3, 40001)[:, None]
    sups = [np.max(np.abs(build_rho(eps, 3.0).derivatives(r)[1])) for eps in (0.1, 0.05, 0.025)]
    # one constant works for the whole sequence: the sups do not grow as eps shrinks
    assert max(sups) <= 1.01 * sups[0]
    assert max(sups) < 10


def test_rho_rejects_large_eps():
    with pytest.raises(GeometryError):
        build_rho(0.5, 3.0)


def test_weight_formula():
    w = CarlemanWeight(0.2, 0.01, 3.0, beta=0.5)
    y = np.array([[2.0, 0.3], [0.0, -0.1]])
    assert np.allclose(w.psi(y), [0.5 * 0.3 - 0.4, -0.05])


# ---------------------------------------------------------------------- conjugated symbol
def test_conjugated_symbol_flat_unit_weight():
    model = GeodesicSphereModel.flat(2)
    p_psi = conjugated_symbol(model, CarlemanWeight(0.0, 0.01, 3.0, beta=1.0))
    y = np.array([[0.3, 0.1]])
    for xi_p, xi_n in [(0.5, 0.2), (1.3, -0.7)]:
        xi = np.array([[xi_p, xi_n]])
        expected = xi_n**2 + 2j * xi_n - 1 + xi_p**2 - 1
        assert p_psi.principal(y, xi)[0] == pytest.approx(expected)


def test_conjugated_symbol_zero_weight_is_p():
    model = GeodesicSphereModel.circle(1.0)
    p_psi = conjugated_symbol(model, CarlemanWeight(0.0, 0.01, 3.0, beta=0.0))
    rng = np.random.default_rng(3)
    y = rng.uniform(-0.1, 0.1, (20, 2))
    xi = rng.uniform(-2, 2, (20, 2))
    assert np.allclose(p_psi.principal(y, xi), model.p(y, xi))


def test_real_part_on_char_set_is_a_minus_two():
    scan = bracket_margin(GeodesicSphereModel.circle(1.0), CarlemanWeight(1e-3, 0.01, 6.0), circle_grid())
    assert scan.found
    assert scan.char_constants["a_deviation"] < 0.05
    assert scan.char_constants["xi_n_max"] < 0.05


# ---------------------------------------------------------------------- bracket scans
def test_circle_bracket_margin_near_eight():
    scan = bracket_margin(GeodesicSphereModel.circle(1.0), CarlemanWeight(1e-3, 0.01, 6.0), circle_grid())
    assert scan.margin == pytest.approx(8.0, rel=0.02)
    assert scan.samples.shape[1] == 6
    assert np.all(scan.samples[:, 4] < 1e-9)


def test_concave_margin_negative():
    scan = bracket_margin(
        GeodesicSphereModel.circle(1.0, concave=True), CarlemanWeight(1e-3, 0.01, 6.0), circle_grid()
    )
    assert scan.margin < 0


def test_schrodinger_curvature_dominates_gradient():
    def V(y):
        return np.asarray(y)[..., -1]

    def dV(y):
        out = np.zeros(np.shape(y))
        out[..., -1] = 1.0
        return out

    grid = PhaseGrid.uniform([(-0.2, 0.2), (-0.01, 0.01)], [(-2.5, 2.5), (-1.5, 1.5)], 20)
    w = CarlemanWeight(1e-3, 0.1, 3.0)
    strong = bracket_margin(GeodesicSphereModel.circle(0.25, V=V, dV=dV, E=0.5), w, grid)
    weak = bracket_margin(GeodesicSphereModel.circle(10.0, V=V, dV=dV, E=0.5), w, grid)
    assert strong.margin > 0
    assert weak.margin <= 0


def test_scan_without_characteristic_points():
    grid = PhaseGrid.uniform([(-1, 1), (-0.01, 0.01)], [(6, 7), (6, 7)], 6)
    scan = bracket_margin(GeodesicSphereModel.circle(1.0), CarlemanWeight(1e-3, 0.01, 6.0), grid)
    assert scan.margin is None and not scan.found
    assert scan.note == "no char points found"


def test_empty_grid_is_error():
    grid = PhaseGrid.uniform([(-1, 1), (-0.01, 0.01)], [(0, 1), (0, 1)], 0)
    with pytest.raises(DomainError):
        bracket_margin(GeodesicSphereModel.circle(1.0), CarlemanWeight(1e-3, 0.01, 6.0), grid)


def test_max_tau_estimate_and_radius_dependence():
    w = CarlemanWeight(1e-3, 0.01, 6.0)
    grid = circle_grid(16)
    small_r = max_tau_estimate(GeodesicSphereModel.circle(1.0), w, grid)
    large_r = max_tau_estimate(GeodesicSphereModel.circle(4.0), w, grid)
    assert small_r.tau_Y >= 0.1
    assert large_r.tau_Y < small_r.tau_Y


def test_flat_model_is_inadmissible():
    with pytest.raises(InadmissibleModelError):
        max_tau_estimate(GeodesicSphereModel.flat(2), CarlemanWeight(1e-3, 0.01, 6.0), circle_grid(12))


def test_model_invariants_sampled():
    model = GeodesicSphereModel.circle(2.0)
    rng = np.random.default_rng(0)
    y = np.column_stack([rng.uniform(-1, 1, 200), rng.uniform(-0.1, 0.1, 200)])
    info = model.check(y, rng.normal(size=(200, 1)))
    assert info["convex"] and info["elliptic"]
    assert info["curvature_min"] == pytest.approx(0.5)
    assert info["remainder_C"] < 1.0


def test_user_model_from_expressions():
    model = GeodesicSphereModel.from_expressions(2, a="xi1**2", b="xi1**2")
    y = np.array([[0.0, 0.1]])
    xi = np.array([[1.0, 0.0]])
    assert model.p(y, xi)[0] == pytest.approx(1 - 0.2 - 1)


# ---------------------------------------------------------------------- partition and envelope
def partition():
    return region_partition(0.1, 0.01, 3.0, eps_Y=0.02, tau_Y=0.3)


def test_partition_cutoff_values():
    parts = partition()
    assert parts.chi(np.array([0.0, 0.0])) == pytest.approx(1.0)
    assert parts.chi(np.array([0.0, 0.1 + 0.03])) == pytest.approx(0.0)
    assert parts.control_ball_ok()


def test_partition_gradient_support():
    report = partition().gradient_support_test(10_000)
    assert report["ok"] and report["live"] > 0


def test_partition_boxes_respect_invariants():
    parts = partition()
    assert -2 * parts.eps <= parts.U_cn.yn_lo and parts.U_cn.yn_hi <= -parts.eps
    assert parts.U_bb.yn_lo >= parts.tau_H - parts.eps and parts.U_bb.yn_hi <= parts.tau_H + parts.eps
    assert parts.U_tr.r_lo >= parts.c_Y / 3 and parts.U_tr.r_hi <= parts.c_Y


def test_partition_constraint_violation_names_inequality():
    with pytest.raises(GeometryError) as err:
        region_partition(0.05, 0.01, 3.0, eps_Y=0.02, tau_Y=0.3)
    assert "eps <= tau_H/10" in err.value.failed


def test_envelope_all_true_for_admissible_weight():
    parts = partition()
    assert all(weight_envelope_report(CarlemanWeight(parts.tau_H, 0.01, 3.0), parts).values())


class _FlippedRho(RhoCutoff):
    def _radial(self, s):
        R, R1, R2 = super()._radial(s)
        return -R, -R1, -R2


def test_envelope_detects_injected_fault():
    parts = partition()
    w = CarlemanWeight(parts.tau_H, 0.01, 3.0, rho=_FlippedRho(0.01, 3.0))
    assert weight_envelope_report(w, parts)["transition"] is False


# ---------------------------------------------------------------------- discretised estimate
def test_sigma_min_resolution_guard():
    with pytest.raises(ResolutionError):
        discrete_carleman_sigma_min(GeodesicSphereModel.circle(1.0), CarlemanWeight(0.05, 0.01, 3.0), [0.005])


def test_sigma_min_concave_decays_faster_than_h():
    w = CarlemanWeight(0.05, 0.01, 3.0)
    convex = discrete_carleman_sigma_min(GeodesicSphereModel.circle(1.0), w, [0.04, 0.02, 0.01])
    concave = discrete_carleman_sigma_min(GeodesicSphereModel.circle(1.0, concave=True), w, [0.04, 0.02, 0.01])
    assert 0.4 <= convex.slope <= 0.8
    assert concave.slope > 1.0


def test_tube_inclusion_constant():
    parts = partition()
    flat = parts.tube_inclusion_k(lambda y: np.abs(y[:, 1] - parts.tau_H))
    assert flat["k_min"] == pytest.approx(1.0)
    assert flat["k"] > 2
    # H curving away from the box: a circle of radius R tangent to {y_n = tau_H} at q_H
    R = 0.05
    center = np.array([0.0, parts.tau_H + R])
    curved = parts.tube_inclusion_k(lambda y: np.abs(np.linalg.norm(y - center, axis=-1) - R))
    corner = np.hypot(4 * parts.eps, R + parts.eps) - R
    assert curved["k_min"] == pytest.approx(corner / parts.eps, rel=1e-9)
    assert curved["k_min"] > flat["k_min"]
