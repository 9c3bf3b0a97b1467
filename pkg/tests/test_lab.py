import math

import numpy as np
import pytest
from scipy.linalg import solve_discrete_lyapunov

from stochricker.branching import conditional_variance, deviation_bound, step_many
from stochricker.deterministic import Box, find_contracting_set, find_invariant_box, map_F
from stochricker.errors import DomainError, NotApplicableError
from stochricker.params import ModelParams
from stochricker.qsd import lambda_upper_bound
from stochricker.lab import (
    SweepRecord,
    ar_approximation,
    clopper_pearson_lower,
    cycle_support_study,
    fit_lambda_scaling,
    mass_near,
    qsd_for,
    qsd_moments,
    retention_check,
    retention_scaling,
    solve_lyapunov_iter,
    start_states,
    sweep_K,
    tightness_report,
)
from stochricker.rng import make_rng

FAMILY = ModelParams(1.2, 1.2, 0.3, 0.3, 0.5, 0.5)
K_LIST = [0.3, 0.2, 0.15, 0.1]
WIDE_BOX = Box(0.05, 1.8, 0.05, 1.8)  # x* +- 1 clipped into the open quadrant


@pytest.fixture(scope="module")
def sweep():
    return sweep_K(FAMILY, K_LIST, box=WIDE_BOX)


# lambda(K) fit ------------------------------------------------------------------------


def test_fit_recovers_synthetic_slope():
    # 1 - lambda stays far from the double-precision floor on this range
    K = np.array([4.0, 2.0, 1.0, 0.7, 0.5])
    pairs = list(zip(K, 1 - np.exp(-2 / K)))
    fit = fit_lambda_scaling(pairs)
    assert fit.u_hat == pytest.approx(2.0, abs=1e-10)
    assert fit.r_squared == pytest.approx(1.0, abs=1e-10)
    assert np.abs(fit.residuals).max() < 1e-9


def test_fit_rejects_degenerate_design():
    with pytest.raises(DomainError):
        fit_lambda_scaling([(0.2, 0.5), (0.2, 0.6), (0.2, 0.7)])
    with pytest.raises(DomainError):
        fit_lambda_scaling([(0.2, 0.5), (0.1, 0.6)])


def test_sweep_lambda_increases(sweep):
    lams = [r.lam for r in sweep]
    assert all(r.error is None and r.method == "matrix" for r in sweep)
    assert all(a < b for a, b in zip(lams, lams[1:]))
    assert all(0 < x < 1 for x in lams)
    assert all(r.lifetime >= 1 for r in sweep)
    fit = fit_lambda_scaling(sweep)
    assert fit.u_hat > 0 and fit.r_squared >= 0.9


def test_sweep_point_mass_convergence(sweep):
    d = [r.distance_to_fixed_point for r in sweep]
    tr = [np.trace(r.qsd_cov) for r in sweep]
    assert all(a > b for a, b in zip(d, d[1:]))
    assert d[-1] <= 0.15
    assert all(a > b for a, b in zip(tr, tr[1:]))


def test_sweep_validates_K_order():
    with pytest.raises(DomainError):
        sweep_K(FAMILY, [0.1, 0.2])
    with pytest.raises(DomainError):
        sweep_K(FAMILY, [0.2, -0.1])


def test_sweep_records_errors_and_continues():
    # K = 1e-4 is beyond both the matrix state budget and the particle grid budget
    recs = sweep_K(FAMILY, [0.3, 1e-4, 2e-5], method="monte_carlo", n_particles=100, t_max=5)
    assert recs[0].error is None and recs[0].method == "monte_carlo"
    assert recs[1].error.startswith("InfeasibleError")
    assert recs[2].error.startswith("InfeasibleError")
    assert math.isnan(recs[1].lam)


def test_sweep_lambda_below_bound_zero_free_law():
    base = ModelParams(1.2, 1.2, 0.3, 0.3, 0.5, 0.5, law="geometric1")
    for rec in sweep_K(base, [0.3, 0.2]):
        assert rec.lam < 1 and rec.lam <= lambda_upper_bound(base.with_K(rec.K))


# tightness --------------------------------------------------------------------------


def test_tightness_partition(sweep):
    for K in K_LIST:
        p = FAMILY.with_K(K)
        _, grid, *_ = qsd_for(p)
        t = tightness_report(grid, p, WIDE_BOX, strip_width=0.5)
        parts = [t["box_core"], t["strip_x"], t["strip_y_only"], t["remainder"]]
        assert all(x >= -1e-15 for x in parts)
        assert sum(parts) == pytest.approx(1.0, abs=1e-14)
        assert t["box_mass"] + t["outside_box"] == pytest.approx(1.0, abs=1e-14)


def test_strip_masses_non_increasing(sweep):
    for key in ("strip_mass_x", "strip_mass_y"):
        vals = [getattr(r, key) for r in sweep]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
    assert all(v == 0.0 for v in vals)  # x >= K > 0.05 on the lattice


def test_wide_strip_mass_decreases_at_small_K():
    masses = []
    for K in (0.1, 0.075, 0.05, 0.025):
        p = FAMILY.with_K(K)
        _, grid, *_ = qsd_for(p)
        masses.append(tightness_report(grid, p, WIDE_BOX, strip_width=0.35)["strip_x"])
    assert masses[0] > 0
    assert all(b < a for a, b in zip(masses, masses[1:]))


def test_box_mass_grows_and_reaches_095():
    recs = sweep_K(FAMILY, [0.2, 0.1, 0.075, 0.05], box=WIDE_BOX)
    masses = [r.box_mass for r in recs]
    assert all(a < b for a, b in zip(masses, masses[1:]))
    assert min(masses[2:]) >= 0.95
    assert all(0 <= r.mass_outside <= 1 for r in recs)


def test_tightness_rejects_box_touching_axes():
    p = FAMILY.with_K(0.3)
    _, grid, *_ = qsd_for(p)
    with pytest.raises(DomainError):
        tightness_report(grid, p, Box(0.0, 1.0, 0.1, 1.0))


def test_qsd_moments_of_point_mass():
    g = np.zeros((6, 6))
    g[2, 3] = 1.0
    mean, cov = qsd_moments(g, FAMILY.with_K(0.5))
    assert mean == pytest.approx((1.0, 1.5))
    assert np.allclose(cov, 0.0)


# retention ------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def contracting():
    res = find_contracting_set(FAMILY)
    assert res is not None and res.margin > 0
    return res


def test_start_states_lie_in_box(contracting):
    p = FAMILY.with_K(0.15)
    pts = start_states(p, contracting.box)
    assert len(pts) >= 1
    assert np.all(contracting.box.contains(pts[:, 0] * p.K, pts[:, 1] * p.K_tilde))


def test_retention_improves_as_K_decreases(contracting):
    sc = retention_scaling(FAMILY, contracting.box, contracting.N, [0.3, 0.15, 0.075], 2_000, seed=7)
    worst = [r.worst for r in sc.results]
    assert all(a < b for a, b in zip(worst, worst[1:]))
    assert sc.w_hat > 0 and sc.slope > 0
    for r in sc.results:
        assert r.worst >= 1 - math.exp(-sc.w_hat / r.K) - 1e-12
        assert 0 <= r.lower_bound <= r.worst


def test_one_step_upward_escape_below_deviation_bound(contracting):
    p = FAMILY.with_K(0.1)
    box = contracting.box
    nbhd = box.inflate(0.05 * box.diagonal)
    rng = make_rng(3)
    n = 50_000
    for m0, n0 in start_states(p, box, grid_points=3):
        x, y = m0 * p.K, n0 * p.K_tilde
        fx, fy = map_F((x, y), p)
        u, v = step_many(np.full(n, m0), np.full(n, n0), p, rng)
        for comp, f, edge, species in ((u * p.K, fx, nbhd.x_hi, "U"), (v * p.K_tilde, fy, nbhd.y_hi, "V")):
            bound = deviation_bound(edge - f, (x, y), p, species)
            assert np.mean(comp > edge) <= bound


def test_zero_escapes_use_clopper_pearson():
    p = FAMILY.with_K(0.01)
    res = retention_check(p, Box(0.05, 3.0, 0.05, 3.0), 1, 100_000, make_rng(5), grid_points=2)
    assert res.worst == 1.0
    assert res.lower_bound == pytest.approx(0.05 ** (1 / 100_000), rel=1e-12)
    assert clopper_pearson_lower(0, 10) == 0.0


def test_retention_argument_checks(contracting):
    with pytest.raises(DomainError):
        retention_check(FAMILY, contracting.box, 0, 10, make_rng(0))


# autoregressive approximation -------------------------------------------------------------


def test_ar_decoupled_closed_form():
    p = ModelParams(1.5, 0.8, 0.1, 0.2, 0.0, 0.0)
    ar = ar_approximation(p)
    assert np.allclose(ar.A, np.diag([1 - 1.5, 1 - 0.8]), atol=1e-12)
    noise = conditional_variance((1.5, 0.8), p)
    expected = [noise[0] / (1 - (1 - 1.5) ** 2), noise[1] / (1 - (1 - 0.8) ** 2)]
    assert np.allclose(np.diag(ar.stationary_cov), expected, rtol=1e-12)
    assert abs(ar.stationary_cov[0, 1]) < 1e-15


def test_ar_matches_reference_lyapunov_solver():
    for p in (FAMILY.with_K(0.1), ModelParams(1.0, 1.4, 0.2, 0.2, 0.3, 0.6)):
        ar = ar_approximation(p)
        ref = solve_discrete_lyapunov(ar.A, ar.noise_cov)
        assert np.allclose(ar.stationary_cov, ref, rtol=1e-10, atol=1e-14)
        assert ar.residual <= 1e-10
        assert np.all(np.linalg.eigvalsh(ar.stationary_cov) >= 0)


def test_ar_within_factor_two_of_qsd_covariance(sweep):
    rec = sweep[-1]
    assert rec.K == 0.1
    ar = ar_approximation(FAMILY.with_K(0.1))
    measured = np.array(rec.qsd_cov)
    for i in range(2):
        ratio = measured[i, i] / ar.stationary_cov[i, i]
        assert 0.5 <= ratio <= 2.0
    assert 0.5 <= np.trace(measured) / np.trace(ar.stationary_cov) <= 2.0


def test_ar_not_applicable():
    with pytest.raises(NotApplicableError):
        ar_approximation(ModelParams(3, 3, 0.1, 0.1, 0.1, 0.1))
    with pytest.raises(NotApplicableError):
        ar_approximation(ModelParams(1, 1, 0.1, 0.1, 1, 1))


def test_lyapunov_iteration_scalar():
    S, _ = solve_lyapunov_iter(np.array([[0.5]]), np.array([[3.0]]))
    assert S[0, 0] == pytest.approx(4.0, rel=1e-14)


# cycle support ------------------------------------------------------------------------


def test_cycle_study_control_case():
    rep = cycle_support_study(ModelParams(1, 1, 0.3, 0.3, 0.5, 0.5), [0.1, 0.05, 0.025])
    assert rep.stability == "attracting" and rep.period == 1
    assert rep.cycle_points[0] == pytest.approx([2 / 3, 2 / 3], abs=1e-6)
    assert all(a < b for a, b in zip(rep.masses, rep.masses[1:]))
    assert rep.kendall_tau == pytest.approx(-1.0)


def test_cycle_study_repelling_case_reports():
    rep = cycle_support_study(ModelParams(2.2, 2.2, 0.3, 0.3, 0.1, 0.1), [0.3, 0.2, 0.15])
    assert rep.stability == "repelling" and rep.period == 2
    assert rep.conclusive
    assert all(0 <= m <= 1 for m in rep.masses)
    assert -1 <= rep.kendall_tau <= 1
    assert set(rep.to_dict()) >= {"masses", "kendall_tau", "period"}


def test_cycle_study_without_cycle_is_inconclusive():
    # chaotic 1-D regime: no period up to 4
    rep = cycle_support_study(ModelParams(3.0, 3.0, 0.3, 0.3, 0.0, 0.0), [0.3, 0.2], max_period=4,
                              burn_in=1000)
    assert not rep.conclusive and rep.masses == []


def test_mass_near_bounds():
    g = np.ones((5, 5))
    p = FAMILY.with_K(0.5)
    assert mass_near(g, p, [(1.0, 1.0)], 10.0) == pytest.approx(1.0)
    assert mass_near(g, p, [(1.0, 1.0)], 0.01) == pytest.approx(1 / 25)


# determinism ---------------------------------------------------------------------------------


def test_experiments_are_deterministic(contracting):
    a = retention_scaling(FAMILY, contracting.box, 1, [0.3, 0.15], 200, seed=11)
    b = retention_scaling(FAMILY, contracting.box, 1, [0.3, 0.15], 200, seed=11)
    assert [r.retention.tolist() for r in a.results] == [r.retention.tolist() for r in b.results]
    m1 = sweep_K(FAMILY, [0.3], method="monte_carlo", n_particles=200, t_max=40, seed=3)
    m2 = sweep_K(FAMILY, [0.3], method="monte_carlo", n_particles=200, t_max=40, seed=3)
    assert m1[0].to_dict() == m2[0].to_dict()
    assert isinstance(m1[0], SweepRecord)


def test_invariant_box_used_by_default():
    box = find_invariant_box(FAMILY).box
    recs = sweep_K(FAMILY, [0.3])
    _, grid, *_ = qsd_for(FAMILY)
    assert recs[0].box_mass == pytest.approx(tightness_report(grid, FAMILY, box)["box_mass"])
