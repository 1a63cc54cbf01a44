"""Optimizer tests: scalar bounds, constraint calculus, barrier solver, SCA."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import brentq

from simswipt import estimation, heuristics, jappa, performance
from test_performance import make_scene


def toy_scene(seed=7, m=3, k_i=1, k_e=2, rho=2.0, qos_se=None,
              qos_energy=None, chi=None, reuse_ir=0):
    """Small scene with the logistic knee pinned near the initial RF power."""
    f, links = make_scene(m, 6, 8, k_i, k_e, kappa=4.0, seed=seed)
    plan = estimation.assign_pilots(k_i, k_e, reuse_ir=reuse_ir)
    base = performance.SystemParams(tau_c=200, tau=plan.tau, rho_d=rho,
                                    rho_u=rho / 5.0, sigma_n2=1.0)
    stats = performance.build_stats(f, links, plan, k_i, base)
    if chi is None:
        weights = jappa.closed_form_weights(stats)
        modes = np.full(m, 0.5)
        ei = np.full((m, k_i), 0.5 * 0.25 / max(k_i, 1))
        ee = np.full((m, k_e), 0.5 * 0.75 / max(k_e, 1))
        chi = float(np.median(jappa.model_q_watts(modes, ei, ee, weights, base)))
    params = performance.SystemParams(
        tau_c=200, tau=plan.tau, rho_d=rho, rho_u=rho / 5.0, sigma_n2=1.0,
        xi=3.6 / chi, chi=chi, phi=chi, qos_se=qos_se, qos_energy=qos_energy,
    )
    stats = performance.build_stats(f, links, plan, k_i, params)
    return stats, jappa.closed_form_weights(stats), params


def fd_check(prob, x, h=1e-6):
    """Worst central-difference error of constraint gradients and Hessians."""
    worst_g = worst_h = 0.0
    for con in prob.constraints:
        val, grad, hess = con.parts(x)
        for d in range(prob.num_vars):
            e = np.zeros(prob.num_vars)
            e[d] = h
            vp, gp, _ = con.parts(x + e)
            vm, gm, _ = con.parts(x - e)
            fd_g = (vp - vm) / (2 * h)
            worst_g = max(worst_g,
                          abs(fd_g - grad[d]) / max(1.0, abs(fd_g)))
            fd_col = (gp - gm) / (2 * h)
            col = fd_col if hess is None else fd_col - hess[:, d]
            scale = max(1.0, np.abs(fd_col).max())
            worst_h = max(worst_h, np.abs(col).max() / scale)
    return worst_g, worst_h


def interior_state(weights, params, seed):
    rng = np.random.default_rng(seed)
    m, k_i, k_e = weights.num_aps, weights.num_ir, weights.num_er
    modes = rng.uniform(0.2, 0.8, m)
    ei = rng.uniform(0.01, 0.9 / k_i, (m, k_i)) * modes[:, None]
    ee = rng.uniform(0.01, 0.9 / k_e, (m, k_e)) * (1 - modes)[:, None] ** 2
    q = jappa.model_q_watts(modes, ei, ee, weights, params)
    targets = np.clip(0.9 * jappa.model_harvest(modes, ei, ee, weights, params),
                      1e-6, params.phi * (1 - 1e-9))
    del q
    return jappa.ScaState.from_point(0, modes, ei, ee, targets, weights, 10.0)


# --- scalar helpers ---


def test_inverse_logistic_midpoint_is_center():
    for chi, xi in ((0.024, 150.0), (1.1, 3.3)):
        params = performance.SystemParams(tau_c=200, tau=4, rho_d=1.0,
                                          rho_u=0.2, sigma_n2=1.0,
                                          xi=xi, chi=chi, phi=chi)
        assert jappa.inverse_logistic(params.phi / 2.0, params) == pytest.approx(chi, abs=1e-15)


def test_inverse_logistic_round_trip():
    params = performance.SystemParams(tau_c=200, tau=4, rho_d=1.0, rho_u=0.2,
                                      sigma_n2=1.0, xi=150.0, chi=0.024,
                                      phi=0.024)
    for x in np.linspace(0.004, 0.044, 23):
        lam = performance.logistic_response(x, params)
        assert jappa.inverse_logistic(lam, params) == pytest.approx(x, abs=1e-9)


def test_raw_target_inverts_harvester_chain():
    # nleh maps RF power to harvested DC; raw_logistic_target undoes the
    # floor-removal affine map so inverse_logistic recovers the RF power.
    params = performance.SystemParams(tau_c=200, tau=4, rho_d=1.0, rho_u=0.2,
                                      sigma_n2=1.0, xi=150.0, chi=0.024,
                                      phi=0.024)
    for q in np.linspace(0.005, 0.05, 17):
        harvested = performance.nleh(q, params, input_scale="watts")
        raw = jappa.raw_logistic_target(harvested, params)
        assert jappa.inverse_logistic(raw, params) == pytest.approx(q, abs=1e-9)


def test_inverse_logistic_matches_bisection():
    params = performance.SystemParams(tau_c=200, tau=4, rho_d=1.0, rho_u=0.2,
                                      sigma_n2=1.0, xi=150.0, chi=0.024,
                                      phi=0.024)
    rng = np.random.default_rng(3)
    for t in rng.uniform(0.02, 0.98, 12) * params.phi:
        root = brentq(lambda x: performance.logistic_response(x, params) - t,
                      params.chi - 1.0, params.chi + 1.0, xtol=1e-14)
        assert jappa.inverse_logistic(t, params) == pytest.approx(root, abs=1e-10)


def test_inverse_logistic_domain():
    params = performance.SystemParams(tau_c=200, tau=4, rho_d=1.0, rho_u=0.2,
                                      sigma_n2=1.0, xi=150.0, chi=0.024,
                                      phi=0.024)
    for bad in (0.0, -0.5, params.phi, params.phi * 2.0):
        with pytest.raises(ValueError):
            jappa.inverse_logistic(bad, params)
    jappa.inverse_logistic(params.phi * 1e-6, params)
    jappa.inverse_logistic(params.phi * (1 - 1e-9), params)


def test_energy_target_majorant():
    params = performance.SystemParams(tau_c=200, tau=4, rho_d=1.0, rho_u=0.2,
                                      sigma_n2=1.0, xi=150.0, chi=0.024,
                                      phi=0.024)
    grid = np.linspace(1e-4, 1 - 1e-4, 301) * params.phi
    for t0 in (0.2, 0.5, 0.83):
        t0 = t0 * params.phi
        exact = jappa.inverse_logistic(t0, params)
        assert jappa.xi_upper_bound(t0, t0, params) == pytest.approx(exact, abs=1e-14)
        bound = np.array([jappa.xi_upper_bound(t, t0, params) for t in grid])
        truth = np.array([jappa.inverse_logistic(t, params) for t in grid])
        assert np.all(bound - truth >= -1e-12)
        # convex in the target: nonnegative second differences
        assert np.all(np.diff(bound, 2) >= -1e-12)
    with pytest.raises(ValueError):
        jappa.xi_upper_bound(params.phi, 0.5 * params.phi, params)
    with pytest.raises(ValueError):
        jappa.xi_upper_bound(0.5 * params.phi, 0.0, params)


@settings(max_examples=80, deadline=None)
@given(st.floats(-1e3, 1e3, allow_nan=False),
       st.floats(-1e3, 1e3, allow_nan=False))
def test_quadratic_lower_bound_majorized_by_square(x, x0):
    bound = jappa.quadratic_lower_bound(x, x0)
    assert bound <= x * x + 1e-9 * max(1.0, x * x)
    assert jappa.quadratic_lower_bound(x0, x0) == pytest.approx(x0 * x0, rel=1e-12)


# --- model evaluators against the hardened closed forms ---


def test_model_matches_closed_forms_at_binary_modes():
    stats, weights, params = toy_scene(seed=11, m=4, k_i=2, k_e=2)
    rng = np.random.default_rng(5)
    modes = np.array([1.0, 0.0, 1.0, 0.0])
    pi = rng.uniform(0.1, 0.45, (4, 2)) * modes[:, None]
    pe = rng.uniform(0.1, 0.45, (4, 2)) * (1 - modes)[:, None]
    dec = performance.ResourceDecision(modes=modes, power_ir=pi, power_er=pe)

    q_block = performance.q_closed_form(dec, stats, params)
    q_watts = jappa.model_q_watts(modes, pi, pe, weights, params)
    assert q_watts * (params.tau_c - params.tau) == pytest.approx(q_block, rel=1e-12)

    sinr_ref = performance.sinr_closed_form(dec, stats, params)
    sinr_model = jappa.model_sinr(modes, pi, pe, weights, params)
    assert sinr_model == pytest.approx(sinr_ref, rel=1e-12)

    he_ref = performance.nleh(q_block, params, input_scale="block")
    he_model = jappa.model_harvest(modes, pi, pe, weights, params)
    assert he_model == pytest.approx(he_ref, rel=1e-12)


def test_rate_denominator_consistency():
    stats, weights, params = toy_scene(seed=13, m=3, k_i=2, k_e=1, reuse_ir=1)
    state = interior_state(weights, params, 17)
    amp, den = jappa.model_rate_denominator(state.modes, state.power_ir,
                                            state.power_er, weights, params)
    sinr = jappa.model_sinr(state.modes, state.power_ir, state.power_er,
                            weights, params)
    assert sinr == pytest.approx(params.rho_d * amp ** 2 / den, rel=1e-12)


# --- constraint calculus ---


def subproblem_at(stats, weights, params, seed, fix_modes=False):
    state = interior_state(weights, params, seed)
    return jappa.build_subproblem(state, weights, params, fix_modes=fix_modes), state


def test_joint_constraint_gradients():
    stats, weights, params = toy_scene(seed=7, qos_se=0.05, qos_energy=0.002)
    prob, state = subproblem_at(stats, weights, params, 29)
    assert prob.tangency_gap <= 1e-10
    worst_g, worst_h = fd_check(prob, prob.x_point.copy())
    assert worst_g <= 5e-6
    assert worst_h <= 5e-6


def test_copilot_constraint_gradients():
    stats, weights, params = toy_scene(seed=9, m=3, k_i=2, k_e=1, reuse_ir=1,
                                       qos_se=0.05, qos_energy=0.002)
    assert any(stats.copilot_irs(k) for k in range(2))
    prob, _ = subproblem_at(stats, weights, params, 31)
    assert prob.tangency_gap <= 1e-10
    worst_g, worst_h = fd_check(prob, prob.x_point.copy())
    assert worst_g <= 5e-6
    assert worst_h <= 5e-6


def test_fixed_mode_constraint_gradients():
    stats, weights, params = toy_scene(seed=15, qos_se=0.05, qos_energy=0.002)
    state = interior_state(weights, params, 37)
    modes = np.array([1.0, 0.0, 1.0])
    pi = state.power_ir * modes[:, None]
    pe = state.power_er * (1 - modes)[:, None]
    targets = np.clip(
        0.9 * jappa.model_harvest(modes, pi, pe, weights, params),
        1e-6, params.phi * (1 - 1e-9))
    fixed = jappa.ScaState.from_point(0, modes, pi, pe, targets, weights, 10.0)
    prob = jappa.build_subproblem(fixed, weights, params, fix_modes=True)
    assert prob.tangency_gap <= 1e-10
    worst_g, worst_h = fd_check(prob, prob.x_point.copy())
    assert worst_g <= 5e-6
    assert worst_h <= 5e-6


def default_state(weights, params):
    modes, pi, pe, targets = jappa.default_initial(weights, params)
    return jappa.ScaState.from_point(0, modes, pi, pe, targets, weights, 10.0)


def test_subproblem_feasibility_flag():
    stats, weights, params = toy_scene(seed=7)
    prob = jappa.build_subproblem(default_state(weights, params),
                                  weights, params)
    assert prob.point_feasible
    assert prob.slater is not None
    stats2, weights2, params2 = toy_scene(seed=7, qos_se=5.0)
    prob2 = jappa.build_subproblem(default_state(weights2, params2),
                                   weights2, params2)
    assert not prob2.point_feasible


# --- barrier solver on planted instances ---


def box_problem(c, lower=-1.0):
    d = len(c)
    cons = []
    for i in range(d):
        g = np.zeros(d)
        g[i] = -1.0
        cons.append(jappa.affine_constraint(f"upper[{i}]", g, float(c[i]), "box"))
        g2 = np.zeros(d)
        g2[i] = 1.0
        cons.append(jappa.affine_constraint(f"lower[{i}]", g2, -lower, "box"))
    x0 = np.zeros(d)
    return jappa.ConvexSubproblem(
        num_vars=d, maximize=np.ones(d), offset=0.0, constraints=cons,
        x_point=x0, point_feasible=True, slater=x0)


def test_box_toy_reaches_upper_bounds():
    # maximize sum(x) under x <= c lands exactly on the bounds
    for d, seed in ((3, 1), (8, 2)):
        c = np.random.default_rng(seed).uniform(0.5, 2.0, d)
        prob = box_problem(c)
        sol = jappa.solve_subproblem(prob, tol=1e-6)
        assert np.abs(sol.x - c).max() <= 1e-6
        assert sol.kkt_residual <= 1e-6
        upper = np.array([sol.duals[2 * i] for i in range(d)])
        assert np.abs(upper - 1.0).max() <= 1e-4


def test_planted_ball_optimum():
    # maximize c.x over a ball: optimum sits at z + r*c/|c| with dual |c|/(2r)
    for d, seed in ((4, 3), (10, 4)):
        rng = np.random.default_rng(seed)
        c = rng.normal(size=d)
        z = rng.uniform(-0.5, 0.5, d)
        r = 0.7
        lin = 2.0 * z
        p = np.eye(d)
        cons = [jappa.quadratic_constraint("ball", r * r - z @ z, lin, p, "structural")]
        prob = jappa.ConvexSubproblem(
            num_vars=d, maximize=c, offset=0.0, constraints=cons,
            x_point=z.copy(), point_feasible=True, slater=z.copy())
        sol = jappa.solve_subproblem(prob, tol=1e-6)
        x_star = z + r * c / np.linalg.norm(c)
        assert np.abs(sol.x - x_star).max() <= 1e-5
        assert sol.kkt_residual <= 1e-6
        assert sol.duals[0] == pytest.approx(np.linalg.norm(c) / (2 * r), rel=1e-3)


def test_solver_requires_strictly_feasible_anchor():
    prob = box_problem(np.array([1.0, 1.0]))
    bad = jappa.ConvexSubproblem(
        num_vars=2, maximize=prob.maximize, offset=0.0,
        constraints=prob.constraints, x_point=np.full(2, 2.0),
        point_feasible=False, slater=np.full(2, 2.0))
    with pytest.raises(ValueError):
        jappa.solve_subproblem(bad)


# --- restoration ---


def test_restoration_recovers_feasible_anchor():
    stats, weights, params = toy_scene(seed=7)
    state = default_state(weights, params)
    se0 = jappa.model_se(state.modes, state.power_ir, state.power_er,
                         weights, params)
    stats2, weights2, params2 = toy_scene(seed=7, qos_se=float(1.5 * se0.min()),
                                          qos_energy=0.002)
    start = default_state(weights2, params2)
    assert jappa.relaxed_violation(start, weights2, params2) > 0.0
    _, fixed = jappa._ensure_feasible_state(start, weights2, params2)
    assert jappa.relaxed_violation(fixed, weights2, params2) == 0.0


def test_restoration_reports_impossible_targets():
    stats, weights, params = toy_scene(seed=7)
    _, weights2, params2 = toy_scene(seed=7, qos_energy=None)
    hard = performance.SystemParams(
        tau_c=params.tau_c, tau=params.tau, rho_d=params.rho_d,
        rho_u=params.rho_u, sigma_n2=params.sigma_n2, xi=params.xi,
        chi=params.chi, phi=params.phi,
        qos_energy=float(params.phi) * 0.999)
    start = default_state(weights, hard)
    with pytest.raises(jappa.SubproblemInfeasibleError):
        jappa._ensure_feasible_state(start, weights, hard)


# --- SCA loop ---


def run_toy_sca(tmp_path=None):
    stats, weights, params = toy_scene(seed=7, qos_se=0.05, qos_energy=0.002)
    trace_path = None if tmp_path is None else str(tmp_path / "trace.csv")
    result = jappa.sca_loop(stats, params, lam_pen=10.0, max_iters=100,
                            tol=1e-4, trace_path=trace_path)
    return stats, weights, params, result


def test_sca_trace_monotone_and_certified():
    stats, weights, params, result = run_toy_sca()
    assert result.converged
    assert len(result.trace) <= 100
    obj = np.array([row.objective for row in result.trace])
    assert np.all(np.diff(obj) >= -1e-8)
    assert max(row.tangency_gap for row in result.trace) <= 1e-10
    assert max(result.kkt_residuals) <= 1e-6
    assert result.polish_tangency <= 1e-10


def test_sca_reaches_binary_modes_and_original_feasibility():
    stats, weights, params, result = run_toy_sca()
    gap = jappa._binarity(result.pre_round_state.modes)
    assert gap < 0.01
    residuals = jappa.original_residuals(result.decision, weights, params)
    for name in ("harvest", "rate", "power"):
        assert np.min(residuals[name]) >= -1e-6
    result.decision.check_feasible()


def test_sca_trace_csv_deterministic(tmp_path):
    _, _, _, first = run_toy_sca(tmp_path)
    data_a = (tmp_path / "trace.csv").read_bytes()
    _, _, _, second = run_toy_sca(tmp_path)
    data_b = (tmp_path / "trace.csv").read_bytes()
    assert data_a == data_b
    assert b"\r\n" in data_a
    header = data_a.split(b"\r\n", 1)[0].decode()
    assert tuple(header.split(",")) == jappa.SCA_TRACE_FIELDS
    rows = data_a.decode().strip().splitlines()
    assert len(rows) == 1 + len(first.trace)


def test_sca_accepts_explicit_initial():
    stats, weights, params = toy_scene(seed=7, qos_energy=0.002)
    m, k_i, k_e = weights.num_aps, weights.num_ir, weights.num_er
    modes = np.full(m, 0.4)
    ei = np.full((m, k_i), 0.1)
    ee = np.full((m, k_e), 0.2)
    result = jappa.sca_loop(stats, params, lam_pen=10.0,
                            initial=(modes, ei, ee))
    assert result.converged
    start_obj = result.trace[0].objective
    assert result.trace[-1].objective >= start_obj - 1e-8
