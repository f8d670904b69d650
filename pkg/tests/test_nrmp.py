import cvxpy as cp
import numpy as np
import pytest

from pointnav.dune import OracleEncoder, encode, sort_and_select
from pointnav.errors import BuildError, ConfigError
from pointnav.geometry import build_point_flow, rotation
from pointnav.kinematics import rollout
from pointnav.nrmp import (
    NominalPlan,
    NrmpParams,
    build_problem,
    cost_terms,
    margins,
    penalty_E,
    penalty_I,
    solve,
)

from conftest import random_plan_problem


def solve_slack_form(problem):
    """Reference optimum of the explicit slack formulation, via cvxpy."""
    form = problem.slack_form()
    n = form["q"].size
    z = cp.Variable(n)
    P = cp.psd_wrap(form["P"])
    cons = [form["A_eq"] @ z == form["b_eq"]]
    lo, hi = form["lo"], form["hi"]
    fin_lo, fin_hi = np.isfinite(lo), np.isfinite(hi)
    cons += [z[fin_lo] >= lo[fin_lo], z[fin_hi] <= hi[fin_hi]]
    if form["A_ge"].shape[0]:
        cons.append(form["A_ge"] @ z >= form["b_ge"])
    prob = cp.Problem(cp.Minimize(0.5 * cp.quad_form(z, P) + form["q"] @ z + form["const"]), cons)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-11, tol_gap_rel=1e-11, tol_feas=1e-11)
    nS, nU, nd, _ = form["sizes"]
    zs = z.value
    S = zs[:nS].reshape(-1, 3)
    U = zs[nS : nS + nU].reshape(-1, 2)
    d = zs[nS + nU : nS + nU + nd]
    return prob.value, S, U, d, zs[nS + nU + nd :]


def test_penalty_I_examples(square):
    s, p = (0.0, 0.0, 0.0), (2.0, 0.0)
    mu, lam = np.array([1.0, 0, 0, 0]), np.array([-1.0, 0])
    assert penalty_I(s, mu, lam, p, 0.1, square) == pytest.approx(1.4)
    assert penalty_I(s, mu, lam, p, 1.5, square) == pytest.approx(0.0, abs=1e-15)
    assert penalty_I(s, np.zeros(4), np.zeros(2), p, 0.3, square) == -0.3


def test_penalty_E_examples(square):
    np.testing.assert_allclose(penalty_E((0, 0, 0), [1, 0, 0, 0], [0, 0], square), [1, 0])
    mu = np.array([1.0, 0, 0, 0])
    for th in (0.0, 0.4, -2.0):
        lam = -mu @ square.G @ rotation(th).T
        np.testing.assert_allclose(penalty_E((0, 0, th), mu, lam, square), 0.0, atol=1e-15)


def test_penalty_E_rotates_with_heading(square):
    lam = np.array([0.3, -0.8])
    base = penalty_E((0, 0, 0.0), np.zeros(4), lam, square)
    turned = penalty_E((0, 0, 0.9), np.zeros(4), lam, square)
    np.testing.assert_allclose(turned, base @ rotation(0.9), atol=1e-15)


def _single_feature(square, point):
    flow = build_point_flow([point], None, np.zeros((1, 3)), 0.1)
    return encode(OracleEncoder(square), flow, np.zeros((1, 3)), square)


def _still_nominal():
    return NominalPlan(states=np.zeros((1, 3)), controls=np.zeros((0, 2)))


def test_cost_zero_at_nominal(square):
    nominal = _still_nominal()
    terms = cost_terms(nominal.states, nominal.controls, [0.1], None, NrmpParams(eta=0.0), nominal, square)
    assert terms == {"C0": 0.0, "Cr": 0.0, "C1": 0.0, "proximal": 0.0}


def test_regularizer_inactive_and_active(square):
    nominal = _still_nominal()
    safe = _single_feature(square, (2.0, 0.0))
    terms = cost_terms(nominal.states, nominal.controls, [0.1], safe, NrmpParams(rho1=2.0), nominal, square)
    assert terms["Cr"] == 0.0
    # margin 2 - 0.5 - d = -0.3 at d = 1.8
    terms = cost_terms(
        nominal.states, nominal.controls, [1.8], safe, NrmpParams(rho1=2.0, d_max=2.0), nominal, square
    )
    assert margins(nominal.states, [1.8], safe, square)[0, 0] == pytest.approx(-0.3)
    assert terms["Cr"] == pytest.approx(0.09)


def test_params_validation_and_round_trip():
    with pytest.raises(ConfigError):
        NrmpParams(d_min=0.5, d_max=0.4)
    with pytest.raises(ConfigError):
        NrmpParams(d_min=0.0)
    with pytest.raises(ConfigError):
        NrmpParams(eta=-1.0)
    with pytest.raises(ConfigError, match="speed"):
        NrmpParams.from_dict({"speed": 1.0})
    params = NrmpParams(q=(0.5, 0.5, 0.2), rho1=300.0)
    assert NrmpParams.from_dict(params.to_dict()) == params
    assert set(params.learnable()) == {"q", "p", "d_min", "d_max", "eta"}


def test_with_learnable_updates_only_learnables():
    params = NrmpParams()
    values = params.learnable()
    values["eta"] = np.array(2.5)
    updated = params.with_learnable(values)
    assert updated.eta == 2.5 and updated.rho1 == params.rho1


def test_obstacle_free_plan_equals_nominal(robot, diff_model):
    U = np.tile([1.5, 0.2], (6, 1))
    S = rollout([0, 0, 0], U, diff_model, wrap=False)
    nominal = NominalPlan(states=S, controls=U)
    params = NrmpParams(eta=0.0, horizon=6)
    sol = solve(build_problem(nominal, None, params, diff_model, robot, S, U))
    np.testing.assert_allclose(sol.S, S, atol=1e-6)
    np.testing.assert_allclose(sol.U, U, atol=1e-6)
    assert sol.objective <= 1e-10


def test_no_features_is_tracking_qp(robot, diff_model):
    rng = np.random.default_rng(0)
    problem = random_plan_problem(rng, robot, diff_model, horizon=4, points=0)
    assert problem.qp.m == 0
    sol = solve(problem)
    # d saturates at d_max: only the reward acts on it.
    np.testing.assert_allclose(sol.d, problem.params.d_max)


def test_blocking_point_deflects_plan(robot, diff_model):
    H = 8
    U = np.tile([2.0, 0.0], (H, 1))
    S = rollout([0, 0, 0], U, diff_model, wrap=False)
    nominal = NominalPlan(states=S, controls=U)
    params = NrmpParams(rho1=1e5, horizon=H, eta=0.0)
    point = np.array([[2.5, 0.05]])
    S_k, U_k = S, U
    for _ in range(6):
        flow = build_point_flow(point, None, S_k, diff_model.dt)
        feats = sort_and_select(encode(OracleEncoder(robot), flow, S_k, robot), 10)
        sol = solve(build_problem(nominal, feats, params, diff_model, robot, S_k, U_k))
        S_k, U_k = sol.S, sol.U
    assert np.abs(sol.S[:, 1]).max() > 0.3
    I = margins(sol.S, np.full(H + 1, params.d_min), feats, robot)
    assert np.nanmin(I) >= -1e-3


def test_solution_invariants(robot, diff_model):
    rng = np.random.default_rng(1)
    for _ in range(30):
        problem = random_plan_problem(rng, robot, diff_model)
        sol = solve(problem)
        assert problem.dynamics_residual(sol.S, sol.U) <= 1e-8
        assert np.all(sol.U >= diff_model.lower) and np.all(sol.U <= diff_model.upper)
        assert np.all(sol.d >= problem.params.d_min) and np.all(sol.d <= problem.params.d_max)
        assert sol.pg_norm <= 1e-6
        assert sol.objective == pytest.approx(sum(sol.costs.values()), abs=1e-8)


def test_slack_objective_equals_direct_penalty(robot, diff_model):
    rng = np.random.default_rng(2)
    for _ in range(100):
        problem = random_plan_problem(rng, robot, diff_model)
        H = problem.horizon
        U = rng.uniform(diff_model.lower, diff_model.upper, (H, 2))
        d = rng.uniform(problem.params.d_min, problem.params.d_max, H + 1)
        S, _, _ = problem.unpack(problem.pack(U, d))
        I = margins(S, d, problem.features, robot)
        w = np.maximum(-I[tuple(problem.hinge_rows.T)], 0.0)
        direct = cost_terms(S, U, d, problem.features, problem.params, problem.nominal, robot, problem.prev_states)
        assert problem.slack_objective(S, U, d, w) == pytest.approx(sum(direct.values()), abs=1e-9)


def test_condensed_optimum_matches_slack_qp(robot, diff_model):
    rng = np.random.default_rng(3)
    for _ in range(10):
        problem = random_plan_problem(rng, robot, diff_model)
        ref_value, S_ref, _, _, _ = solve_slack_form(problem)
        sol = solve(problem)
        assert sol.objective == pytest.approx(ref_value, abs=1e-6)


def test_proximal_weight_shrinks_toward_previous_plan(robot, diff_model):
    rng = np.random.default_rng(4)
    base = random_plan_problem(rng, robot, diff_model, horizon=5, points=4, rho1=500.0)
    gaps = []
    for b in (1.0, 1e2, 1e4):
        problem = build_problem(
            base.nominal, base.features, base.params, diff_model, robot,
            base.prev_states, base.prev_controls, b_k=b,
        )
        sol = solve(problem)
        gaps.append(np.abs(sol.S - base.prev_states).max())
    assert gaps[0] >= gaps[1] >= gaps[2]
    assert gaps[2] < 1e-2


def test_larger_rho1_reduces_violation(robot, diff_model):
    rng = np.random.default_rng(5)
    base = random_plan_problem(rng, robot, diff_model, horizon=5, points=5, rho1=1.0)
    viol = []
    for rho in (1.0, 100.0, 10_000.0):
        problem = build_problem(
            base.nominal, base.features, NrmpParams(**{**base.params.to_dict(), "rho1": rho}),
            diff_model, robot, base.prev_states, base.prev_controls,
        )
        sol = solve(problem)
        viol.append(np.abs(problem.qp.hinge_residual(sol.x)).sum())
    assert viol[0] >= viol[1] >= viol[2]


def test_records_are_affine_data(robot, diff_model):
    problem = random_plan_problem(np.random.default_rng(6), robot, diff_model, horizon=3, points=3)
    rec, feats, prm = problem.records, problem.features, problem.params
    np.testing.assert_allclose(rec.gamma_a, np.array(prm.q) * problem.nominal.states)
    np.testing.assert_allclose(rec.gamma_b, np.array(prm.p) * problem.nominal.controls)
    np.testing.assert_allclose(rec.gamma_d, feats.mu @ robot.G)
    np.testing.assert_allclose(rec.xi_a, (feats.lam * feats.points).sum(-1) + feats.mu @ robot.h)


def test_rho2_zero_has_no_stationarity_terms(robot, diff_model):
    rng = np.random.default_rng(7)
    a = random_plan_problem(rng, robot, diff_model, horizon=3, points=3)
    b = build_problem(
        a.nominal, a.features, NrmpParams(**{**a.params.to_dict(), "rho2": 5.0}),
        diff_model, robot, a.prev_states, a.prev_controls,
    )
    # Multipliers from the exact oracle make E vanish, so the terms add nothing at the anchor.
    x = a.pack(a.prev_controls, np.full(a.horizon + 1, a.params.d_min))
    assert b.qp.objective(x) == pytest.approx(a.qp.objective(x), abs=1e-9)


def test_build_rejects_mismatched_horizon(robot, diff_model):
    problem = random_plan_problem(np.random.default_rng(8), robot, diff_model, horizon=3, points=2)
    with pytest.raises(BuildError):
        build_problem(
            problem.nominal, problem.features, problem.params, diff_model, robot,
            problem.prev_states[:-1], problem.prev_controls,
        )
