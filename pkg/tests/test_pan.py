import numpy as np
import pytest

from pointnav.dune import OracleEncoder
from pointnav.errors import ConfigError, SolveError
from pointnav.kinematics import rollout
from pointnav.nrmp import NrmpParams
from pointnav.pan import CAP, CONVERGED, NominalPath, PanConfig, Planner, initial_plan, plan_once
from pointnav import pan as pan_module


class CountingEncoder(OracleEncoder):
    def __init__(self, shape):
        super().__init__(shape)
        self.calls = 0

    def __call__(self, points):
        self.calls += 1
        return super().__call__(points)


def _scene(rng, n_points=60):
    """Points scattered ahead of a robot heading +x at the origin."""
    centers = rng.uniform([2.0, -2.0], [7.0, 2.0], (3, 2))
    pts = centers[rng.integers(0, 3, n_points)] + rng.normal(scale=0.25, size=(n_points, 2))
    return pts


def _path(speed=2.0, dt=0.2):
    return NominalPath((0.0, 0.0), (30.0, 0.0), speed, dt)


def test_empty_scan_converges_in_one_iteration(robot, diff_model):
    params = NrmpParams(horizon=6, eta=0.0)
    nominal = _path().reference(np.zeros(3), 6)
    res = plan_once(np.zeros(3), np.zeros((0, 2)), None, nominal, OracleEncoder(robot), params, diff_model, robot)
    assert res.iterations == 1 and res.reason == CONVERGED
    np.testing.assert_allclose(res.S, nominal.states, atol=1e-6)


def test_single_iteration_cap_calls_each_stage_once(robot, diff_model, monkeypatch):
    enc = CountingEncoder(robot)
    solves = []
    real_solve = pan_module.solve
    monkeypatch.setattr(pan_module, "solve", lambda *a, **k: solves.append(1) or real_solve(*a, **k))
    params = NrmpParams(horizon=6)
    pts = _scene(np.random.default_rng(0))
    res = plan_once(np.zeros(3), pts, None, _path().reference(np.zeros(3), 6), enc, params,
                    diff_model, robot, PanConfig(k_max=1))
    assert enc.calls == 1 and len(solves) == 1
    assert res.iterations == 1
    assert len(res.costs) == 2


def test_costs_non_increasing_on_fixed_scene(robot, diff_model):
    params = NrmpParams(horizon=8, rho1=1000.0)
    pts = _scene(np.random.default_rng(1))
    res = plan_once(np.zeros(3), pts, None, _path().reference(np.zeros(3), 8), OracleEncoder(robot),
                    params, diff_model, robot, PanConfig(k_max=3, eps_state=0.0, eps_cost=0.0))
    assert res.reason == CAP and res.iterations == 3
    c = np.array(res.costs)
    assert np.all(np.diff(c) <= 1e-6 * (1 + abs(c[0])))


def test_state_changes_settle_with_many_iterations(robot, diff_model):
    params = NrmpParams(horizon=8, rho1=1000.0)
    pts = _scene(np.random.default_rng(2))
    res = plan_once(np.zeros(3), pts, None, _path().reference(np.zeros(3), 8), OracleEncoder(robot),
                    params, diff_model, robot, PanConfig(k_max=10, eps_state=0.0, eps_cost=0.0))
    assert res.iterations == 10
    assert res.state_changes[-1] < 1e-3


def test_initial_plan_on_path_follows_it(diff_model):
    path = _path()
    nominal = path.reference(np.array([3.0, 0.0, 0.0]), 5)
    S, U = initial_plan(np.array([3.0, 0.0, 0.0]), nominal, diff_model)
    np.testing.assert_allclose(S, nominal.states, atol=1e-12)
    np.testing.assert_allclose(U, nominal.controls)


def test_reference_padded_with_goal():
    path = NominalPath((0.0, 0.0), (1.0, 0.0), 2.0, 0.2)
    ref = path.reference(np.zeros(3), 10)
    assert ref.states.shape == (11, 3)
    np.testing.assert_allclose(ref.states[3:, :2], np.tile([1.0, 0.0], (8, 1)))


def test_warm_start_shifts_previous_plan(diff_model):
    nominal = _path().reference(np.zeros(3), 4)
    U_prev = np.array([[1.0, 0.1], [1.2, 0.2], [1.4, 0.3], [1.6, 0.4]])
    S_prev = rollout(np.zeros(3), U_prev, diff_model, wrap=False)
    S, U = initial_plan(S_prev[1], nominal, diff_model, previous=(S_prev, U_prev))
    np.testing.assert_allclose(U, [[1.2, 0.2], [1.4, 0.3], [1.6, 0.4], [1.6, 0.4]])
    np.testing.assert_allclose(S[:4], S_prev[1:], atol=1e-12)


def test_planner_emits_bounded_controls(robot, diff_model):
    planner = Planner(_path(speed=6.0), OracleEncoder(robot), NrmpParams(horizon=6), diff_model, robot)
    u, res = planner.act(np.zeros(3), _scene(np.random.default_rng(3)))
    assert np.all(u >= diff_model.lower) and np.all(u <= diff_model.upper)
    assert planner.last is res


def test_solver_error_carries_iteration(robot, diff_model, monkeypatch):
    def broken(*args, **kwargs):
        raise SolveError("no certificate")

    monkeypatch.setattr(pan_module, "solve", broken)
    with pytest.raises(SolveError) as info:
        plan_once(np.zeros(3), _scene(np.random.default_rng(4)), None, _path().reference(np.zeros(3), 4),
                  OracleEncoder(robot), NrmpParams(horizon=4), diff_model, robot)
    assert info.value.iteration == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        PanConfig(k_max=0)
    with pytest.raises(ConfigError):
        PanConfig(eps_state=-1.0)
