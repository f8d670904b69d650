import numpy as np
import pytest

from pointnav.dune import load_default_encoder
from pointnav.geometry import make_polygon, rectangle
from pointnav.kinematics import KinematicModel


@pytest.fixture
def square():
    return make_polygon([(0.5, -0.5), (0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5)])


@pytest.fixture
def robot():
    return rectangle(1.0, 0.6)


@pytest.fixture
def diff_model():
    return KinematicModel()


@pytest.fixture(scope="session")
def shipped_encoder():
    return load_default_encoder()


def random_convex_polygon(rng, max_edges=12):
    """Random CCW convex polygon with 3..max_edges vertices around a random center."""
    while True:
        n = int(rng.integers(3, max_edges + 1))
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        gaps = np.diff(np.append(ang, ang[0] + 2 * np.pi))
        if gaps.min() < 1e-3 or gaps.max() >= np.pi - 1e-3:
            continue
        r = rng.uniform(0.3, 2.0)
        pts = np.column_stack([r * np.cos(ang), r * np.sin(ang)]) + rng.uniform(-0.5, 0.5, 2)
        try:
            return make_polygon(pts)
        except ValueError:
            continue


def random_plan_problem(rng, shape, model, horizon=None, points=None, **overrides):
    """Small random planning QP around a rolled-out straight-line plan.

    Obstacle points are scattered near the path, so some hinge rows start
    violated. Exact multipliers stand in for the encoder.
    """
    from dataclasses import replace

    from pointnav.dune import OracleEncoder, encode, sort_and_select
    from pointnav.geometry import build_point_flow
    from pointnav.kinematics import rollout
    from pointnav.nrmp import NominalPlan, NrmpParams, build_problem

    H = horizon or int(rng.integers(1, 6))
    m = points if points is not None else int(rng.integers(1, 6))
    speed = rng.uniform(0.5, 3.0)
    s0 = np.array([0.0, 0.0, rng.uniform(-0.3, 0.3)])
    U_nom = np.column_stack([np.full(H, speed), rng.uniform(-0.5, 0.5, H)])
    S_nom = rollout(s0, U_nom, model, wrap=False)
    nominal = NominalPlan(states=S_nom, controls=U_nom)
    ahead = speed * model.dt * H
    pts = np.column_stack([rng.uniform(0.0, ahead + 1.0, m), rng.uniform(-1.2, 1.2, m)])
    params = NrmpParams(
        q=tuple(rng.uniform(0.2, 2.0, 3)),
        p=tuple(rng.uniform(0.2, 2.0, 2)),
        d_min=0.1,
        d_max=rng.uniform(0.3, 1.5),
        eta=rng.uniform(0.1, 2.0),
        rho1=rng.uniform(1.0, 200.0),
        b_k=rng.uniform(0.0, 2.0),
        m_prime=max(m, 1),
        horizon=H,
    )
    params = replace(params, **overrides)
    flow = build_point_flow(pts, None, S_nom, model.dt)
    feats = sort_and_select(encode(OracleEncoder(shape), flow, S_nom, shape), params.m_prime)
    problem = build_problem(nominal, feats, params, model, shape, S_nom, U_nom)
    return problem


# Acceptance lines, printed together at the end of the run.
ACCEPTANCE_LINES = []


def record_acceptance(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2} {title}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
