"""Alternating encode/plan loop around a receding-horizon planner.

Each iteration builds a point flow along the current plan, encodes it into
distance multipliers, keeps the nearest ``m_prime`` points per step and
solves the planning QP linearized about the current plan. The proximal term
ties consecutive plans together, so the end-to-end cost does not increase
from one iteration to the next.
"""

from dataclasses import dataclass, field

import numpy as np

from .dune import encode, sort_and_select
from .errors import ConfigError, SolveError
from .geometry import build_point_flow, unwrap_near
from .kinematics import rollout
from .nrmp import NominalPlan, build_problem, cost_e2e, solve

CONVERGED = "converged"
CAP = "cap"
INFEASIBLE = "infeasible"


@dataclass(frozen=True)
class PanConfig:
    k_max: int = 3
    eps_state: float = 1e-3
    eps_cost: float = 1e-4
    warm_start: bool = True

    def __post_init__(self):
        if self.k_max < 1:
            raise ConfigError("k_max must be at least 1")
        if self.eps_state < 0 or self.eps_cost < 0:
            raise ConfigError("tolerances must be nonnegative")


@dataclass(frozen=True, eq=False)
class PanResult:
    S: np.ndarray
    U: np.ndarray
    d: np.ndarray
    costs: list  # end-to-end cost before the first and after every iteration
    state_changes: list  # max-norm change of S per iteration
    iterations: int
    reason: str
    solution: object = field(repr=False, default=None)
    features: object = field(repr=False, default=None)
    nominal: object = field(repr=False, default=None)
    anchor: tuple = field(repr=False, default=None)  # (S, U) the last iteration was linearized about


class NominalPath:
    """Straight start-to-goal reference sampled at the desired speed."""

    def __init__(self, start, goal, speed, dt):
        self.start = np.asarray(start, dtype=float)[:2]
        self.goal = np.asarray(goal, dtype=float)[:2]
        self.speed = float(speed)
        self.dt = float(dt)
        delta = self.goal - self.start
        self.length = float(np.hypot(*delta))
        self.direction = delta / self.length if self.length > 0 else np.array([1.0, 0.0])
        self.heading = float(np.arctan2(self.direction[1], self.direction[0]))

    def progress(self, position):
        """Arc length of the projection of ``position`` onto the path, clamped to it."""
        s = float(np.dot(np.asarray(position[:2]) - self.start, self.direction))
        return min(max(s, 0.0), self.length)

    def reference(self, state, horizon):
        """Next ``horizon + 1`` reference states from the robot's projection; padded with the goal."""
        arc = self.progress(state) + self.speed * self.dt * np.arange(horizon + 1)
        arc = np.minimum(arc, self.length)
        xy = self.start + arc[:, None] * self.direction
        theta = np.full(horizon + 1, unwrap_near(self.heading, float(state[2])))
        states = np.column_stack([xy, theta])
        # Speeds follow the clamped arc, so the padded tail is a consistent stop.
        controls = np.column_stack([np.diff(arc) / self.dt, np.zeros(horizon)])
        return NominalPlan(states=states, controls=controls)

    def sample(self, spacing=None):
        spacing = spacing or self.speed * self.dt
        n = max(int(np.ceil(self.length / spacing)), 1)
        arc = np.linspace(0.0, self.length, n + 1)
        return self.start + arc[:, None] * self.direction


def initial_plan(state, nominal, model, previous=None):
    """Starting plan for the alternation.

    Without ``previous`` the nominal controls are rolled out from ``state``;
    with a previous ``(S, U)`` the controls are shifted one step (repeating
    the last) and rolled out again. Rolling out keeps the plan consistent
    with the dynamics it is later linearized about.
    """
    state = np.asarray(state, dtype=float)
    if previous is None:
        U = nominal.controls.copy()
    else:
        U_prev = np.asarray(previous[1], dtype=float)
        U = np.vstack([U_prev[1:], U_prev[-1:]])
    U = np.clip(U, model.lower, model.upper)
    S = rollout(state, U, model, wrap=False)
    return S, U


def plan_once(state, points, velocities, nominal, encoder, params, model, shape,
              config=None, previous=None, max_radius=None):
    """Run the alternating loop once from ``state`` and return a :class:`PanResult`."""
    config = config or PanConfig()
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    S, U = initial_plan(state, nominal, model, previous if config.warm_start else None)
    nominal = NominalPlan(
        states=np.column_stack([nominal.states[:, :2], unwrap_near(nominal.states[:, 2], S[:, 2])]),
        controls=nominal.controls,
    )
    costs, changes = [], []
    x = None
    solution = feats = None
    reason = CAP
    k = 0
    for k in range(1, config.k_max + 1):
        flow = build_point_flow(points, velocities, S, model.dt)
        feats = sort_and_select(encode(encoder, flow, S, shape, max_radius=max_radius), params.m_prime)
        if k == 1:
            costs.append(cost_e2e(S, U, feats, params, nominal, shape, d=np.full(len(S), params.d_min)))
        anchor = (S, U)
        problem = build_problem(nominal, feats, params, model, shape, S, U)
        try:
            solution = solve(problem, x0=x)
        except SolveError as err:
            err.iteration = k
            raise
        x = solution.x
        changes.append(float(np.abs(solution.S - S).max()))
        S, U = solution.S, solution.U
        costs.append(cost_e2e(S, U, feats, params, nominal, shape, d=solution.d))
        if points.shape[0] == 0:
            reason = CONVERGED
            break
        drop = costs[-2] - costs[-1]
        if changes[-1] < config.eps_state or abs(drop) < config.eps_cost * max(abs(costs[-2]), 1e-12):
            reason = CONVERGED
            break
    return PanResult(
        S=S,
        U=U,
        d=solution.d,
        costs=costs,
        state_changes=changes,
        iterations=k,
        reason=reason,
        solution=solution,
        features=feats,
        nominal=nominal,
        anchor=anchor,
    )


class Planner:
    """Receding-horizon planner stack: path, encoder, weights and warm start.

    ``act(state, points, velocities)`` returns the first control of the
    current plan; the full result is kept in ``last``.
    """

    def __init__(self, path, encoder, params, model, shape, config=None, max_radius=None):
        self.path = path
        self.encoder = encoder
        self.params = params
        self.model = model
        self.shape = shape
        self.config = config or PanConfig()
        self.max_radius = max_radius
        self.last = None

    def reset(self):
        self.last = None

    def plan(self, state, points, velocities=None):
        nominal = self.path.reference(state, self.params.horizon)
        previous = None if self.last is None else (self.last.S, self.last.U)
        result = plan_once(
            state, points, velocities, nominal, self.encoder, self.params, self.model,
            self.shape, self.config, previous=previous, max_radius=self.max_radius,
        )
        self.last = result
        return result

    def act(self, state, points, velocities=None):
        result = self.plan(state, points, velocities)
        # The solver clips to the box, so this is a no-op kept as a last guard.
        return self.model.clip(result.U[0]), result
