"""Learning the planner weights from failed episodes.

An episode is summarized by a handful of planner snapshots (the inputs of
the final alternating iteration at a control tick). With the features held
fixed, the planner output is a deterministic function of the learnable
weights, so a loss on that output can be differentiated by central finite
differences and the weights moved by clipped gradient steps.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import SolveError
from .geometry import unwrap_near
from .nrmp import LEARNABLE, build_problem, solve
from .pan import Planner

# Loss weights (a1, a2, a3) on (L1, L2, L3) per failure kind.
LOSS_WEIGHTS = {
    "collision": (1.0, 0.0, 1.0),
    "stuck": (0.0, 1.0, 1.0),
    "stray": (1.0, 0.0, 0.0),
}


def loss_l1(S, nominal_states):
    """Squared state deviation from the reference."""
    S = np.asarray(S, dtype=float)
    ref = np.asarray(nominal_states, dtype=float)
    diff = S - ref
    diff[:, 2] = S[:, 2] - unwrap_near(ref[:, 2], S[:, 2])
    return float((diff**2).sum())


def loss_l2(U, nominal_controls):
    return float(((np.asarray(U) - np.asarray(nominal_controls)) ** 2).sum())


def loss_l3(d, eta):
    """Negative weighted sum of safety distances (``d > 0`` so this is ``-eta * ||d||_1``)."""
    return -float(eta) * float(np.sum(d))


def combined_loss(S, U, d, nominal, eta, weights):
    a1, a2, a3 = weights
    total = 0.0
    if a1:
        total += a1 * loss_l1(S, nominal.states)
    if a2:
        total += a2 * loss_l2(U, nominal.controls)
    if a3:
        total += a3 * loss_l3(d, eta)
    return total


@dataclass(frozen=True, eq=False)
class Snapshot:
    nominal: object
    features: object
    anchor_states: np.ndarray
    anchor_controls: np.ndarray


class RecordingPlanner(Planner):
    """A :class:`~pointnav.pan.Planner` that keeps a snapshot per control tick."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.snapshots = []

    def reset(self):
        super().reset()
        self.snapshots = []

    def plan(self, state, points, velocities=None):
        result = super().plan(state, points, velocities)
        self.snapshots.append(
            Snapshot(
                nominal=result.nominal,
                features=result.features,
                anchor_states=result.anchor[0],
                anchor_controls=result.anchor[1],
            )
        )
        return result


def replay_loss(params, snapshots, weights, model, shape):
    """Mean loss of the planner outputs on recorded snapshots; ``inf`` if a solve fails."""
    if not snapshots:
        return 0.0
    total = 0.0
    for snap in snapshots:
        problem = build_problem(
            snap.nominal, snap.features, params, model, shape, snap.anchor_states, snap.anchor_controls
        )
        try:
            sol = solve(problem)
        except SolveError:
            return float("inf")
        total += combined_loss(sol.S, sol.U, sol.d, snap.nominal, params.eta, weights)
    return total / len(snapshots)


def project(values, floor=1e-3):
    """Clamp to nonnegative entries with ``floor <= d_min <= d_max``."""
    out = {k: np.maximum(np.asarray(v, dtype=float), 0.0) for k, v in values.items()}
    if "d_min" in out:
        out["d_min"] = np.maximum(out["d_min"], floor)
    if "d_min" in out and "d_max" in out:
        out["d_max"] = np.maximum(out["d_max"], out["d_min"])
    return out


@dataclass(frozen=True, eq=False)
class LonStep:
    values: dict
    gradient: dict
    loss: float
    aborted: bool = False
    evaluations: int = 0


def lon_step(values, loss_fn, lr=0.05, clip=1.0, rel_step=1e-3):
    """One clipped gradient step on ``values`` (name -> array) using central differences.

    Each scalar ``x`` is probed at ``x +- rel_step * max(|x|, 1)``. If any
    loss evaluation is non-finite the step is abandoned and the values are
    returned unchanged.
    """
    values = {k: np.array(v, dtype=float, ndmin=1) for k, v in values.items()}
    base = loss_fn(values)
    evaluations = 1
    zero = {k: np.zeros_like(v) for k, v in values.items()}
    if not np.isfinite(base):
        return LonStep(values=values, gradient=zero, loss=base, aborted=True, evaluations=evaluations)
    grad = {}
    for key, val in values.items():
        g = np.zeros_like(val)
        for j in range(val.size):
            h = rel_step * max(abs(val[j]), 1.0)
            probe = {k: v.copy() for k, v in values.items()}
            probe[key][j] = val[j] + h
            up = loss_fn(probe)
            probe[key][j] = val[j] - h
            down = loss_fn(probe)
            evaluations += 2
            if not (np.isfinite(up) and np.isfinite(down)):
                return LonStep(values=values, gradient=zero, loss=base, aborted=True, evaluations=evaluations)
            g[j] = (up - down) / (2.0 * h)
        grad[key] = np.clip(g, -clip, clip)
    updated = project({k: values[k] - lr * grad[k] for k in values})
    return LonStep(values=updated, gradient=grad, loss=base, evaluations=evaluations)


def classify_failure(metrics, stuck_speed=0.5, window=10):
    """Map an episode outcome to a loss kind, or ``None`` on success.

    Timeouts where the robot crawled over the last ``window`` ticks count as
    ``stuck``; other timeouts (and planner errors) as ``stray``.
    """
    if metrics.success:
        return None
    if metrics.failure == "collision":
        return "collision"
    v = np.abs(metrics.trajectory.controls[-window:, 0]) if metrics.steps else np.zeros(1)
    if metrics.failure in ("timeout", "planner_error") and v.mean() < stuck_speed:
        return "stuck"
    return "stray"


@dataclass(eq=False)
class TuneRecord:
    episode: int
    loss: float
    success: bool
    failure: str
    values: dict
    gradient: dict = field(default=None)
    weights: tuple = None


def tune(scenario, planner, run_episode, episodes=60, lr=0.05, clip=1.0, rel_step=1e-3,
         window=10, weights=None, stop_on_success=True, callback=None):
    """Episode, loss, update cycles on one scenario.

    ``planner`` is a :class:`RecordingPlanner` whose ``params`` are updated
    in place. The loss kind is fixed by the first failure (or ``weights``).
    Updates happen only after failed episodes. Returns the list of
    :class:`TuneRecord` (one per episode) and the final parameters.
    """
    records = []
    for ep in range(episodes):
        metrics = run_episode(scenario, planner)
        kind = classify_failure(metrics)
        if weights is None:
            weights = LOSS_WEIGHTS[kind or "stray"]
        snaps = planner.snapshots[-window:]
        base_params = planner.params

        def loss_fn(vals, base_params=base_params, snaps=snaps):
            try:
                prm = base_params.with_learnable(vals)
            except ValueError:
                return float("inf")
            return replay_loss(prm, snaps, weights, planner.model, planner.shape)

        current = {k: v for k, v in base_params.learnable().items()}
        loss = loss_fn(current)
        rec = TuneRecord(ep, loss, metrics.success, metrics.failure, current, weights=tuple(weights))
        records.append(rec)
        if callback is not None:
            callback(rec, metrics)
        if metrics.success and stop_on_success:
            break
        if metrics.success:
            continue
        step = lon_step(current, loss_fn, lr=lr, clip=clip, rel_step=rel_step)
        rec.gradient = step.gradient
        if not step.aborted:
            planner.params = base_params.with_learnable(step.values)
    return records, planner.params


__all__ = [
    "LEARNABLE",
    "LOSS_WEIGHTS",
    "LonStep",
    "RecordingPlanner",
    "Snapshot",
    "TuneRecord",
    "classify_failure",
    "combined_loss",
    "lon_step",
    "loss_l1",
    "loss_l2",
    "loss_l3",
    "project",
    "replay_loss",
    "tune",
]
