"""Ackermann and differential-drive kinematics with Euler discretization."""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, LinearizationError
from .geometry import wrap_angle

DIFFERENTIAL = "differential"
ACKERMANN = "ackermann"


@dataclass(frozen=True)
class KinematicModel:
    """Robot motion model.

    Controls are ``(v, omega)`` for differential drive and ``(v, psi)`` (speed,
    steering angle) for Ackermann. ``u_min``/``u_max`` bound both components.
    """

    kind: str = DIFFERENTIAL
    dt: float = 0.2
    u_min: tuple = (-2.0, -3.14)
    u_max: tuple = (4.0, 3.14)
    wheelbase: float = 1.0

    def __post_init__(self):
        if self.kind not in (DIFFERENTIAL, ACKERMANN):
            raise ValueError(f"unknown kinematic model {self.kind!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.kind == ACKERMANN and self.wheelbase <= 0:
            raise ValueError("wheelbase must be positive")
        if np.any(np.asarray(self.u_min) > np.asarray(self.u_max)):
            raise ValueError("u_min must not exceed u_max")
        if self.kind == ACKERMANN and max(abs(self.u_min[1]), abs(self.u_max[1])) >= np.pi / 2:
            raise ValueError("steering bounds must lie inside (-pi/2, pi/2)")

    @property
    def lower(self):
        return np.asarray(self.u_min, dtype=float)

    @property
    def upper(self):
        return np.asarray(self.u_max, dtype=float)

    def clip(self, u):
        return np.clip(u, self.lower, self.upper)


@dataclass(frozen=True, eq=False)
class LinearizedDynamics:
    """Coefficients of ``s_next = A @ s + B @ u + c``."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __call__(self, s, u):
        return self.A @ s + self.B @ u + self.c


def state_derivative(s, u, model):
    v, steer = u[0], u[1]
    theta = s[2]
    if model.kind == DIFFERENTIAL:
        rate = steer
    else:
        rate = v * np.tan(steer) / model.wheelbase
    return np.array([v * np.cos(theta), v * np.sin(theta), rate])


def euler_map(s, u, model):
    """Unwrapped Euler step ``s + f(s, u) * dt``."""
    s = np.asarray(s, dtype=float)
    return s + state_derivative(s, u, model) * model.dt


def step_nonlinear(s, u, model):
    out = euler_map(s, u, model)
    out[2] = wrap_angle(out[2])
    return out


def linearize(s_bar, u_bar, model):
    """First-order Taylor expansion of the Euler map around ``(s_bar, u_bar)``."""
    theta = float(s_bar[2])
    v, steer = float(u_bar[0]), float(u_bar[1])
    dt = model.dt
    ct, st = np.cos(theta), np.sin(theta)
    A = np.array(
        [
            [1.0, 0.0, -v * st * dt],
            [0.0, 1.0, v * ct * dt],
            [0.0, 0.0, 1.0],
        ]
    )
    c = np.array([theta * v * st * dt, -theta * v * ct * dt, 0.0])
    if model.kind == DIFFERENTIAL:
        B = np.array([[ct * dt, 0.0], [st * dt, 0.0], [0.0, dt]])
    else:
        if abs(steer) >= np.pi / 2:
            raise LinearizationError(f"steering angle {steer} outside (-pi/2, pi/2)")
        L = model.wheelbase
        cos2 = np.cos(steer) ** 2
        B = np.array(
            [
                [ct * dt, 0.0],
                [st * dt, 0.0],
                [np.tan(steer) * dt / L, v * dt / (L * cos2)],
            ]
        )
        c[2] = -steer * v * dt / (L * cos2)
    return LinearizedDynamics(A=A, B=B, c=c)


def linearize_plan(S_bar, U_bar, model):
    """Stack linearizations along a plan; returns arrays ``(H, 3, 3)``, ``(H, 3, 2)``, ``(H, 3)``."""
    S_bar = np.asarray(S_bar, dtype=float)
    U_bar = np.asarray(U_bar, dtype=float)
    if S_bar.shape[0] != U_bar.shape[0] + 1:
        raise DimensionError("plan needs exactly one more state than controls")
    lins = [linearize(S_bar[h], U_bar[h], model) for h in range(U_bar.shape[0])]
    return (
        np.array([d.A for d in lins]).reshape(-1, 3, 3),
        np.array([d.B for d in lins]).reshape(-1, 3, 2),
        np.array([d.c for d in lins]).reshape(-1, 3),
    )


def rollout(s0, U, model, wrap=True):
    """Apply the controls in ``U`` from ``s0``; returns ``(len(U) + 1, 3)`` states."""
    U = np.asarray(U, dtype=float).reshape(-1, 2)
    S = np.empty((U.shape[0] + 1, 3))
    S[0] = s0
    for k, u in enumerate(U):
        S[k + 1] = euler_map(S[k], u, model)
    if wrap:
        S[:, 2] = wrap_angle(S[:, 2])
    return S
