"""Robot footprint, planar frame transforms and obstacle point flows.

States are plain ``(x, y, theta)`` arrays and plans are ``(H + 1, 3)``
arrays; point sets are ``(M, 2)`` arrays. Everything here is a pure function
of its inputs.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError, DimensionError

_COLLINEAR_TOL = 1e-12


def wrap_angle(theta):
    """Wrap angles to the half-open interval (-pi, pi]."""
    wrapped = np.mod(np.asarray(theta, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    wrapped = np.where(wrapped == -np.pi, np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def unwrap_near(theta, reference):
    """Shift ``theta`` by multiples of 2*pi so it lies within pi of ``reference``."""
    return reference + wrap_angle(np.asarray(theta) - reference)


@dataclass(frozen=True, eq=False)
class RobotShape:
    """Convex polygon footprint in the robot body frame.

    ``G`` holds one outward unit normal per edge and ``h`` the matching
    offsets, so the footprint is ``{z : G @ z <= h}``. Row ``j`` belongs to
    the edge from ``vertices[j]`` to ``vertices[j + 1]``.
    """

    vertices: np.ndarray
    G: np.ndarray
    h: np.ndarray

    @property
    def l(self):
        return self.G.shape[0]

    @property
    def centroid(self):
        return polygon_centroid(self.vertices)

    @property
    def width(self):
        """Extent along the body y axis (lateral size)."""
        return float(self.vertices[:, 1].max() - self.vertices[:, 1].min())

    @property
    def length(self):
        return float(self.vertices[:, 0].max() - self.vertices[:, 0].min())

    @property
    def radius(self):
        """Distance from the body origin to the farthest vertex."""
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def contains(self, points, tol=0.0):
        points = np.atleast_2d(points)
        return np.all(points @ self.G.T - self.h <= tol, axis=1)

    def world_vertices(self, state):
        return body_to_world(self.vertices, state)


def polygon_centroid(vertices):
    v = np.asarray(vertices, dtype=float)
    nxt = np.roll(v, -1, axis=0)
    cross = v[:, 0] * nxt[:, 1] - nxt[:, 0] * v[:, 1]
    area = 0.5 * cross.sum()
    cx = ((v[:, 0] + nxt[:, 0]) * cross).sum() / (6.0 * area)
    cy = ((v[:, 1] + nxt[:, 1]) * cross).sum() / (6.0 * area)
    return np.array([cx, cy])


def make_polygon(vertices):
    """Build a :class:`RobotShape` from counter-clockwise convex vertices.

    Raises :class:`ConstructionError` for fewer than three vertices, repeated
    or collinear vertices, clockwise order, or a non-convex outline.
    """
    v = np.array(vertices, dtype=float)
    if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
        raise ConstructionError("need at least three 2D vertices")
    if not np.all(np.isfinite(v)):
        raise ConstructionError("vertices must be finite")
    edges = np.roll(v, -1, axis=0) - v
    lengths = np.linalg.norm(edges, axis=1)
    if np.any(lengths <= _COLLINEAR_TOL):
        raise ConstructionError("repeated vertex")
    nxt = np.roll(edges, -1, axis=0)
    turn = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    scale = lengths * np.roll(lengths, -1)
    if np.any(turn <= _COLLINEAR_TOL * scale):
        if np.all(turn >= -_COLLINEAR_TOL * scale):
            raise ConstructionError("collinear vertices")
        raise ConstructionError("polygon is not convex and counter-clockwise")
    # Convex turns everywhere can still wind around more than once.
    winding = np.arctan2(turn, (edges * nxt).sum(axis=1)).sum()
    if not np.isclose(winding, 2.0 * np.pi, atol=1e-9):
        raise ConstructionError("polygon is self-intersecting")

    G = np.column_stack([edges[:, 1], -edges[:, 0]]) / lengths[:, None]
    h = (G * v).sum(axis=1)
    return RobotShape(vertices=v, G=G, h=h)


def rectangle(length, width, center=(0.0, 0.0)):
    """Axis-aligned rectangle footprint, counter-clockwise from the rear-right corner."""
    cx, cy = center
    hl, hw = 0.5 * length, 0.5 * width
    return make_polygon(
        [(cx - hl, cy - hw), (cx + hl, cy - hw), (cx + hl, cy + hw), (cx - hl, cy + hw)]
    )


def rotation(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


def world_to_body(points, state):
    """Express world points in the frame of a robot at ``state``.

    Accepts a single point ``(2,)`` or an ``(M, 2)`` array.
    """
    p = np.asarray(points, dtype=float)
    R = rotation(state[2])
    # Row-vector form of R^T (p - t).
    return (p - np.asarray(state[:2], dtype=float)) @ R


def body_to_world(points, state):
    p = np.asarray(points, dtype=float)
    R = rotation(state[2])
    return p @ R.T + np.asarray(state[:2], dtype=float)


@dataclass(frozen=True, eq=False)
class PointFlow:
    """Obstacle points propagated over the horizon.

    ``world`` and ``body`` have shape ``(H + 1, M, 2)``; ``velocities`` is
    ``(M, 2)``.
    """

    world: np.ndarray
    body: np.ndarray
    velocities: np.ndarray

    @property
    def horizon(self):
        return self.world.shape[0] - 1

    @property
    def num_points(self):
        return self.world.shape[1]


def build_point_flow(points, velocities, plan, dt):
    """Propagate points at constant velocity and express them in each plan frame."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    plan = np.asarray(plan, dtype=float)
    if plan.ndim != 2 or plan.shape[1] != 3:
        raise DimensionError("plan must have shape (H + 1, 3)")
    if velocities is None:
        vel = np.zeros_like(pts)
    else:
        vel = np.asarray(velocities, dtype=float).reshape(-1, 2)
    if vel.shape != pts.shape:
        raise DimensionError(
            f"{pts.shape[0]} points but {vel.shape[0]} velocities"
        )
    steps = np.arange(plan.shape[0], dtype=float)[:, None, None] * dt
    world = pts[None, :, :] + steps * vel[None, :, :]
    c, s = np.cos(plan[:, 2]), np.sin(plan[:, 2])
    rel = world - plan[:, None, :2]
    body = np.empty_like(world)
    body[..., 0] = c[:, None] * rel[..., 0] + s[:, None] * rel[..., 1]
    body[..., 1] = -s[:, None] * rel[..., 0] + c[:, None] * rel[..., 1]
    return PointFlow(world=world, body=body, velocities=vel)
