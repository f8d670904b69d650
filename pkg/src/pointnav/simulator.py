"""Deterministic 2D world: obstacles, lidar, collisions and episodes.

Obstacles are circles or unions of convex polygons (an L-shape is two
rectangles), optionally moving at constant velocity and bouncing off the
scenario bounds. The robot senses them through a raycasting lidar; ground
truth collisions use separating axes.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .distance import exact_distance_batch
from .errors import GenerationError, LinearizationError, SolveError
from .geometry import body_to_world, world_to_body
from .kinematics import step_nonlinear

CONVEX = "convex"
NONCONVEX = "nonconvex"
DYNAMIC = "dynamic"
KINDS = (CONVEX, NONCONVEX, DYNAMIC)

_CONTACT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Obstacle:
    """A circle (``radius > 0``) or a union of convex CCW polygons (``parts``)."""

    parts: tuple = ()
    center: np.ndarray = None
    radius: float = 0.0
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def is_circle(self):
        return self.radius > 0.0

    def translated(self, offset):
        offset = np.asarray(offset, dtype=float)
        return replace(
            self,
            parts=tuple(p + offset for p in self.parts),
            center=None if self.center is None else self.center + offset,
        )

    def bbox(self):
        if self.is_circle:
            return np.concatenate([self.center - self.radius, self.center + self.radius])
        pts = np.vstack(self.parts)
        return np.concatenate([pts.min(axis=0), pts.max(axis=0)])

    def bounding_circle(self):
        if self.is_circle:
            return self.center, self.radius
        pts = np.vstack(self.parts)
        c = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
        return c, float(np.linalg.norm(pts - c, axis=1).max())


def circle(center, radius, velocity=(0.0, 0.0)):
    return Obstacle(center=np.asarray(center, dtype=float), radius=float(radius),
                    velocity=np.asarray(velocity, dtype=float))


def polygon(*parts, velocity=(0.0, 0.0)):
    """Obstacle made of one or more convex counter-clockwise parts."""
    return Obstacle(parts=tuple(np.asarray(p, dtype=float) for p in parts),
                    velocity=np.asarray(velocity, dtype=float))


def box(center, length, width, angle=0.0, velocity=(0.0, 0.0)):
    hl, hw = 0.5 * length, 0.5 * width
    corners = np.array([(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)])
    return polygon(body_to_world(corners, (center[0], center[1], angle)), velocity=velocity)


@dataclass(frozen=True, eq=False)
class Scenario:
    bounds: tuple  # (xmin, ymin, xmax, ymax)
    obstacles: tuple
    start: np.ndarray
    goal: np.ndarray
    goal_radius: float = 1.0
    desired_speed: float = 4.0
    time_limit: float = 40.0
    seed: int = 0
    velocity_aware: bool = True
    name: str = ""


@dataclass(frozen=True)
class LidarModel:
    beams: int = 360
    max_range: float = 10.0
    span: float = 2.0 * np.pi
    noise_std: float = 0.0
    max_points: int = 0  # 0 keeps every return

    def __post_init__(self):
        if self.beams < 1:
            raise ValueError("need at least one beam")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")

    def angles(self, heading):
        full = np.isclose(self.span, 2.0 * np.pi)
        offsets = np.linspace(-0.5 * self.span, 0.5 * self.span, self.beams, endpoint=not full)
        if self.beams == 1:
            offsets = np.zeros(1)
        return heading + offsets


@dataclass(frozen=True, eq=False)
class Scan:
    points: np.ndarray
    velocities: np.ndarray
    ranges: np.ndarray  # per beam, inf where nothing was hit
    angles: np.ndarray


def _segments(scenario):
    starts, ends, vels = [], [], []
    for ob in scenario.obstacles:
        for part in ob.parts:
            starts.append(part)
            ends.append(np.roll(part, -1, axis=0))
            vels.append(np.broadcast_to(ob.velocity, part.shape))
    if not starts:
        z = np.zeros((0, 2))
        return z, z, z
    return np.vstack(starts), np.vstack(ends), np.vstack(vels)


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def ray_distances(origin, directions, scenario):
    """Exact range to the first obstacle along each unit direction (``inf`` if none).

    Returns ``(ranges, velocities)`` where velocities belong to the hit obstacle.
    """
    o = np.asarray(origin, dtype=float)
    D = np.asarray(directions, dtype=float)
    nb = D.shape[0]
    best = np.full(nb, np.inf)
    vel = np.zeros((nb, 2))

    P, Q, V = _segments(scenario)
    if P.shape[0]:
        E = Q - P
        rel = P - o
        denom = _cross(D[:, None, :], E[None, :, :])
        with np.errstate(divide="ignore", invalid="ignore"):
            r = _cross(rel[None, :, :], E[None, :, :]) / denom
            u = _cross(rel[None, :, :], D[:, None, :]) / denom
        ok = (denom != 0.0) & (r >= 0.0) & (u >= 0.0) & (u <= 1.0)
        r = np.where(ok, r, np.inf)
        j = np.argmin(r, axis=1)
        rj = r[np.arange(nb), j]
        hit = rj < best
        best = np.where(hit, rj, best)
        vel[hit] = V[j[hit]]

    for ob in scenario.obstacles:
        if not ob.is_circle:
            continue
        f = o - ob.center
        b = D @ f
        disc = b * b - (f @ f - ob.radius**2)
        with np.errstate(invalid="ignore"):
            root = np.sqrt(disc)
        near = -b - root
        far = -b + root
        r = np.where(near >= 0.0, near, far)
        r = np.where((disc >= 0.0) & (r >= 0.0), r, np.inf)
        hit = r < best
        best = np.where(hit, r, best)
        vel[hit] = ob.velocity
    return best, vel


def raycast(pose, scenario, lidar, rng=None):
    """One lidar sweep from ``pose``; beams without a return within range are dropped.

    Range noise is drawn for every beam (hit or not) so the generator advances
    identically regardless of the scene.
    """
    angles = lidar.angles(float(pose[2]))
    D = np.column_stack([np.cos(angles), np.sin(angles)])
    ranges, vel = ray_distances(pose[:2], D, scenario)
    ranges = np.where(ranges <= lidar.max_range, ranges, np.inf)
    if lidar.noise_std > 0:
        if rng is None:
            raise ValueError("noisy lidar needs an rng")
        noise = rng.normal(0.0, lidar.noise_std, size=ranges.shape)
        ranges = np.where(np.isfinite(ranges), np.clip(ranges + noise, 0.0, lidar.max_range), ranges)
    hit = np.isfinite(ranges)
    idx = np.flatnonzero(hit)
    if lidar.max_points and idx.size > lidar.max_points:
        # Uniform angular subsampling of the returns.
        keep = np.linspace(0, idx.size - 1, lidar.max_points).round().astype(int)
        idx = idx[keep]
    pts = np.asarray(pose[:2], dtype=float) + ranges[idx, None] * D[idx]
    return Scan(points=pts, velocities=vel[idx], ranges=ranges, angles=angles)


def step_world(scenario, dt, reflect=True):
    """Advance every obstacle by ``velocity * dt``; bounce off the bounds if ``reflect``."""
    moved = []
    xmin, ymin, xmax, ymax = scenario.bounds
    for ob in scenario.obstacles:
        if not np.any(ob.velocity):
            moved.append(ob)
            continue
        nxt = ob.translated(ob.velocity * dt)
        if reflect:
            lo_x, lo_y, hi_x, hi_y = nxt.bbox()
            v = ob.velocity.copy()
            if (lo_x < xmin and v[0] < 0) or (hi_x > xmax and v[0] > 0):
                v[0] = -v[0]
            if (lo_y < ymin and v[1] < 0) or (hi_y > ymax and v[1] > 0):
                v[1] = -v[1]
            nxt = replace(nxt, velocity=v)
        moved.append(nxt)
    return replace(scenario, obstacles=tuple(moved))


def _polygons_overlap(A, B, tol=_CONTACT_TOL):
    for poly in (A, B):
        e = np.roll(poly, -1, axis=0) - poly
        normals = np.column_stack([e[:, 1], -e[:, 0]])
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
        pa = A @ normals.T
        pb = B @ normals.T
        gap = np.maximum(pb.min(axis=0) - pa.max(axis=0), pa.min(axis=0) - pb.max(axis=0))
        if np.any(gap > tol):
            return False
    return True


def _segment_distances(points, starts, ends):
    """Distance from each point to each segment, shape ``(len(points), len(starts))``."""
    E = ends - starts
    rel = points[:, None, :] - starts[None, :, :]
    t = np.clip((rel * E).sum(-1) / (E * E).sum(-1), 0.0, 1.0)
    diff = rel - t[..., None] * E
    return np.sqrt((diff * diff).sum(-1))


def check_collision(pose, shape, scenario, tol=_CONTACT_TOL):
    """True when the footprint at ``pose`` touches any obstacle (contact within ``tol`` counts)."""
    robot = shape.world_vertices(pose)
    for ob in scenario.obstacles:
        if ob.is_circle:
            d = exact_distance_batch(world_to_body(ob.center, pose)[None], shape).d[0]
            if d <= ob.radius + tol:
                return True
            continue
        for part in ob.parts:
            if _polygons_overlap(robot, part, tol):
                return True
    return False


def clearance(pose, shape, scenario):
    """Gap between the footprint and the nearest obstacle (0 when touching, inf if empty)."""
    robot = shape.world_vertices(pose)
    r_next = np.roll(robot, -1, axis=0)
    best = np.inf
    for ob in scenario.obstacles:
        if ob.is_circle:
            d = exact_distance_batch(world_to_body(ob.center, pose)[None], shape).d[0] - ob.radius
            best = min(best, max(d, 0.0))
            continue
        for part in ob.parts:
            if _polygons_overlap(robot, part, 0.0):
                return 0.0
            d1 = _segment_distances(part, robot, r_next).min()
            d2 = _segment_distances(robot, part, np.roll(part, -1, axis=0)).min()
            best = min(best, d1, d2)
    return float(best)


def don(passage_width, robot_width):
    """Degree of narrowness: robot width over the narrowest passage width."""
    if passage_width <= 0 or robot_width <= 0:
        raise ValueError("widths must be positive")
    return robot_width / passage_width


@dataclass(frozen=True, eq=False)
class Trajectory:
    t: np.ndarray  # (N + 1,)
    states: np.ndarray  # (N + 1, 3)
    controls: np.ndarray  # (N, 2)
    clearance: np.ndarray  # (N + 1,)


@dataclass(frozen=True, eq=False)
class EpisodeMetrics:
    success: bool
    failure: str  # "none" | "collision" | "timeout" | "planner_error"
    navigation_time: float
    average_speed: float
    path_length: float
    min_clearance: float
    steps: int
    trajectory: Trajectory = field(repr=False, default=None)
    detail: str = ""

    def to_dict(self):
        return {
            "success": bool(self.success),
            "failure": self.failure,
            "navigation_time_s": float(self.navigation_time),
            "average_speed_mps": float(self.average_speed),
            "path_length_m": float(self.path_length),
            "min_clearance_m": float(self.min_clearance) if np.isfinite(self.min_clearance) else None,
            "steps": int(self.steps),
        }


def metrics_from_trajectory(traj, success, failure, detail=""):
    steps = traj.controls.shape[0]
    seg = np.diff(traj.states[:, :2], axis=0)
    length = float(np.hypot(seg[:, 0], seg[:, 1]).sum())
    duration = float(traj.t[-1] - traj.t[0]) if steps else 0.0
    # Each Euler step moves exactly |v| * dt, so mean |v| times duration is the path length.
    speed = float(np.abs(traj.controls[:, 0]).mean()) if steps else 0.0
    finite = traj.clearance[np.isfinite(traj.clearance)]
    return EpisodeMetrics(
        success=success,
        failure=failure,
        navigation_time=duration,
        average_speed=speed,
        path_length=length,
        min_clearance=float(finite.min()) if finite.size else float("inf"),
        steps=steps,
        trajectory=traj,
        detail=detail,
    )


def run_episode(scenario, planner, lidar=None, control_rate=None, substeps=4):
    """Close the loop: scan, plan, apply the first control, advance the world.

    ``planner`` needs ``act(state, points, velocities) -> (u, result)``,
    ``reset()`` and ``model``/``shape`` attributes. Planner errors end the
    episode with ``failure="planner_error"``.
    """
    lidar = lidar or LidarModel()
    model = planner.model
    shape = planner.shape
    if control_rate is not None:
        model = replace(model, dt=1.0 / control_rate)
    dt = model.dt
    rng = np.random.default_rng(scenario.seed)
    planner.reset()

    world = scenario
    state = np.asarray(scenario.start, dtype=float).copy()
    times, states, controls, gaps = [0.0], [state.copy()], [], [clearance(state, shape, world)]
    failure, detail = "none", ""
    n_max = int(np.ceil(scenario.time_limit / dt - 1e-9))
    k = 0
    while True:
        if np.hypot(*(state[:2] - scenario.goal)) <= scenario.goal_radius:
            break
        if k >= n_max:
            failure = "timeout"
            break
        scan = raycast(state, world, lidar, rng)
        vel = scan.velocities if scenario.velocity_aware else np.zeros_like(scan.velocities)
        try:
            u, _ = planner.act(state, scan.points, vel)
        except (SolveError, LinearizationError) as err:
            failure, detail = "planner_error", str(err)
            break
        nxt = step_nonlinear(state, u, model)
        hit = False
        for j in range(1, substeps + 1):
            frac = j / substeps
            pose = step_nonlinear(state, u, replace(model, dt=dt * frac))
            if check_collision(pose, shape, step_world(world, dt * frac, reflect=False)):
                hit = True
                nxt = pose
                break
        world = step_world(world, dt)
        k += 1
        state = nxt
        times.append(k * dt if not hit else (k - 1 + frac) * dt)
        states.append(state.copy())
        controls.append(np.asarray(u, dtype=float).copy())
        gaps.append(0.0 if hit else clearance(state, shape, world))
        if hit:
            failure = "collision"
            break
    traj = Trajectory(
        t=np.array(times),
        states=np.array(states),
        controls=np.array(controls).reshape(-1, 2),
        clearance=np.array(gaps),
    )
    return metrics_from_trajectory(traj, failure == "none", failure, detail)


# Scenario generation


def _random_convex(rng, radius):
    n = int(rng.integers(3, 7))
    ang = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
    # Keep the gaps below pi so the polygon surrounds its center.
    while np.max(np.diff(np.append(ang, ang[0] + 2.0 * np.pi))) >= np.pi:
        ang = np.sort(rng.uniform(0.0, 2.0 * np.pi, n))
    r = radius * rng.uniform(0.7, 1.0, n)
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)])


def _rect(x0, y0, x1, y1):
    return np.array([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], dtype=float)


def _random_nonconvex(rng):
    arm = rng.uniform(1.4, 2.2)
    t = rng.uniform(0.4, 0.6)
    if rng.random() < 0.5:
        parts = [_rect(0.0, 0.0, arm, t), _rect(0.0, t, t, arm)]  # L
    else:
        parts = [_rect(0.0, 0.0, arm, t), _rect(0.0, t, t, arm), _rect(arm - t, t, arm, arm)]  # U
    c = 0.5 * np.array([arm, arm])
    return [p - c for p in parts]


def _placed(parts, center, angle):
    return [body_to_world(p, (center[0], center[1], angle)) for p in parts]


def generate_random_scenario(seed, kind=CONVEX, count=11, start=(-1.0, 25.0, 0.0), goal=(50.0, 25.0),
                             desired_speed=4.0, obstacle_speed=1.0, band=6.0, gap=1.4,
                             time_limit=None, velocity_aware=True, max_tries=2000):
    """Random obstacle field between ``start`` and ``goal``.

    Obstacles sit in a band of half-width ``band`` around the start-goal
    line, at least ``gap`` apart (bounding circles) and clear of both
    endpoints. ``dynamic`` obstacles move at ``obstacle_speed``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}")
    rng = np.random.default_rng([int(seed), KINDS.index(kind)])
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    direction = (goal - start[:2]) / np.hypot(*(goal - start[:2]))
    normal = np.array([-direction[1], direction[0]])
    length = float(np.hypot(*(goal - start[:2])))
    corners = np.array([start[:2] + band * normal, start[:2] - band * normal,
                        goal + band * normal, goal - band * normal])
    margin = 2.0
    bounds = (corners[:, 0].min() - margin, corners[:, 1].min() - margin,
              corners[:, 0].max() + margin, corners[:, 1].max() + margin)

    obstacles = []
    circles = []
    tries = 0
    while len(obstacles) < count:
        tries += 1
        if tries > max_tries:
            raise GenerationError(f"placed {len(obstacles)} of {count} obstacles after {max_tries} tries")
        s = rng.uniform(6.0, length - 5.0)
        off = rng.uniform(-band, band)
        center = start[:2] + s * direction + off * normal
        angle = rng.uniform(0.0, 2.0 * np.pi)
        if kind == NONCONVEX:
            ob = polygon(*_placed(_random_nonconvex(rng), center, angle))
        elif rng.random() < 0.4:
            ob = circle(center, rng.uniform(0.5, 1.0))
        else:
            ob = polygon(_placed([_random_convex(rng, rng.uniform(0.7, 1.2))], center, angle)[0])
        if kind == DYNAMIC:
            heading = rng.uniform(0.0, 2.0 * np.pi)
            ob = replace(ob, velocity=obstacle_speed * np.array([np.cos(heading), np.sin(heading)]))
        c, r = ob.bounding_circle()
        if any(np.hypot(*(c - c2)) < r + r2 + gap for c2, r2 in circles):
            continue
        if np.hypot(*(c - start[:2])) < r + 3.0 or np.hypot(*(c - goal)) < r + 2.0:
            continue
        obstacles.append(ob)
        circles.append((c, r))
    if time_limit is None:
        time_limit = max(20.0, 3.0 * length / desired_speed)
    return Scenario(
        bounds=bounds,
        obstacles=tuple(obstacles),
        start=start.copy(),
        goal=goal.copy(),
        desired_speed=desired_speed,
        time_limit=time_limit,
        seed=int(seed),
        velocity_aware=velocity_aware,
        name=f"{kind}-{seed}",
    )


def corridor_scenario(seed=0, passage_width=0.9, length=12.0, start=(0.0, 20.0, 0.0), goal=(30.0, 20.0),
                      desired_speed=2.0, wall_span=6.0, offset_jitter=0.2,
                      time_limit=None):
    """Straight run through a narrow gap between two walls.

    The gap is centred ``offset_jitter``-randomly (seeded) around the
    start-goal line, so the nominal path passes through it.
    """
    rng = np.random.default_rng([int(seed), 7])
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    mid_x = 0.5 * (start[0] + goal[0])
    y0 = start[1] + rng.uniform(-offset_jitter, offset_jitter)
    x0, x1 = mid_x - 0.5 * length, mid_x + 0.5 * length
    half = 0.5 * passage_width
    lower = polygon(_rect(x0, y0 - half - wall_span, x1, y0 - half))
    upper = polygon(_rect(x0, y0 + half, x1, y0 + half + wall_span))
    if time_limit is None:
        time_limit = max(20.0, 3.0 * np.hypot(*(goal - start[:2])) / desired_speed)
    return Scenario(
        bounds=(start[0] - 2.0, y0 - half - wall_span - 2.0, goal[0] + 2.0, y0 + half + wall_span + 2.0),
        obstacles=(lower, upper),
        start=start.copy(),
        goal=goal.copy(),
        desired_speed=desired_speed,
        time_limit=time_limit,
        seed=int(seed),
        name=f"corridor-{seed}",
    )
