"""Run configuration files.

Configs are nested YAML mappings whose keys carry their units (``dt_s``,
``d_min_m``, ``max_range_m``). Every key is checked against :data:`DEFAULTS`;
a misspelt key is an error naming the full dotted path. The resolved config
hashes to a stable hex digest that is stamped on every output file.
"""

import copy
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml

from .dune import DEFAULT_WEIGHTS, EncoderNet, OracleEncoder, TrainConfig, default_shape
from .errors import ConfigError, ConstructionError, WeightsFormatError
from .geometry import make_polygon, rectangle
from .kinematics import ACKERMANN, DIFFERENTIAL, KinematicModel
from .nrmp import NrmpParams
from .pan import PanConfig
from .simulator import (
    KINDS,
    LidarModel,
    Scenario,
    circle,
    corridor_scenario,
    generate_random_scenario,
    polygon,
)

# The planner section defaults to a preset tuned for the random obstacle
# fields; NrmpParams() itself keeps the textbook weights.
DEFAULTS = {
    "seed": 0,
    "robot": {
        "length_m": 1.0,
        "width_m": 0.6,
        "vertices_m": None,
    },
    "kinematics": {
        "model": DIFFERENTIAL,
        "dt_s": 0.2,
        "v_min_mps": -2.0,
        "v_max_mps": 4.0,
        "turn_min": -3.14,  # rad/s (differential) or rad (Ackermann steering)
        "turn_max": 3.14,
        "wheelbase_m": 1.0,
    },
    "planner": {
        "horizon_steps": 10,
        "q": [0.5, 0.5, 0.5],
        "p": [1.0, 1.0],
        "d_min_m": 0.2,
        "d_max_m": 1.0,
        "eta": 1.0,
        "rho1": 1000.0,
        "rho2": 0.0,
        "b_k": 1.0,
        "m_prime": 100,
    },
    "pan": {
        "k_max": 5,
        "eps_state_m": 1e-3,
        "eps_cost": 1e-4,
        "warm_start": True,
    },
    "lidar": {
        "beams": 360,
        "max_range_m": 10.0,
        "span_rad": float(2.0 * np.pi),
        "noise_std_m": 0.0,
        "max_points": 0,
    },
    "encoder": {
        "weights": None,  # None: shipped weights for the default robot
        "oracle": False,
        "max_radius_m": 10.0,
    },
    "scenario": {
        "kind": "convex",  # convex | nonconvex | dynamic | corridor | empty | file
        "file": None,
        "count": 11,
        "start": [-1.0, 25.0, 0.0],
        "goal": [50.0, 25.0],
        "goal_radius_m": 1.0,
        "desired_speed_mps": 4.0,
        "obstacle_speed_mps": 1.0,
        "time_limit_s": None,
        "velocity_aware": True,
        "passage_width_m": 0.9,
    },
    "training": {
        "n_samples": 50_000,
        "r_max_m": 10.0,
        "holdout_fraction": 0.1,
        "epochs": 150,
        "batch_size": 256,
        "learning_rate": 1e-3,
        "seed": 0,
    },
    "tune": {
        "episodes": 60,
        "lr": 0.05,
        "clip": 1.0,
        "rel_step": 1e-3,
        "window": 10,
    },
}


def _merge(base, update, path=""):
    out = copy.deepcopy(base)
    if not isinstance(update, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    for key, value in update.items():
        dotted = f"{path}.{key}" if path else str(key)
        if key not in base:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(base[key], dict):
            out[key] = _merge(base[key], value or {}, dotted)
        else:
            out[key] = value
    return out


def config_hash(data):
    """Hex digest of the canonical JSON form of a resolved config."""
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True, eq=False)
class RunConfig:
    data: dict
    base_dir: Path

    @property
    def hash(self):
        return config_hash(self.data)

    @property
    def seed(self):
        return int(self.data["seed"])

    def with_overrides(self, **sections):
        """Copy with some keys replaced, e.g. ``with_overrides(seed=3, scenario={"kind": "empty"})``."""
        return RunConfig(_merge(self.data, sections), self.base_dir)

    # Builders. Each wraps construction errors as ConfigError naming the section.

    def shape(self):
        r = self.data["robot"]
        try:
            if r["vertices_m"] is not None:
                return make_polygon(r["vertices_m"])
            return rectangle(float(r["length_m"]), float(r["width_m"]))
        except (ConstructionError, ValueError, TypeError) as err:
            raise ConfigError(f"robot: {err}") from err

    def model(self):
        k = self.data["kinematics"]
        try:
            return KinematicModel(
                kind=k["model"],
                dt=float(k["dt_s"]),
                u_min=(float(k["v_min_mps"]), float(k["turn_min"])),
                u_max=(float(k["v_max_mps"]), float(k["turn_max"])),
                wheelbase=float(k["wheelbase_m"]),
            )
        except (ValueError, TypeError) as err:
            raise ConfigError(f"kinematics: {err}") from err

    def params(self):
        p = self.data["planner"]
        try:
            return NrmpParams(
                q=tuple(p["q"]),
                p=tuple(p["p"]),
                d_min=float(p["d_min_m"]),
                d_max=float(p["d_max_m"]),
                eta=float(p["eta"]),
                rho1=float(p["rho1"]),
                rho2=float(p["rho2"]),
                b_k=float(p["b_k"]),
                m_prime=int(p["m_prime"]),
                horizon=int(p["horizon_steps"]),
            )
        except (TypeError, ValueError) as err:
            raise ConfigError(f"planner: {err}") from err

    def pan(self):
        c = self.data["pan"]
        return PanConfig(
            k_max=int(c["k_max"]),
            eps_state=float(c["eps_state_m"]),
            eps_cost=float(c["eps_cost"]),
            warm_start=bool(c["warm_start"]),
        )

    def lidar(self):
        c = self.data["lidar"]
        try:
            return LidarModel(
                beams=int(c["beams"]),
                max_range=float(c["max_range_m"]),
                span=float(c["span_rad"]),
                noise_std=float(c["noise_std_m"]),
                max_points=int(c["max_points"]),
            )
        except ValueError as err:
            raise ConfigError(f"lidar: {err}") from err

    def training(self):
        t = self.data["training"]
        try:
            return TrainConfig(
                n_samples=int(t["n_samples"]),
                r_max=float(t["r_max_m"]),
                holdout_fraction=float(t["holdout_fraction"]),
                epochs=int(t["epochs"]),
                batch_size=int(t["batch_size"]),
                learning_rate=float(t["learning_rate"]),
                seed=int(t["seed"]),
            )
        except ValueError as err:
            raise ConfigError(f"training: {err}") from err

    def encoder(self, shape=None):
        """The distance encoder: an oracle, a weights file, or the shipped weights."""
        shape = shape or self.shape()
        e = self.data["encoder"]
        if e["oracle"]:
            return OracleEncoder(shape)
        path = e["weights"]
        if path is None:
            ref = default_shape().vertices
            if shape.vertices.shape != ref.shape or not np.allclose(shape.vertices, ref):
                raise ConfigError("encoder.weights is required for a non-default robot shape")
            path = DEFAULT_WEIGHTS
        path = self.resolve(path)
        if not path.exists():
            raise ConfigError(f"encoder.weights: no such file {str(path)!r}")
        try:
            return EncoderNet.load(path, shape)
        except WeightsFormatError as err:
            raise ConfigError(f"encoder.weights: {err}") from err

    def resolve(self, path):
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path

    def scenario(self, seed=None):
        s = self.data["scenario"]
        seed = self.seed if seed is None else int(seed)
        kind = s["kind"]
        speed = float(s["desired_speed_mps"])
        try:
            if kind in KINDS:
                sc = generate_random_scenario(
                    seed, kind, count=int(s["count"]), start=tuple(s["start"]), goal=tuple(s["goal"]),
                    desired_speed=speed, obstacle_speed=float(s["obstacle_speed_mps"]),
                    time_limit=s["time_limit_s"], velocity_aware=bool(s["velocity_aware"]),
                )
            elif kind == "corridor":
                sc = corridor_scenario(
                    seed, passage_width=float(s["passage_width_m"]), desired_speed=speed,
                    start=tuple(s["start"]), goal=tuple(s["goal"]), time_limit=s["time_limit_s"],
                )
            elif kind == "empty":
                sc = _empty_scenario(s, seed)
            elif kind == "file":
                if s["file"] is None:
                    raise ConfigError("scenario.file is required when scenario.kind is 'file'")
                sc = load_scenario(self.resolve(s["file"]), seed=seed)
            else:
                raise ConfigError(f"scenario.kind: unknown kind {kind!r}")
        except (TypeError, ValueError) as err:
            if isinstance(err, ConfigError):
                raise
            raise ConfigError(f"scenario: {err}") from err
        return replace(sc, goal_radius=float(s["goal_radius_m"]), velocity_aware=bool(s["velocity_aware"]))


def _empty_scenario(s, seed):
    start = np.asarray(s["start"], dtype=float)
    goal = np.asarray(s["goal"], dtype=float)
    lo = np.minimum(start[:2], goal) - 10.0
    hi = np.maximum(start[:2], goal) + 10.0
    dist = float(np.hypot(*(goal - start[:2])))
    limit = s["time_limit_s"] or max(20.0, 3.0 * dist / float(s["desired_speed_mps"]))
    return Scenario(
        bounds=(lo[0], lo[1], hi[0], hi[1]), obstacles=(), start=start, goal=goal,
        desired_speed=float(s["desired_speed_mps"]), time_limit=float(limit), seed=seed, name=f"empty-{seed}",
    )


_SCENARIO_KEYS = {"bounds_m", "start", "goal", "goal_radius_m", "desired_speed_mps", "time_limit_s",
                  "obstacles", "name"}
_OBSTACLE_KEYS = {"circle", "polygon", "parts", "velocity_mps"}


def load_scenario(path, seed=0):
    """Scenario from a YAML file.

    Obstacles are ``{circle: {center_m, radius_m}}``, ``{polygon: [[x, y], ...]}``
    or ``{parts: [[[x, y], ...], ...]}`` (a union of convex parts), each with
    an optional ``velocity_mps``.
    """
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot read scenario file {str(path)!r}: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("scenario file must be a mapping")
    for key in raw:
        if key not in _SCENARIO_KEYS:
            raise ConfigError(f"unknown scenario key {key!r}")
    obstacles = []
    for k, ob in enumerate(raw.get("obstacles") or []):
        extra = set(ob) - _OBSTACLE_KEYS
        if extra:
            raise ConfigError(f"unknown key {sorted(extra)[0]!r} in obstacle {k}")
        vel = ob.get("velocity_mps", (0.0, 0.0))
        if "circle" in ob:
            obstacles.append(circle(ob["circle"]["center_m"], float(ob["circle"]["radius_m"]), velocity=vel))
        elif "polygon" in ob:
            obstacles.append(polygon(ob["polygon"], velocity=vel))
        elif "parts" in ob:
            obstacles.append(polygon(*ob["parts"], velocity=vel))
        else:
            raise ConfigError(f"obstacle {k} needs circle, polygon or parts")
    start = np.asarray(raw["start"], dtype=float)
    goal = np.asarray(raw["goal"], dtype=float)
    speed = float(raw.get("desired_speed_mps", 1.0))
    dist = float(np.hypot(*(goal - start[:2])))
    return Scenario(
        bounds=tuple(float(b) for b in raw["bounds_m"]),
        obstacles=tuple(obstacles),
        start=start,
        goal=goal,
        goal_radius=float(raw.get("goal_radius_m", 1.0)),
        desired_speed=speed,
        time_limit=float(raw.get("time_limit_s") or max(20.0, 3.0 * dist / speed)),
        seed=int(seed),
        name=str(raw.get("name", Path(path).stem)),
    )


def load_config(path=None, overrides=None):
    """Read a YAML config (or just the defaults when ``path`` is None)."""
    data = copy.deepcopy(DEFAULTS)
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except OSError as err:
            raise ConfigError(f"cannot read config {str(path)!r}: {err.strerror}") from err
        except yaml.YAMLError as err:
            raise ConfigError(f"config {str(path)!r} is not valid YAML: {err}") from err
        data = _merge(data, raw)
        base = path.parent.resolve()
    if overrides:
        data = _merge(data, overrides)
    if data["kinematics"]["model"] not in (DIFFERENTIAL, ACKERMANN):
        raise ConfigError(f"kinematics.model: unknown model {data['kinematics']['model']!r}")
    return RunConfig(data, base)


def dump_config(config):
    return yaml.safe_dump(config.data, sort_keys=True)
