"""
Learning planner weights on a narrow corridor
=============================================

The default weights hit the wall of a 0.9 m gap. Each failed episode is
replayed through the planner, the loss is differentiated numerically with
respect to the learnable weights, and one clipped gradient step is taken.
This runs until the robot gets through (a few minutes).
"""

import sys

import numpy as np

from pointnav.cli import build_planner
from pointnav.config import load_config
from pointnav.lon import tune
from pointnav.simulator import run_episode

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
config = load_config().with_overrides(scenario={
    "kind": "corridor", "start": [0.0, 20.0, 0.0], "goal": [30.0, 20.0], "desired_speed_mps": 2.0,
})
scenario = config.scenario(seed)
planner = build_planner(config, scenario, recording=True)
lidar = config.lidar()


def show(rec, metrics):
    vals = {k: np.round(np.ravel(v), 3).tolist() for k, v in rec.values.items()}
    outcome = "success" if metrics.success else metrics.failure
    print(f"episode {rec.episode:2d}: {outcome:10s} loss {rec.loss:8.3f}  {vals}")


records, params = tune(scenario, planner, lambda sc, pl: run_episode(sc, pl, lidar),
                       episodes=60, callback=show)
print("learned weights:", params.learnable())
