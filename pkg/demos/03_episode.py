"""
A closed-loop episode through a random obstacle field
=====================================================

Builds the planner from the default config, drives one seeded episode and
writes the trajectory as CSV and SVG next to this script.
"""

import sys
from pathlib import Path

from pointnav.cli import build_planner, trajectory_csv, trajectory_svg
from pointnav.config import load_config
from pointnav.simulator import run_episode

kind = sys.argv[1] if len(sys.argv) > 1 else "convex"
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0

config = load_config().with_overrides(scenario={"kind": kind})
scenario = config.scenario(seed)
planner = build_planner(config, scenario)
metrics = run_episode(scenario, planner, config.lidar())

print(f"{scenario.name}: {'success' if metrics.success else metrics.failure}")
for key, value in metrics.to_dict().items():
    print(f"  {key}: {value}")

out = Path(__file__).with_name(f"episode_{kind}_{seed}")
out.mkdir(exist_ok=True)
(out / "trajectory.csv").write_text(trajectory_csv(metrics, planner.model.kind, config.hash))
(out / "trajectory.svg").write_text(trajectory_svg(scenario, metrics))
print(f"wrote {out}/trajectory.csv and trajectory.svg")
