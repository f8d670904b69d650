"""
One planning step in front of an obstacle
=========================================

A box overlaps the left half of the straight path. The alternating loop encodes the scan
points, solves the planning QP, and repeats; the cost of each iteration and
the size of each plan update are printed.
"""

import numpy as np

from pointnav.config import load_config
from pointnav.pan import NominalPath, plan_once
from pointnav.simulator import Scenario, box, raycast

config = load_config()
robot, model, params = config.shape(), config.model(), config.params()
net = config.encoder(robot)

world = Scenario(bounds=(-5, -10, 30, 10), obstacles=(box((5.0, 0.7), 1.0, 1.5),),
                 start=np.zeros(3), goal=np.array([20.0, 0.0]))
scan = raycast(world.start, world, config.lidar())
print(f"{len(scan.points)} scan points")

path = NominalPath(world.start[:2], world.goal, 3.0, model.dt)
nominal = path.reference(world.start, params.horizon)
res = plan_once(world.start, scan.points, None, nominal, net, params, model, robot,
                config.pan(), max_radius=10.0)

print(f"stopped after {res.iterations} iterations ({res.reason})")
for k, (c, dS) in enumerate(zip(res.costs[1:], res.state_changes), start=1):
    print(f"  iteration {k}: cost {c:9.3f}, plan moved {dS:.4f} m")
print("planned lateral offsets (m):", np.round(res.S[:, 1], 2))
print("safety distances d (m):     ", np.round(res.d, 2))
print("first control (v, omega):   ", np.round(res.U[0], 3))
