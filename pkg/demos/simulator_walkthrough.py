"""A tour of the rule-based articulated-object simulator.

Builds one drawer, opens it by pulling the handle, shows which grasps fail
and why, then compares a random policy with the ground-truth oracle.

    python3 demos/simulator_walkthrough.py
"""
import numpy as np

from vnafford.evalkit import OraclePolicy, RandomPolicy, eval_success_rate
from vnafford.geometry import HANDLE, random_rigid_transform
from vnafford.simenv import (GripperAction, ObjectState, execute_primitive, generate_specs, part_areas,
                             render_cloud)

spec = generate_specs("drawer", 1, seed=0)[0]
closed = ObjectState(spec, spec.joint_range[0])
print(f"drawer body {np.round(spec.body_size, 3)} m, travel {spec.joint_range[1]:.3f} m, "
      f"handle {spec.handle.length:.3f} m long")

# The handle is a thin cylinder, so a 256-point scan rarely sees more than a couple of handle points.
areas = part_areas(closed)
cloud = render_cloud(closed, 256, np.random.default_rng(1))
print(f"handle area share {areas[HANDLE] / sum(areas.values()):.4f}, "
      f"handle points in a 256-point cloud: {int(np.sum(cloud.part_labels == HANDLE))}")

# Grasp frame columns: closing direction, second finger axis, approach.
# Closing across the (horizontal) handle and approaching the front face opens the drawer.
front = spec.moving_part_center + spec.handle.center_offset + [spec.handle.radius, 0.0, 0.0]
good = np.array([[0.0, 0.0, -1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])
along = np.column_stack([[0.0, 1.0, 0.0], [0.0, 0.0, -1.0], [-1.0, 0.0, 0.0]])
for name, rot in (("closing across the handle", good), ("closing along the handle", along)):
    result, after = execute_primitive(closed, GripperAction("pull", front, rot))
    print(f"pull, {name}: result {result}, joint {closed.joint_value:.3f} -> {after.joint_value:.3f}")

# Moving object and action together changes nothing.
t = random_rigid_transform(np.random.default_rng(2))
moved = ObjectState(spec.with_pose(t), closed.joint_value)
r_moved, _ = execute_primitive(moved, GripperAction("pull", t.apply_points(front), t.rotation @ good))
print("same outcome after a joint rigid transform:", r_moved == 1)

# Policies: random grasps almost never open a drawer, the oracle does whenever a handle point is visible.
specs = generate_specs("drawer", 20, seed=3)
for name, policy in (("random", RandomPolicy()), ("oracle", OraclePolicy("pull"))):
    rate = eval_success_rate(policy, specs, "pull", "so3", 20, seed=4, n_points=256)
    print(f"{name:>6} policy success rate: {rate:.2f}")
