"""What equivariance buys: the same object in two poses, through both encoders.

The vector-neuron model gives the same affordance map and the same chosen
point however the drawer is turned; the coordinate-based baseline does not.
Heatmaps for both poses are written next to this script.

    python3 demos/equivariance_tour.py
"""
from pathlib import Path

import numpy as np

from vnafford.evalkit import eval_equivariance_consistency, export_heatmap
from vnafford.geometry import apply_transform, geodesic_distance, random_rigid_transform
from vnafford.heads import build_model, infer_best_action
from vnafford.simenv import generate_specs, initial_state, render_cloud
from vnafford.vn_core import ModelConfig

OUT = Path(__file__).resolve().parent / "out"
OUT.mkdir(exist_ok=True)

rng = np.random.default_rng(0)
spec = generate_specs("drawer", 1, seed=5)[0]
cloud = render_cloud(initial_state(spec, rng), 256, rng)
turn = random_rigid_transform(np.random.default_rng(1))
turned = apply_transform(turn, cloud)

for kind in ("vn", "baseline"):
    model = build_model(ModelConfig(kind=kind, seed=2))
    a = infer_best_action(model, cloud, 20, np.random.default_rng(3))
    b = infer_best_action(model, turned, 20, np.random.default_rng(3))
    gap = np.max(np.abs(a.affordance - b.affordance))
    print(f"{kind:>8}: max affordance change {gap:.1e}, chosen point {a.point_index} vs {b.point_index}")
    if kind == "vn":
        # the chosen orientation turns with the object
        print(f"          orientation error after undoing the turn: "
              f"{geodesic_distance(b.rotation, turn.rotation @ a.rotation):.1e} rad")
    aff, geo = eval_equivariance_consistency(model, cloud, 4, np.random.default_rng(4))
    print(f"          consistency over 4 random poses: affordance {aff:.1e}, proposals {geo:.1e} rad")
    # untrained maps are nearly flat; stretch them so the heatmap shows structure
    lo, hi = a.affordance.min(), a.affordance.max()
    export_heatmap(cloud, (a.affordance - lo) / (hi - lo + 1e-12), OUT / f"{kind}_pose_a.ply")
    export_heatmap(turned, (b.affordance - lo) / (hi - lo + 1e-12), OUT / f"{kind}_pose_b.ply")

print(f"heatmaps in {OUT}")
