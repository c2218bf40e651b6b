"""Collect, train and evaluate at a size that finishes in a few minutes.

A small vector-neuron model and the coordinate baseline are trained on the
same z-posed drawer data, then scored on held-out drawers under z and full
SO(3) poses.  The acceptance suite runs the full desk-scale version of this.

    python3 demos/train_and_compare.py
"""
import logging

import numpy as np
import torch

from vnafford.datagen import collect_offline, make_scenes
from vnafford.errors import UndefinedMetricError
from vnafford.evalkit import eval_f1, eval_success_rate, make_test_cases
from vnafford.simenv import generate_specs
from vnafford.trainer import TrainConfig, train
from vnafford.vn_core import ModelConfig

logging.basicConfig(level=logging.INFO, format="%(message)s")
torch.set_num_threads(1)

specs = generate_specs("drawer", 150, seed=11, setting="z")
data = collect_offline(make_scenes(specs, 256, np.random.default_rng(12)), 1500, "pull", np.random.default_rng(13))
print(f"{len(data)} offline records, positive rate {data.positive_rate():.3f}")

test = generate_specs("drawer", 60, seed=99)
for kind in ("vn", "baseline"):
    cfg = TrainConfig(epochs_a=6, epochs_b=4, online_start_epoch=3, online_per_epoch=64, online_total=192,
                      model=ModelConfig(kind=kind, d=16, d_i=32, edge_channels=16, hidden=64))
    res = train(data, cfg)
    for setting in ("z", "so3"):
        cases = make_test_cases(test, "pull", setting, 7, per_object=20)
        try:
            f1 = f"{eval_f1(res.model, cases):.3f}"
        except UndefinedMetricError:
            f1 = "undefined"
        sr = eval_success_rate(res.model, test, "pull", setting, 60, k=50, seed=5)
        print(f"{kind:>8} {setting:>3}: F1 {f1}, success rate {sr:.3f}")
