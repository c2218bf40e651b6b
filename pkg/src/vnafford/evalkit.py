"""Evaluation: scoring F1, manipulation success rate, equivariance consistency
and affordance heatmap export.

Test data is generated in each object's own frame and then posed by the
setting's random rotation, with pose and policy randomness drawn from
separate per-episode streams.  Two settings evaluated with the same seed
therefore see the same objects, points and noise; only the pose differs.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .datagen import DEFAULT_BETA, sample_point
from .errors import NoValidProposalError, UndefinedMetricError
from .geometry import (PointCloud, RigidTransform, apply_transform, geodesic_distance, random_rigid_transform,
                       random_rotation)
from .heads import (AffordanceModel, encode_cloud, infer_best_action, point_features, proposals_at,
                    score_logits_at, sigmoid)
from .simenv import (GripperAction, ObjectSpec, ObjectState, execute_primitive, ground_truth_success_grid,
                     initial_state, pose_for_setting, primitive, render_cloud)

SETTINGS = ("z", "so3")


def binary_f1(pred, truth) -> float:
    """F1 of boolean predictions; 0 when precision + recall is 0."""
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------- test scenes

@dataclass
class TestCase:
    """One labeled interaction on a posed object."""
    state: ObjectState
    cloud: PointCloud
    point_index: int
    rotation: np.ndarray
    result: int


def _episode_rngs(seed: int, i: int):
    """Independent streams for the object, its pose, and the policy."""
    return (np.random.default_rng([seed, i, 0]), np.random.default_rng([seed, i, 1]),
            np.random.default_rng([seed, i, 2]))


def posed_scene(spec: ObjectSpec, setting: str, seed: int, i: int, n_points: int):
    """Episode ``i``'s object state and cloud under ``setting``.

    The cloud is sampled in the object frame and then posed, so the point
    order and local positions are shared across settings.
    """
    obj_rng, pose_rng, _ = _episode_rngs(seed, i)
    local = initial_state(spec.with_pose(RigidTransform()), obj_rng)
    cloud = render_cloud(local, n_points, obj_rng)
    pose = pose_for_setting(setting, pose_rng).compose(spec.base_pose)
    state = ObjectState(spec.with_pose(pose), local.joint_value)
    return state, apply_transform(pose, cloud), obj_rng, pose


def make_test_cases(specs: list[ObjectSpec], prim, setting: str, seed: int, per_object: int = 10,
                    n_points: int = 256, beta: float = DEFAULT_BETA) -> list[TestCase]:
    """Held-out labeled interactions drawn like offline collection."""
    prim = primitive(prim)
    cases = []
    for i, spec in enumerate(specs):
        state, cloud, rng, pose = posed_scene(spec, setting, seed, i, n_points)
        for _ in range(per_object):
            idx = sample_point(cloud, beta, rng)
            rot = pose.rotation @ random_rotation(rng)
            result, _ = execute_primitive(state, GripperAction(prim, cloud.points[idx], rot))
            cases.append(TestCase(state, cloud, idx, rot, result))
    return cases


@torch.no_grad()
def predict_cases(model: AffordanceModel, cases: list[TestCase]) -> np.ndarray:
    out = np.zeros(len(cases))
    by_cloud: dict[int, list[int]] = {}
    for j, c in enumerate(cases):
        by_cloud.setdefault(id(c.cloud), []).append(j)
    for idxs in by_cloud.values():
        feats = encode_cloud(model, cases[idxs[0]].cloud)
        for j in idxs:
            c = cases[j]
            pf = point_features(feats, slice(c.point_index, c.point_index + 1))
            out[j] = sigmoid(score_logits_at(model, pf, c.rotation[None]))[0]
    return out


def eval_f1(model: AffordanceModel, cases: list[TestCase]) -> float:
    """Scoring-head F1 at the 0.5 decision threshold."""
    truth = np.array([c.result for c in cases]) == 1
    if truth.all() or not truth.any():
        raise UndefinedMetricError("F1 needs both classes in the test set")
    return binary_f1(predict_cases(model, cases) > 0.5, truth)


# ---------------------------------------------------------------- success rate

class ModelPolicy:
    """Policy wrapper around :func:`infer_best_action`."""

    def __init__(self, model: AffordanceModel, k: int):
        self.model, self.k = model, k

    def __call__(self, state, cloud, rng):
        pred = infer_best_action(self.model, cloud, self.k, rng)
        return pred.point_index, pred.rotation


class RandomPolicy:
    def __call__(self, state, cloud, rng):
        return int(rng.integers(cloud.n)), random_rotation(rng)


class OraclePolicy:
    """Returns the first known-positive (point, orientation) it finds.

    Points are tried handle first, then moving part, then base, each against
    the same ``n_orientations`` Haar samples; this finds exactly the hits of
    :func:`ground_truth_success_grid` without evaluating the whole grid.
    """

    def __init__(self, prim, n_orientations: int = 256):
        self.prim = primitive(prim)
        self.n_orientations = n_orientations

    def __call__(self, state, cloud, rng):
        rots = np.stack([random_rotation(rng) for _ in range(self.n_orientations)])
        labels = cloud.part_labels if cloud.part_labels is not None else np.zeros(cloud.n, dtype=int)
        order = np.argsort(-labels, kind="stable")
        for i in order:
            row = ground_truth_success_grid(state, self.prim, cloud.points[i], rots)[0]
            if row.any():
                return int(i), rots[int(np.argmax(row))]
        return None


def _run_episodes(policy, specs, prim, setting, seed, n_points, episodes):
    out = []
    for i in episodes:
        spec = specs[i % len(specs)]
        state, cloud, _, _ = posed_scene(spec, setting, seed, i, n_points)
        _, _, policy_rng = _episode_rngs(seed, i)
        try:
            action = policy(state, cloud, policy_rng)
        except NoValidProposalError:
            action = None
        if action is None:
            out.append(0)
            continue
        idx, rot = action
        result, _ = execute_primitive(state, GripperAction(prim, cloud.points[idx], rot))
        out.append(result)
    return out


def _worker(args):
    torch.set_num_threads(1)
    return _run_episodes(*args)


def episode_results(policy, specs: list[ObjectSpec], prim, setting: str, n_episodes: int, seed: int,
                    n_points: int = 256, workers: int = 1) -> list[int]:
    """Per-episode outcome bits, in episode order whatever the worker count."""
    prim = primitive(prim)
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    if workers <= 1:
        return _run_episodes(policy, specs, prim, setting, seed, n_points, range(n_episodes))
    chunks = [list(range(w, n_episodes, workers)) for w in range(workers)]
    with ProcessPoolExecutor(workers) as ex:
        parts = list(ex.map(_worker, [(policy, specs, prim, setting, seed, n_points, c) for c in chunks]))
    results = [0] * n_episodes
    for chunk, part in zip(chunks, parts):
        for i, r in zip(chunk, part):
            results[i] = r
    return results


def eval_success_rate(policy, specs: list[ObjectSpec], prim, setting: str, n_episodes: int, k: int = 100,
                      seed: int | np.random.Generator = 0, n_points: int = 256, workers: int = 1) -> float:
    """Fraction of episodes whose chosen action succeeds.

    ``policy`` is an :class:`AffordanceModel` (wrapped with ``k`` proposals) or
    any callable ``(state, cloud, rng) -> (point_index, rotation) | None``.
    Episodes without a valid proposal count as failures.
    """
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(2 ** 31))
    if isinstance(policy, AffordanceModel):
        policy = ModelPolicy(policy, k)
    res = episode_results(policy, specs, prim, setting, n_episodes, seed, n_points, workers)
    return float(np.mean(res))


# ---------------------------------------------------------------- equivariance

@torch.no_grad()
def eval_equivariance_consistency(model: AffordanceModel, cloud: PointCloud, n_rot: int,
                                  rng: np.random.Generator, transforms: list[RigidTransform] | None = None,
                                  n_noise: int = 8, n_probe: int = 8) -> tuple[float, float]:
    """``(affordance_dev, proposal_geodesic_dev)`` across rigid copies of ``cloud``.

    ``affordance_dev`` is the largest per-point affordance gap over all pairs
    of copies; ``proposal_geodesic_dev`` is the mean geodesic distance between
    back-rotated proposals made with shared noise at shared probe points.
    """
    if transforms is None:
        if n_rot < 2:
            raise ValueError("n_rot must be >= 2")
        transforms = [random_rigid_transform(rng) for _ in range(n_rot)]
    noise = rng.standard_normal((n_noise, model.cfg.d_z))
    probes = rng.choice(cloud.n, size=min(n_probe, cloud.n), replace=False)
    maps, props = [], []
    for t in transforms:
        feats = encode_cloud(model, apply_transform(t, cloud))
        maps.append(sigmoid(model.affordance_logits(feats.inv).double().numpy()))
        per_point = []
        for p in probes:
            rots, kept = proposals_at(model, point_features(feats, slice(p, p + 1)), noise)
            full = np.full((n_noise, 3, 3), np.nan)
            full[kept] = t.rotation.T @ rots
            per_point.append(full)
        props.append(np.stack(per_point))
    aff_dev, geo = 0.0, []
    for a in range(len(transforms)):
        for b in range(a + 1, len(transforms)):
            aff_dev = max(aff_dev, float(np.max(np.abs(maps[a] - maps[b]))))
            for ra, rb in zip(props[a].reshape(-1, 3, 3), props[b].reshape(-1, 3, 3)):
                if np.all(np.isfinite(ra)) and np.all(np.isfinite(rb)):
                    geo.append(geodesic_distance(ra, rb))
    return aff_dev, float(np.mean(geo)) if geo else 0.0


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    setting: str
    primitive: str
    f1: float | None  # None when the test set holds a single class
    success_rate: float
    n_episodes: int
    equivariance: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    family: str = "drawer"

    def __post_init__(self):
        if not (0 <= self.success_rate <= 1 and (self.f1 is None or 0 <= self.f1 <= 1)):
            raise ValueError("f1 and success_rate must lie in [0, 1]")
        if self.n_episodes <= 0:
            raise ValueError("n_episodes must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


# ---------------------------------------------------------------- heatmap

PLY_HEADER = """ply
format ascii 1.0
element vertex {n}
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
end_header
"""


def score_color(score: float) -> tuple[int, int, int]:
    """Linear blue (0) to red (1); channel values rounded half down."""
    s = min(max(float(score), 0.0), 1.0)
    half_down = lambda x: int(math.ceil(x - 0.5))  # noqa: E731
    return half_down(255 * s), 0, half_down(255 * (1 - s))


def export_heatmap(cloud: PointCloud | np.ndarray, scores, path) -> None:
    """Write an ASCII PLY with one colored vertex per point.

    Coordinates are printed with 6 significant digits.
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) != len(pts):
        raise ValueError(f"{len(scores)} scores for {len(pts)} points")
    lines = [PLY_HEADER.format(n=len(pts))]
    for p, s in zip(pts, scores):
        r, g, b = score_color(s)
        lines.append(f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {r} {g} {b}\n")
    Path(path).write_text("".join(lines))


def read_heatmap(path) -> tuple[np.ndarray, np.ndarray]:
    """Parse a file written by :func:`export_heatmap` into ``(points, colors)``."""
    lines = Path(path).read_text().splitlines()
    n = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    body = lines[lines.index("end_header") + 1:][:n]
    data = np.array([l.split() for l in body], dtype=np.float64).reshape(n, 6)
    return data[:, :3], data[:, 3:].astype(np.uint8)
