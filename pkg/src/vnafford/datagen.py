"""Offline random and online adaptive interaction collection, plus persistence.

A :class:`Dataset` stores each rendered cloud once (one per object state) and
records reference clouds by id.  On disk it is a directory::

    manifest.json      counts, seeds, beta, primitive, format version
    objects.json       ObjectSpec documents keyed by object id
    clouds/<id>.npz    points, part labels, object id, joint value
    records.csv        object_id, cloud_file, point_index, r00..r22, result
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import DatasetLoadError, DegenerateFrameError, NoValidProposalError
from .heads import encode_cloud, point_features
from .geometry import HANDLE, MOVING, PointCloud, as_rotation, gram_schmidt_rotation, random_rotation
from .simenv import (GripperAction, ObjectSpec, ObjectState, PrimitiveType, execute_primitive,
                     initial_state, primitive, render_cloud)

FORMAT_VERSION = 1
RECORD_COLUMNS = (["object_id", "cloud_file", "point_index"]
                  + [f"r{i}{j}" for i in range(3) for j in range(3)] + ["result"])
DEFAULT_BETA = 0.5
MAX_RETRIES = 10


@dataclass
class Scene:
    object_id: str
    state: ObjectState
    cloud: PointCloud


@dataclass
class InteractionRecord:
    object_id: str
    cloud_id: str
    point_index: int
    orientation: np.ndarray
    result: int

    def __post_init__(self):
        self.orientation = np.asarray(self.orientation, dtype=np.float64)
        if self.result not in (0, 1):
            raise ValueError("result must be 0 or 1")

    def __eq__(self, other):
        if not isinstance(other, InteractionRecord):
            return NotImplemented
        return (self.object_id == other.object_id and self.cloud_id == other.cloud_id
                and self.point_index == other.point_index and self.result == other.result
                and np.array_equal(self.orientation, other.orientation))


@dataclass
class Dataset:
    primitive: PrimitiveType
    records: list[InteractionRecord] = field(default_factory=list)
    scenes: dict[str, Scene] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def manifest(self) -> dict:
        pos = sum(r.result for r in self.records)
        return {
            "format_version": FORMAT_VERSION,
            "primitive": primitive(self.primitive).value,
            "n_records": len(self.records),
            "n_positive": pos,
            "n_negative": len(self.records) - pos,
            "n_clouds": len(self.scenes),
            **self.meta,
        }

    def positive_rate(self) -> float:
        return sum(r.result for r in self.records) / len(self.records) if self.records else 0.0

    def extend(self, other: "Dataset") -> None:
        self.scenes.update(other.scenes)
        self.records.extend(other.records)

    def subset(self, records: list[InteractionRecord]) -> "Dataset":
        ids = {r.cloud_id for r in records}
        return Dataset(self.primitive, list(records), {k: v for k, v in self.scenes.items() if k in ids},
                       dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        if self.manifest != other.manifest or self.records != other.records:
            return False
        if self.scenes.keys() != other.scenes.keys():
            return False
        return all(a.object_id == b.object_id and a.state == b.state and a.cloud == b.cloud
                   for a, b in ((self.scenes[k], other.scenes[k]) for k in self.scenes))


def make_scenes(specs: list[ObjectSpec], n_points: int, rng: np.random.Generator,
                prefix: str = "obj") -> list[Scene]:
    """One state and one rendered cloud per spec."""
    scenes = []
    for i, spec in enumerate(specs):
        state = initial_state(spec, rng)
        scenes.append(Scene(f"{prefix}{i:05d}", state, render_cloud(state, n_points, rng)))
    return scenes


def sample_point(cloud: PointCloud, beta: float, rng: np.random.Generator) -> int:
    """Uniform surface point, or with probability ``beta`` a movable one.

    The movable draw prefers handle points and falls back to moving-part
    points when the cloud holds no handle sample.
    """
    if beta > 0 and cloud.part_labels is not None and rng.uniform() < beta:
        for label in (HANDLE, MOVING):
            idx = np.flatnonzero(cloud.part_labels == label)
            if len(idx):
                return int(idx[rng.integers(len(idx))])
    return int(rng.integers(cloud.n))


def as_scenes(items, rng: np.random.Generator, n_points: int = 256) -> list[Scene]:
    items = list(items)
    if items and isinstance(items[0], ObjectSpec):
        return make_scenes(items, n_points, rng)
    return items


def _cloud_id(scene: Scene) -> str:
    return f"{scene.object_id}_q{scene.state.joint_value:.6f}"


def _simulate_chunk(jobs):
    return [execute_primitive(state, action)[0] for state, action in jobs]


def simulate(jobs: list[tuple[ObjectState, GripperAction]], workers: int = 1) -> list[int]:
    """Outcome bits for ``(state, action)`` pairs, in input order.

    With ``workers > 1`` contiguous chunks run in worker processes; the
    simulator is a pure function, so results never depend on the split.
    """
    if workers <= 1 or len(jobs) < 2:
        return _simulate_chunk(jobs)
    size = -(-len(jobs) // workers)
    chunks = [jobs[i:i + size] for i in range(0, len(jobs), size)]
    with ProcessPoolExecutor(workers) as ex:
        return [r for part in ex.map(_simulate_chunk, chunks) for r in part]


def _finish(ds: Dataset, plan: list[tuple[Scene, int, np.ndarray]], workers: int) -> Dataset:
    results = simulate([(sc.state, GripperAction(ds.primitive, sc.cloud.points[i], r)) for sc, i, r in plan], workers)
    for (scene, idx, rot), result in zip(plan, results):
        cid = _cloud_id(scene)
        ds.scenes[cid] = scene
        ds.records.append(InteractionRecord(scene.object_id, cid, idx, rot, result))
    return ds


def collect_offline(scenes: list[Scene] | list[ObjectSpec], n: int, prim, rng: np.random.Generator,
                    beta: float = DEFAULT_BETA, workers: int = 1) -> Dataset:
    """Random interactions: uniform scene, biased surface point, Haar orientation.

    All randomness is drawn before simulation, so ``workers`` never changes
    the result.
    """
    prim = primitive(prim)
    scenes = as_scenes(scenes, rng)
    plan = []
    for _ in range(n):
        scene = scenes[rng.integers(len(scenes))]
        idx = sample_point(scene.cloud, beta, rng)
        plan.append((scene, idx, random_rotation(rng)))
    return _finish(Dataset(prim, meta={"beta": beta, "source": "offline"}), plan, workers)


@torch.no_grad()
def collect_online(model, scenes: list[Scene], n: int, prim, rng: np.random.Generator,
                   feature_cache: dict | None = None, workers: int = 1) -> Dataset:
    """Adaptive interactions driven by the current scoring head.

    Each episode proposes an orientation at a random point, scores that
    orientation at every point, and interacts at the best-scored point.
    """
    prim = primitive(prim)
    scenes = as_scenes(scenes, rng, model.cfg.n_points)
    model.eval()
    plan = []
    for _ in range(n):
        scene = scenes[rng.integers(len(scenes))]
        cid = _cloud_id(scene)
        if feature_cache is not None and cid in feature_cache:
            feats = feature_cache[cid]
        else:
            feats = encode_cloud(model, scene.cloud)
            if feature_cache is not None:
                feature_cache[cid] = feats
        for _attempt in range(MAX_RETRIES):
            src = int(rng.integers(scene.cloud.n))
            z = torch.as_tensor(rng.standard_normal(model.cfg.d_z), dtype=model.cfg.dtype)
            uv = model.proposal_vectors(point_features(feats, src), z).double().numpy()
            try:
                rot = gram_schmidt_rotation(uv[0], uv[1])
                break
            except DegenerateFrameError:
                continue
        else:
            raise NoValidProposalError(f"{MAX_RETRIES} degenerate proposals in a row")
        r = torch.as_tensor(rot, dtype=model.cfg.dtype).expand(scene.cloud.n, 3, 3)
        logits = model.score_logits(feats, r).double().numpy()
        plan.append((scene, int(np.argmax(logits)), rot))
    return _finish(Dataset(prim, meta={"source": "online"}), plan, workers)


# ---------------------------------------------------------------- persistence

def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    (root / "clouds").mkdir(parents=True, exist_ok=True)
    objects = {}
    cloud_files = {}
    for cid in sorted(ds.scenes):
        scene = ds.scenes[cid]
        objects[scene.object_id] = scene.state.spec.to_dict()
        fname = f"clouds/{cid}.npz"
        cloud_files[cid] = fname
        labels = scene.cloud.part_labels if scene.cloud.part_labels is not None else np.zeros(0, np.int64)
        with open(root / fname, "wb") as fh:
            np.savez(fh, points=scene.cloud.points, part_labels=labels,
                     object_id=np.array(scene.object_id), joint_value=np.array(scene.state.joint_value))
    (root / "objects.json").write_text(json.dumps(dict(sorted(objects.items())), indent=1))
    with open(root / "records.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in ds.records:
            w.writerow([r.object_id, cloud_files[r.cloud_id], r.point_index,
                        *(_fmt(v) for v in r.orientation.reshape(-1)), r.result])
    (root / "manifest.json").write_text(json.dumps(ds.manifest, indent=1, sort_keys=True))


def load_dataset(path, verify_fraction: float = 0.01, seed: int = 0) -> Dataset:
    """Load and validate a dataset directory.

    Raises :class:`DatasetLoadError` naming the offending field.  A sampled
    ``verify_fraction`` of records is re-simulated to confirm stored results.
    """
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise DatasetLoadError(f"{root}: missing manifest.json")
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise DatasetLoadError(f"{root}/manifest.json: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetLoadError(f"format_version: expected {FORMAT_VERSION}, got {manifest.get('format_version')}")
    try:
        prim = primitive(manifest["primitive"])
        objects = {k: ObjectSpec.from_dict(v) for k, v in json.loads((root / "objects.json").read_text()).items()}
    except (KeyError, ValueError, OSError) as exc:
        raise DatasetLoadError(f"objects/primitive: {exc}") from exc

    scenes: dict[str, Scene] = {}
    records = []
    try:
        fh = open(root / "records.csv", newline="")
    except OSError as exc:
        raise DatasetLoadError(f"records.csv: {exc}") from exc
    with fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header != RECORD_COLUMNS:
            raise DatasetLoadError(f"records.csv header: expected {RECORD_COLUMNS}, got {header}")
        for line, row in enumerate(rows, start=2):
            if len(row) != len(RECORD_COLUMNS):
                raise DatasetLoadError(f"records.csv line {line}: expected {len(RECORD_COLUMNS)} fields, got {len(row)}")
            oid, cfile = row[0], row[1]
            cid = Path(cfile).stem
            if cid not in scenes:
                scenes[cid] = _load_scene(root, cfile, objects)
            try:
                idx = int(row[2])
                rot = as_rotation(np.array([float(v) for v in row[3:12]]).reshape(3, 3))
                result = int(row[12])
                if result not in (0, 1):
                    raise ValueError(f"result {result} not binary")
            except ValueError as exc:
                raise DatasetLoadError(f"records.csv line {line}: {exc}") from exc
            if not 0 <= idx < scenes[cid].cloud.n:
                raise DatasetLoadError(f"records.csv line {line}: point_index {idx} out of range")
            if scenes[cid].object_id != oid:
                raise DatasetLoadError(f"records.csv line {line}: object_id does not match cloud file")
            records.append(InteractionRecord(oid, cid, idx, rot, result))

    meta = {k: v for k, v in manifest.items()
            if k not in ("format_version", "primitive", "n_records", "n_positive", "n_negative", "n_clouds")}
    ds = Dataset(prim, records, scenes, meta)
    for key in ("n_records", "n_positive", "n_negative", "n_clouds"):
        if ds.manifest[key] != manifest.get(key):
            raise DatasetLoadError(f"manifest {key}: file says {manifest.get(key)}, records give {ds.manifest[key]}")
    if records and verify_fraction > 0:
        rng = np.random.default_rng(seed)
        m = max(1, int(round(verify_fraction * len(records))))
        for i in rng.choice(len(records), size=min(m, len(records)), replace=False):
            r = records[i]
            scene = scenes[r.cloud_id]
            got, _ = execute_primitive(scene.state, GripperAction(prim, scene.cloud.points[r.point_index], r.orientation))
            if got != r.result:
                raise DatasetLoadError(f"record {i}: stored result {r.result} but simulator gives {got}")
    return ds


def _load_scene(root: Path, cfile: str, objects: dict) -> Scene:
    try:
        with np.load(root / cfile, allow_pickle=False) as z:
            points, labels = z["points"], z["part_labels"]
            oid, q = str(z["object_id"]), float(z["joint_value"])
    except Exception as exc:  # missing or truncated npz
        raise DatasetLoadError(f"{cfile}: {exc}") from exc
    if oid not in objects:
        raise DatasetLoadError(f"{cfile}: unknown object_id {oid}")
    state = ObjectState(objects[oid], q)
    return Scene(oid, state, PointCloud(points, labels if len(labels) else None))
