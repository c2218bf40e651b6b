"""Deterministic rule-based articulated-object environment.

Objects are cabinets built from a box body, one moving slab (a drawer front on
a prismatic joint or a door on a revolute hinge) and a cylindrical handle
mounted on the slab.  Geometry lives in the object's local frame: body
centered at the origin, front face at ``+x``, up along ``+z``.  ``base_pose``
places the object in the world, and every rule is evaluated after mapping the
action back into the local frame, so results depend only on relative
geometry.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import (BASE, HANDLE, MOVING, PointCloud, RigidTransform, as_rotation,
                       axis_angle_rotation, random_rotation, random_z_rotation)

CONTACT_EPS = 0.005
GRIPPER_APERTURE = 0.08
STROKE = 0.1
SUCCESS_FRACTION = 0.01
PUSH_FACE_COS = np.cos(np.deg2rad(60.0))
CLOSING_PERP_SIN = np.sin(np.deg2rad(30.0))
MOTION_COS = np.cos(np.deg2rad(45.0))
PANEL_THICKNESS = 0.02
FORMAT_VERSION = 1


class PrimitiveType(str, enum.Enum):
    PUSH = "push"
    PUSH_UP = "push_up"
    PUSH_LEFT = "push_left"
    PULL = "pull"
    PULL_UP = "pull_up"
    PULL_LEFT = "pull_left"

    @property
    def is_pull(self) -> bool:
        return self.value.startswith("pull")


def primitive(p) -> PrimitiveType:
    return p if isinstance(p, PrimitiveType) else PrimitiveType(str(p))


@dataclass(frozen=True)
class Handle:
    center_offset: np.ndarray  # from the closed moving-part center, local frame
    axis: np.ndarray
    length: float
    radius: float


@dataclass(frozen=True)
class ObjectSpec:
    family: str
    body_size: np.ndarray
    joint_kind: str
    joint_axis: np.ndarray
    joint_origin: np.ndarray
    joint_range: tuple[float, float]
    moving_part_size: np.ndarray  # (thickness, width, height)
    moving_part_center: np.ndarray  # closed state, local frame
    handle: Handle
    base_pose: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        lo, hi = self.joint_range
        if not lo < hi:
            raise ValueError("joint_range must satisfy lo < hi")
        if not self.handle.radius < GRIPPER_APERTURE / 2:
            raise ValueError("handle too thick for the gripper")
        for name in ("body_size", "moving_part_size"):
            if np.any(np.asarray(getattr(self, name)) <= 0):
                raise ValueError(f"{name} must be positive")
        if self.handle.length <= 0 or self.handle.radius <= 0:
            raise ValueError("handle sizes must be positive")

    def with_pose(self, pose: RigidTransform) -> "ObjectSpec":
        return replace(self, base_pose=pose)

    def to_dict(self) -> dict:
        h = self.handle
        return {
            "family": self.family,
            "body_size_m": list(map(float, self.body_size)),
            "joint_kind": self.joint_kind,
            "joint_axis": list(map(float, self.joint_axis)),
            "joint_origin_m": list(map(float, self.joint_origin)),
            "joint_range": [float(self.joint_range[0]), float(self.joint_range[1])],
            "joint_range_unit": "m" if self.joint_kind == "prismatic" else "rad",
            "moving_part_size_m": list(map(float, self.moving_part_size)),
            "moving_part_center_m": list(map(float, self.moving_part_center)),
            "handle": {
                "center_offset_m": list(map(float, h.center_offset)),
                "axis": list(map(float, h.axis)),
                "length_m": float(h.length),
                "radius_m": float(h.radius),
            },
            "base_pose": self.base_pose.as_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ObjectSpec":
        h = d["handle"]
        arr = lambda v: np.array(v, dtype=np.float64)  # noqa: E731
        return cls(
            family=d["family"],
            body_size=arr(d["body_size_m"]),
            joint_kind=d["joint_kind"],
            joint_axis=arr(d["joint_axis"]),
            joint_origin=arr(d["joint_origin_m"]),
            joint_range=(float(d["joint_range"][0]), float(d["joint_range"][1])),
            moving_part_size=arr(d["moving_part_size_m"]),
            moving_part_center=arr(d["moving_part_center_m"]),
            handle=Handle(arr(h["center_offset_m"]), arr(h["axis"]), float(h["length_m"]), float(h["radius_m"])),
            base_pose=RigidTransform.from_dict(d["base_pose"]),
        )

    def __eq__(self, other):
        if not isinstance(other, ObjectSpec):
            return NotImplemented
        return json.dumps(self.to_dict()) == json.dumps(other.to_dict())


def dump_specs(specs: list[ObjectSpec], path) -> None:
    Path(path).write_text(json.dumps({"format_version": FORMAT_VERSION,
                                      "specs": [s.to_dict() for s in specs]}, indent=1))


def load_specs(path) -> list[ObjectSpec]:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict) and "specs" in doc:
        return [ObjectSpec.from_dict(d) for d in doc["specs"]]
    return [ObjectSpec.from_dict(doc)]


@dataclass(frozen=True)
class ObjectState:
    spec: ObjectSpec
    joint_value: float

    def __post_init__(self):
        lo, hi = self.spec.joint_range
        object.__setattr__(self, "joint_value", float(min(max(self.joint_value, lo), hi)))

    @property
    def fraction(self) -> float:
        lo, hi = self.spec.joint_range
        return (self.joint_value - lo) / (hi - lo)


@dataclass(frozen=True)
class GripperAction:
    primitive: PrimitiveType
    contact_point: np.ndarray
    orientation: np.ndarray  # column 0: finger-closing axis, column 2: approach

    def __post_init__(self):
        object.__setattr__(self, "primitive", primitive(self.primitive))
        object.__setattr__(self, "contact_point", np.asarray(self.contact_point, dtype=np.float64))
        object.__setattr__(self, "orientation", as_rotation(self.orientation))


# ---------------------------------------------------------------- sampling

def pose_for_setting(setting: str, rng: np.random.Generator) -> RigidTransform:
    """Base pose for an experiment setting: ``identity``, ``z`` or ``so3``."""
    setting = setting.lower()
    if setting == "identity":
        return RigidTransform()
    if setting == "z":
        return RigidTransform(random_z_rotation(rng))
    if setting in ("so3", "so(3)"):
        return RigidTransform(random_rotation(rng))
    raise ValueError(f"unknown setting {setting!r}")


def sample_object(family: str, rng: np.random.Generator, setting: str = "identity") -> ObjectSpec:
    """Procedural cabinet with a drawer (prismatic) or a door (revolute)."""
    sx, sy, sz = rng.uniform(0.3, 1.0, 3)
    t = PANEL_THICKNESS
    length = rng.uniform(0.05, 0.2)
    radius = rng.uniform(0.005, 0.02)
    standoff = rng.uniform(0.01, 0.03)
    if family == "drawer":
        w = rng.uniform(0.5, 0.9) * sy
        h = rng.uniform(0.2, 0.5) * sz
        yc = rng.uniform(-1, 1) * (sy - w) / 2
        zc = rng.uniform(-1, 1) * (sz - h) / 2
        center = np.array([sx / 2 + t / 2, yc, zc])
        length = min(length, 0.9 * w)
        handle = Handle(np.array([t / 2 + standoff + radius, 0.0, rng.uniform(-0.25, 0.25) * h]),
                        np.array([0.0, 1.0, 0.0]), length, radius)
        spec = ObjectSpec("drawer", np.array([sx, sy, sz]), "prismatic", np.array([1.0, 0.0, 0.0]),
                          center.copy(), (0.0, float(rng.uniform(0.5, 0.9) * sx)),
                          np.array([t, w, h]), center, handle)
    elif family == "door":
        w = rng.uniform(0.6, 1.0) * sy
        h = rng.uniform(0.6, 0.95) * sz
        yc = rng.uniform(-1, 1) * (sy - w) / 2
        zc = rng.uniform(-1, 1) * (sz - h) / 2
        center = np.array([sx / 2 + t / 2, yc, zc])
        length = min(length, 0.9 * h)
        edge = rng.uniform(0.05, 0.15) * w
        handle = Handle(np.array([t / 2 + standoff + radius, w / 2 - edge, rng.uniform(-0.2, 0.2) * h]),
                        np.array([0.0, 0.0, 1.0]), length, radius)
        # hinge on the -y edge; axis -z makes positive angles swing the door outwards
        spec = ObjectSpec("door", np.array([sx, sy, sz]), "revolute", np.array([0.0, 0.0, -1.0]),
                          np.array([sx / 2, yc - w / 2, zc]),
                          (0.0, float(rng.uniform(np.pi / 3, np.pi / 2))),
                          np.array([t, w, h]), center, handle)
    else:
        raise ValueError(f"unknown family {family!r}")
    return spec.with_pose(pose_for_setting(setting, rng))


def generate_specs(family: str, n: int, seed: int, setting: str = "identity") -> list[ObjectSpec]:
    rng = np.random.default_rng(seed)
    return [sample_object(family, rng, setting) for _ in range(n)]


def initial_state(spec: ObjectSpec, rng: np.random.Generator, max_fraction: float = 0.5) -> ObjectState:
    lo, hi = spec.joint_range
    return ObjectState(spec, lo + rng.uniform(0.0, max_fraction) * (hi - lo))


# ---------------------------------------------------------------- surfaces

@dataclass(frozen=True)
class Rect:
    """Planar rectangle ``center + a*u + b*v`` with ``a, b`` in [-1, 1]."""
    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    label: int
    face_of_moving: bool = False

    @property
    def normal(self) -> np.ndarray:
        n = np.cross(self.u, self.v)
        return n / np.linalg.norm(n)

    @property
    def area(self) -> float:
        return 4.0 * np.linalg.norm(np.cross(self.u, self.v))

    def sample(self, rng, n):
        ab = rng.uniform(-1.0, 1.0, (n, 2))
        return self.center + ab[:, :1] * self.u + ab[:, 1:] * self.v

    def distance(self, p):
        d = p - self.center
        lu, lv = np.linalg.norm(self.u), np.linalg.norm(self.v)
        eu, ev = self.u / lu, self.v / lv
        a = np.clip(d @ eu, -lu, lu)
        b = np.clip(d @ ev, -lv, lv)
        return np.linalg.norm(d - a[..., None] * eu - b[..., None] * ev, axis=-1)


@dataclass(frozen=True)
class CylinderSide:
    center: np.ndarray
    axis: np.ndarray
    length: float
    radius: float
    label: int

    @property
    def area(self) -> float:
        return 2 * np.pi * self.radius * self.length

    def _frame(self):
        a = self.axis / np.linalg.norm(self.axis)
        helper = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
        e1 = np.cross(a, helper)
        e1 /= np.linalg.norm(e1)
        return a, e1, np.cross(a, e1)

    def sample(self, rng, n):
        a, e1, e2 = self._frame()
        th = rng.uniform(0, 2 * np.pi, (n, 1))
        s = rng.uniform(-0.5, 0.5, (n, 1)) * self.length
        return self.center + s * a + self.radius * (np.cos(th) * e1 + np.sin(th) * e2)

    def distance(self, p):
        a = self.axis / np.linalg.norm(self.axis)
        d = p - self.center
        s = d @ a
        radial = d - s[..., None] * a
        rho = np.linalg.norm(radial, axis=-1)
        over = np.maximum(np.abs(s) - self.length / 2, 0.0)
        return np.hypot(rho - self.radius, over)


@dataclass(frozen=True)
class Disk:
    center: np.ndarray
    normal: np.ndarray
    radius: float
    label: int

    @property
    def area(self) -> float:
        return np.pi * self.radius ** 2

    def sample(self, rng, n):
        a = self.normal / np.linalg.norm(self.normal)
        helper = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
        e1 = np.cross(a, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(a, e1)
        r = self.radius * np.sqrt(rng.uniform(0, 1, (n, 1)))
        th = rng.uniform(0, 2 * np.pi, (n, 1))
        return self.center + r * (np.cos(th) * e1 + np.sin(th) * e2)

    def distance(self, p):
        a = self.normal / np.linalg.norm(self.normal)
        d = p - self.center
        h = d @ a
        rho = np.linalg.norm(d - h[..., None] * a, axis=-1)
        return np.hypot(h, np.maximum(rho - self.radius, 0.0))


def box_faces(center, axes, half, label, moving=False, skip=()):
    """Six outward-facing rectangles of an oriented box; ``skip`` holds (axis, sign)."""
    faces = []
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        for s in (1.0, -1.0):
            if (i, s) in skip:
                continue
            u = axes[:, j] * half[j]
            v = axes[:, k] * half[k] * s  # orientation so that u x v points along s * axes[:, i]
            faces.append(Rect(center + s * half[i] * axes[:, i], u, v, label, moving))
    return faces


def moving_transform(state: ObjectState) -> RigidTransform:
    """Local-frame pose of the moving part relative to its closed placement."""
    spec, q = state.spec, state.joint_value
    if spec.joint_kind == "prismatic":
        return RigidTransform(np.eye(3), q * spec.joint_axis)
    r = axis_angle_rotation(spec.joint_axis, q)
    return RigidTransform(r, spec.joint_origin - r @ spec.joint_origin)


def local_surfaces(state: ObjectState) -> list:
    spec = state.spec
    surfaces = box_faces(np.zeros(3), np.eye(3), spec.body_size / 2, BASE)
    mt = moving_transform(state)
    rot = mt.rotation
    lo = spec.joint_range[0]
    # the slab's inner face is exposed only for an opened door
    skip = () if (spec.joint_kind == "revolute" and state.joint_value > lo) else ((0, -1.0),)
    surfaces += box_faces(mt.apply_points(spec.moving_part_center), rot, spec.moving_part_size / 2,
                          MOVING, moving=True, skip=skip)
    h = spec.handle
    hc = mt.apply_points(spec.moving_part_center + h.center_offset)
    ha = rot @ h.axis
    surfaces.append(CylinderSide(hc, ha, h.length, h.radius, HANDLE))
    surfaces.append(Disk(hc + ha * h.length / 2, ha, h.radius, HANDLE))
    surfaces.append(Disk(hc - ha * h.length / 2, -ha, h.radius, HANDLE))
    return surfaces


def _largest_remainder(weights: np.ndarray, n: int) -> np.ndarray:
    raw = weights / weights.sum() * n
    counts = np.floor(raw).astype(int)
    rest = n - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


def part_areas(state: ObjectState) -> dict[int, float]:
    areas = {BASE: 0.0, MOVING: 0.0, HANDLE: 0.0}
    for s in local_surfaces(state):
        areas[s.label] += s.area
    return areas


def render_cloud(state: ObjectState, n_points: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted surface sampling of body, moving part and handle.

    Point counts are allotted to surfaces by largest remainder on their area
    share, then placed uniformly on each surface; the result is in world frame.
    """
    if n_points < 64:
        raise ValueError("render_cloud needs n_points >= 64")
    surfaces = local_surfaces(state)
    counts = _largest_remainder(np.array([s.area for s in surfaces]), n_points)
    pts, labels = [], []
    for s, c in zip(surfaces, counts):
        if c:
            pts.append(s.sample(rng, c))
            labels.append(np.full(c, s.label))
    local = np.concatenate(pts)
    labels = np.concatenate(labels)
    perm = rng.permutation(n_points)
    return PointCloud(state.spec.base_pose.apply_points(local[perm]), labels[perm])


def surface_distance(state: ObjectState, points: np.ndarray, world: bool = True) -> np.ndarray:
    """Distance from each point to the union of the object's surfaces."""
    p = np.asarray(points, dtype=np.float64)
    if world:
        p = state.spec.base_pose.inverse().apply_points(p)
    return np.min([s.distance(p) for s in local_surfaces(state)], axis=0)


# ---------------------------------------------------------------- rules

def _free_direction(state: ObjectState, p: np.ndarray):
    """Unit opening direction of the moving part at local point ``p`` and its lever arm."""
    spec = state.spec
    if spec.joint_kind == "prismatic":
        return spec.joint_axis / np.linalg.norm(spec.joint_axis), 1.0
    w = spec.joint_axis / np.linalg.norm(spec.joint_axis)
    t = np.cross(w, p - spec.joint_origin)
    arm = np.linalg.norm(t)
    if arm < 1e-9:
        return None, 0.0
    return t / arm, arm


def execute_primitive(state: ObjectState, action: GripperAction) -> tuple[int, ObjectState]:
    """Apply one primitive; returns ``(result, next_state)``.

    Failures leave the state unchanged.
    """
    inv = state.spec.base_pose.inverse()
    surfaces = local_surfaces(state)
    p = inv.apply_points(action.contact_point)
    dists = [float(s.distance(p)) for s in surfaces]
    return _outcome(state, surfaces, dists, action.primitive, p, inv.rotation @ action.orientation)


def _outcome(state, surfaces, dists, prim, p, rot):
    """Rule evaluation in the object frame given per-surface contact distances."""
    spec = state.spec
    closing, approach = rot[:, 0], rot[:, 2]
    if min(dists) > CONTACT_EPS:
        return 0, state

    if prim.is_pull:
        on_handle = any(d <= CONTACT_EPS for s, d in zip(surfaces, dists) if s.label == HANDLE)
        if not on_handle or 2 * spec.handle.radius > GRIPPER_APERTURE:
            return 0, state
        handle_axis = moving_transform(state).rotation @ spec.handle.axis
        if abs(closing @ handle_axis) > CLOSING_PERP_SIN:
            return 0, state
        face_normal = None
    else:
        faces = [(s, d) for s, d in zip(surfaces, dists)
                 if isinstance(s, Rect) and s.face_of_moving and d <= CONTACT_EPS
                 and s.normal @ -approach > PUSH_FACE_COS]
        if not faces:
            return 0, state
        face_normal = min(faces, key=lambda sd: sd[1])[0].normal

    if prim in (PrimitiveType.PUSH, PrimitiveType.PULL):
        motion = approach if prim is PrimitiveType.PUSH else -approach
    elif prim in (PrimitiveType.PUSH_UP, PrimitiveType.PULL_UP):
        motion = np.array([0.0, 0.0, 1.0])
    else:
        motion = np.array([0.0, 1.0, 0.0])

    free, arm = _free_direction(state, p)
    if free is None:
        return 0, state
    s = float(motion @ free)
    if prim.is_pull:
        if s < MOTION_COS:
            return 0, state
    elif abs(s) < MOTION_COS or motion @ face_normal >= 0:
        return 0, state

    step = s * STROKE if spec.joint_kind == "prismatic" else s * STROKE / arm
    nxt = ObjectState(spec, state.joint_value + step)
    lo, hi = spec.joint_range
    if abs(nxt.joint_value - state.joint_value) > SUCCESS_FRACTION * (hi - lo):
        return 1, nxt
    return 0, state


def ground_truth_success_grid(state: ObjectState, prim, points: np.ndarray,
                              orientations: np.ndarray) -> np.ndarray:
    """``(M, L)`` boolean grid of :func:`execute_primitive` outcomes.

    Surfaces and contact distances are computed once per point.
    """
    prim = primitive(prim)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    orientations = np.asarray(orientations, dtype=np.float64).reshape(-1, 3, 3)
    inv = state.spec.base_pose.inverse()
    surfaces = local_surfaces(state)
    # per-item transforms round exactly as in execute_primitive
    local_rots = [inv.rotation @ r for r in orientations]
    grid = np.zeros((len(points), len(orientations)), dtype=bool)
    for i, p in enumerate(inv.apply_points(q) for q in points):
        dists = [float(s.distance(p)) for s in surfaces]
        if min(dists) > CONTACT_EPS:
            continue
        for j, r in enumerate(local_rots):
            grid[i, j] = _outcome(state, surfaces, dists, prim, p, r)[0] == 1
    return grid
