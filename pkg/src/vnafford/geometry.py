"""Rotation and rigid-transform algebra plus point-cloud primitives.

Rotations are plain ``(3, 3)`` float64 arrays; :func:`as_rotation` validates
one.  Everything here is a pure function of its inputs and an explicitly
passed ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateFrameError, InsufficientPointsError, InvalidRotationError

ROTATION_TOL = 1e-5
GS_EPS = 1e-6

BASE, MOVING, HANDLE = 0, 1, 2


def as_rotation(m, tol: float = ROTATION_TOL) -> np.ndarray:
    """Return ``m`` as a float64 rotation matrix, raising if it is not one."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise InvalidRotationError(f"expected finite 3x3 matrix, got shape {m.shape}")
    if np.max(np.abs(m.T @ m - np.eye(3))) > tol:
        raise InvalidRotationError("matrix is not orthonormal")
    if abs(np.linalg.det(m) - 1.0) > tol:
        raise InvalidRotationError("matrix has determinant != 1")
    return m


def is_rotation(m, tol: float = ROTATION_TOL) -> bool:
    try:
        as_rotation(m, tol)
    except InvalidRotationError:
        return False
    return True


def geodesic_distance(a, b) -> float:
    """Angle in ``[0, pi]`` of the relative rotation ``a^T b``.

    Uses ``atan2(sin, cos)`` with the sine taken from the skew part, which
    stays accurate near 0 where ``arccos`` of the trace loses half the digits.
    """
    m = as_rotation(a).T @ as_rotation(b)
    cos = (np.trace(m) - 1.0) / 2.0
    sin = np.linalg.norm([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]]) / 2.0
    return float(np.arctan2(sin, cos))


def quaternion_to_matrix(q) -> np.ndarray:
    """Unit quaternion ``(w, x, y, z)`` to rotation matrix."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalized Gaussian quaternion."""
    q = rng.standard_normal(4)
    while np.linalg.norm(q) < 1e-12:
        q = rng.standard_normal(4)
    return quaternion_to_matrix(q)


def z_rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def random_z_rotation(rng: np.random.Generator) -> np.ndarray:
    return z_rotation(rng.uniform(0.0, 2.0 * np.pi))


def axis_angle_rotation(axis, angle: float) -> np.ndarray:
    """Rodrigues formula; ``axis`` need not be normalized."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * kx + (1 - np.cos(angle)) * kx @ kx


def gram_schmidt_rotation(u, v, eps: float = GS_EPS) -> np.ndarray:
    """Rotation with columns ``(u_hat, v_perp_hat, u_hat x v_perp_hat)``.

    Raises :class:`DegenerateFrameError` when ``u`` is too short or ``v`` is
    (nearly) parallel to it.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    if not nu > eps:
        raise DegenerateFrameError(f"|u| = {nu:.3g} <= {eps}")
    e1 = u / nu
    w = v - (v @ e1) * e1
    nw = np.linalg.norm(w)
    if not nw > eps:
        raise DegenerateFrameError(f"|v_perp| = {nw:.3g} <= {eps}")
    e2 = w / nw
    return np.stack([e1, e2, np.cross(e1, e2)], axis=1)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", as_rotation(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``: x -> self(other(x))."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def apply_vectors(self, vectors: np.ndarray) -> np.ndarray:
        return np.asarray(vectors, dtype=np.float64) @ self.rotation.T

    def as_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation_m": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RigidTransform":
        return cls(np.array(d["rotation"], dtype=np.float64), np.array(d["translation_m"], dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, RigidTransform):
            return NotImplemented
        return (np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))


def random_rigid_transform(rng: np.random.Generator, max_translation: float = 1.0) -> RigidTransform:
    return RigidTransform(random_rotation(rng), rng.uniform(-max_translation, max_translation, 3))


@dataclass
class PointCloud:
    points: np.ndarray
    part_labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point coordinates must be finite")
        if self.part_labels is not None:
            self.part_labels = np.asarray(self.part_labels, dtype=np.int64)
            if self.part_labels.shape != (len(self.points),):
                raise ValueError("part_labels length must equal point count")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def n(self) -> int:
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, PointCloud):
            return NotImplemented
        if (self.part_labels is None) != (other.part_labels is None):
            return False
        return (np.array_equal(self.points, other.points)
                and (self.part_labels is None or np.array_equal(self.part_labels, other.part_labels)))


def apply_transform(t: RigidTransform, c: PointCloud) -> PointCloud:
    """Map every point through ``t``; labels and point order are preserved."""
    labels = None if c.part_labels is None else c.part_labels.copy()
    return PointCloud(t.apply_points(c.points), labels)


def knn_graph(c: PointCloud | np.ndarray, k: int) -> np.ndarray:
    """Indices ``(N, k)`` of each point's k nearest neighbors, self excluded.

    Distances are computed from explicit coordinate differences in float64 and
    sorted stably, so equal distances resolve to the lower index.
    """
    pts = c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=np.float64)
    n = len(pts)
    if n <= k:
        raise InsufficientPointsError(f"need more than k={k} points, got {n}")
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    d2[np.arange(n), np.arange(n)] = np.inf
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k]
