"""SE(3) rigid transforms, point clouds, random sampling, and pose error metrics.

Rotations are stored as 3x3 matrices throughout; quaternions appear only
inside random sampling and test oracles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CountMismatch

# Constructor accepts this much orthogonality/determinant drift; compose()
# repairs anything above _REPAIR_TOL before it accumulates.
_VALID_TOL = 1e-8
_REPAIR_TOL = 1e-9


def _as_rng(seed: int | np.random.Generator) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True)
class RigidTransform:
    """An SE(3) element: x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(tr))):
            raise ValueError("non-finite transform entries")
        drift = np.max(np.abs(rot.T @ rot - np.eye(3)))
        if drift > _VALID_TOL:
            raise ValueError(f"rotation not orthogonal: max |R^T R - I| = {drift:.3e}")
        if abs(np.linalg.det(rot) - 1.0) > _VALID_TOL:
            raise ValueError("rotation must be proper (det +1); reflections rejected")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class PointCloud:
    """An N x 3 point set in scene length units, N >= 1."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise ValueError(f"points must be N x 3 with N >= 1, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite point coordinates")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)


def _polar_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation to m in Frobenius norm (polar factor via SVD)."""
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        r = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return r


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Composition a after b: compose(a, b) maps x to a(b(x))."""
    rot = a.rotation @ b.rotation
    tr = a.rotation @ b.translation + a.translation
    if np.max(np.abs(rot.T @ rot - np.eye(3))) > _REPAIR_TOL:
        rot = _polar_rotation(rot)
    return RigidTransform(rot, tr)


def inverse(t: RigidTransform) -> RigidTransform:
    rt = t.rotation.T
    return RigidTransform(rt, -rt @ t.translation)


def apply(t: RigidTransform, p: PointCloud | np.ndarray) -> PointCloud | np.ndarray:
    """Apply t to every point; accepts a PointCloud or a raw (N, 3) array."""
    if isinstance(p, PointCloud):
        return PointCloud(p.points @ t.rotation.T + t.translation)
    pts = np.asarray(p, dtype=np.float64)
    return pts @ t.rotation.T + t.translation


def quaternion_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def random_rotation(seed: int | np.random.Generator) -> np.ndarray:
    """Rotation matrix drawn uniformly from SO(3).

    Four standard normals normalized to a unit quaternion give the uniform
    (Haar) distribution on the rotation group.
    """
    rng = _as_rng(seed)
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    return quaternion_to_matrix(q)


def random_transform(
    seed: int | np.random.Generator, max_translation: float
) -> RigidTransform:
    """Uniform random rotation plus translation uniform in a centered cube.

    Args:
        seed: integer seed or an existing Generator to draw from.
        max_translation: half-width of the translation cube, >= 0.

    Returns:
        A RigidTransform, deterministic given an integer seed.
    """
    if max_translation < 0:
        raise ValueError("max_translation must be >= 0")
    rng = _as_rng(seed)
    rot = random_rotation(rng)
    tr = rng.uniform(-max_translation, max_translation, 3)
    return RigidTransform(rot, tr)


def rotation_about_z(angle_deg: float) -> np.ndarray:
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_about_x(angle_deg: float) -> np.ndarray:
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_about_y(angle_deg: float) -> np.ndarray:
    a = np.radians(angle_deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_error(a: RigidTransform, b: RigidTransform) -> float:
    """Geodesic angle between the two rotations, in degrees.

    The angle is the arccos((trace - 1)/2) geodesic distance, but it is
    evaluated as atan2 of the antisymmetric part against trace - 1: the
    arccos form loses half the significant digits near 0 and 180 degrees
    (an exactly recovered rotation would read as ~1e-6 deg instead of ~1e-13).
    """
    q = a.rotation.T @ b.rotation
    # ||vee(Q - Q^T)|| = 2 sin(theta), trace - 1 = 2 cos(theta)
    vee = np.array([q[2, 1] - q[1, 2], q[0, 2] - q[2, 0], q[1, 0] - q[0, 1]])
    return float(np.degrees(np.arctan2(np.linalg.norm(vee), np.trace(q) - 1.0)))


def translation_error(a: RigidTransform, b: RigidTransform, p: PointCloud) -> float:
    """Distance between the centroids of p mapped through a and through b."""
    ca = apply(a, p.points).mean(axis=0)
    cb = apply(b, p.points).mean(axis=0)
    return float(np.linalg.norm(ca - cb))


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All Euclidean distances between rows of a (N, 3) and rows of b (M, 3)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise CountMismatch(f"incompatible shapes {a.shape} and {b.shape}")
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=2))
