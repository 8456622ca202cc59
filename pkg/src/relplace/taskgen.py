"""Procedural relative-placement tasks with exact ground truth.

Two families: a ring dropped over a peg and a lid set onto an open box. Both
break their rotational symmetry explicitly: the predictor works from per-point
distance statistics, so every point must be identifiable by its neighborhood
alone. Surfaces are therefore sampled under smooth, azimuthally graded density
fields (plus a hard densified notch arc on the ring and a raised corner tab on
the lid), which makes local point spacing a coordinate the learned kernel can
read. Uniformly sampled surfaces of revolution would leave the azimuth
unobservable and the placement ambiguous.

A task instance stores the goal configuration plus the two rigid
perturbations that produced the observed clouds; the ground-truth cross-pose
is their quotient. Scales are normalized so the larger object of a pair has
unit diameter, which is the length unit all error tolerances refer to.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DatasetFormatError
from .geometry import (
    PointCloud,
    RigidTransform,
    apply,
    compose,
    inverse,
    pairwise_distances,
    random_transform,
    rotation_about_z,
)

_BLOB_MAGIC = b"RPCL"
_BLOB_VERSION = 1
_MANIFEST_VERSION = 1

# ring family proportions (before unit-diameter normalization)
_RING_MAJOR = 1.0
_RING_MINOR = 0.15
_PEG_HEIGHT = 2.0
_RING_GOAL_HEIGHT = 1.0
_NOTCH_DEG = 20.0
_NOTCH_DENSITY = 3.0

# lid family proportions
_BOX_W, _BOX_L, _BOX_H = 1.4, 1.0, 0.6
_LID_MARGIN = 0.98
_TAB_FRACTION = 0.16
_TAB_RAISE = 0.05
# wall-top multipliers (x-, x+, y-, y+): unequal heights kill the 180-degree
# ambiguity of a plain rectangular box
_WALL_TOPS = (1.00, 0.93, 1.07, 0.96)

# density gradings: (amp1, phase1, amp2, phase2) of 1 + a1*cos(u - p1)
# + a2*sin(2u + p2); amplitudes sum below 1 so densities stay positive.
# Phases differ per surface so no two share a level set.
_RING_GRADE = (0.45, 2.0, 0.30, 0.8)
_PEG_GRADE = (0.40, 0.7, 0.28, 2.4)
_TOP_GRADE = (0.42, 4.1, 0.25, 1.3)


@dataclass(frozen=True)
class TaskInstance:
    """One placement problem: observed clouds, goal clouds, and ground truth.

    pa_init = t_alpha applied to pa_goal, pb_init = t_beta applied to pb_goal;
    t_cross_gt = t_beta after inverse(t_alpha) maps the observed A onto its
    goal relative to the observed B.
    """

    pa_init: PointCloud
    pb_init: PointCloud
    pa_goal: PointCloud
    pb_goal: PointCloud
    t_alpha: RigidTransform
    t_beta: RigidTransform
    t_cross_gt: RigidTransform
    family: str
    seed: int

    def __post_init__(self):
        moved = apply(self.t_cross_gt, self.pa_init.points)
        target = apply(self.t_beta, self.pa_goal.points)
        drift = float(np.max(np.linalg.norm(moved - target, axis=1)))
        if drift > 1e-10:
            raise ValueError(f"inconsistent ground truth: alignment drift {drift:.3e}")


def _normalize_pair(pa: np.ndarray, pb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shift the pair's z to the joint centroid and scale the pair uniformly
    so the larger object has unit diameter. The vertical axis stays x = y = 0."""
    diam_a = float(pairwise_distances(pa, pa).max())
    diam_b = float(pairwise_distances(pb, pb).max())
    scale = 1.0 / max(diam_a, diam_b)
    z_mid = np.concatenate([pa, pb]).mean(axis=0)[2]
    shift = np.array([0.0, 0.0, z_mid])
    return (pa - shift) * scale, (pb - shift) * scale


def _sample_1d(
    rng: np.random.Generator, n: int, lo: float, hi: float, density
) -> np.ndarray:
    """Draw n values on [lo, hi] from an (unnormalized) positive density via
    an inverse CDF tabulated on a fine grid."""
    grid = np.linspace(lo, hi, 4097)
    pdf = density(grid)
    cdf = np.concatenate(
        [[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(grid))]
    )
    return np.interp(rng.random(n) * cdf[-1], cdf, grid)


def _grade(coeffs) -> callable:
    """Smooth positive azimuthal density 1 + a1*cos(u-p1) + a2*sin(2u+p2)."""
    a1, p1, a2, p2 = coeffs
    return lambda u: 1.0 + a1 * np.cos(u - p1) + a2 * np.sin(2.0 * u + p2)


def _torus_angles(rng: np.random.Generator, n: int) -> np.ndarray:
    """Azimuth angles: graded density with the notch arc at triple density."""
    notch = np.radians(_NOTCH_DEG)
    smooth = _grade(_RING_GRADE)

    def density(u):
        return smooth(u) * np.where(u < notch, _NOTCH_DENSITY, 1.0)

    return _sample_1d(rng, n, 0.0, 2 * np.pi, density)


def gen_ring_on_peg(
    seed: int, n_points: int = 256, variation: float = 0.0
) -> tuple[PointCloud, PointCloud]:
    """Goal clouds for a ring (A) seated on a peg with a base plate (B).

    The peg axis is the z axis. The ring's radii are jittered by the given
    relative variation; the peg radius tracks half the jittered major radius,
    so the families never interpenetrate. Deterministic per seed.
    """
    if n_points < 64:
        raise ValueError("n_points must be at least 64")
    rng = np.random.default_rng(seed)
    major = _RING_MAJOR * (1.0 + variation * rng.uniform(-1.0, 1.0))
    minor = _RING_MINOR * (1.0 + variation * rng.uniform(-1.0, 1.0))

    u = _torus_angles(rng, n_points)
    v = rng.uniform(0.0, 2 * np.pi, n_points)
    ring_r = major + minor * np.cos(v)
    ring = np.column_stack(
        [ring_r * np.cos(u), ring_r * np.sin(u), minor * np.sin(v) + _RING_GOAL_HEIGHT]
    )

    radius = 0.5 * major
    plate_half = 1.5 * major
    n_side = int(0.55 * n_points)
    n_top = int(0.15 * n_points)
    n_plate = n_points - n_side - n_top
    ang = _sample_1d(rng, n_side, 0.0, 2 * np.pi, _grade(_PEG_GRADE))
    height = _sample_1d(
        rng, n_side, 0.0, _PEG_HEIGHT, lambda z: 1.0 + 0.6 * (z / _PEG_HEIGHT - 0.5)
    )
    side = np.column_stack([radius * np.cos(ang), radius * np.sin(ang), height])
    ang = _sample_1d(rng, n_top, 0.0, 2 * np.pi, _grade(_TOP_GRADE))
    rad = radius * np.sqrt(rng.random(n_top))
    top = np.column_stack(
        [rad * np.cos(ang), rad * np.sin(ang), np.full(n_top, _PEG_HEIGHT)]
    )
    px = _sample_1d(rng, n_plate, -plate_half, plate_half, lambda x: 1.0 + 0.4 * x / plate_half)
    py = _sample_1d(rng, n_plate, -plate_half, plate_half, lambda y: 1.0 + 0.3 * y / plate_half + 0.25 * ((y / plate_half) ** 2 - 1.0 / 3.0))
    plate = np.column_stack([px, py, np.zeros(n_plate)])
    peg = np.vstack([side, top, plate])

    ring, peg = _normalize_pair(ring, peg)
    return PointCloud(ring), PointCloud(peg)


def gen_lid_on_box(
    seed: int, n_points: int = 256, variation: float = 0.0
) -> tuple[PointCloud, PointCloud]:
    """Goal clouds for a lid (A) resting on an open box (B).

    Box dimensions are jittered by the relative variation; the lid tracks the
    box opening with a small margin, so its footprint stays inside the box
    footprint, and rests at the tallest wall's top. Unequal wall heights and
    per-wall density tilts break the box's 180-degree symmetry; a raised tab
    over one corner breaks the lid's. Deterministic per seed.
    """
    if n_points < 64:
        raise ValueError("n_points must be at least 64")
    rng = np.random.default_rng(seed)
    w = _BOX_W * (1.0 + variation * rng.uniform(-1.0, 1.0))
    length = _BOX_L * (1.0 + variation * rng.uniform(-1.0, 1.0))
    h = _BOX_H * (1.0 + variation * rng.uniform(-1.0, 1.0))

    n_bottom = int(0.3 * n_points)
    n_wall = (n_points - n_bottom) // 4
    n_bottom = n_points - 4 * n_wall
    bx = _sample_1d(rng, n_bottom, -w / 2, w / 2, lambda x: 1.0 + 0.45 * x / (w / 2))
    by = _sample_1d(
        rng, n_bottom, -length / 2, length / 2, lambda y: 1.0 - 0.35 * y / (length / 2)
    )
    bottom = np.column_stack([bx, by, np.zeros(n_bottom)])

    # each wall gets its own top height and its own density tilt along both
    # the run and the climb, so no two walls look alike point-for-point
    walls = []
    runs = [(1, -0.5 * w, length), (1, 0.5 * w, length), (0, -0.5 * length, w), (0, 0.5 * length, w)]
    tilts = [(0.45, 0.3), (-0.35, -0.45), (0.25, 0.5), (-0.5, -0.2)]
    for (axis, offset, run), (t_run, t_z), top_mul in zip(runs, tilts, _WALL_TOPS):
        wall_h = h * top_mul
        s = _sample_1d(rng, n_wall, -run / 2, run / 2, lambda v, t=t_run, r=run: 1.0 + t * v / (r / 2))
        z = _sample_1d(rng, n_wall, 0.0, wall_h, lambda v, t=t_z, wh=wall_h: 1.0 + t * (v / wh - 0.5))
        fixed = np.full(n_wall, offset)
        cols = (fixed, s) if axis == 1 else (s, fixed)
        walls.append(np.column_stack([*cols, z]))
    box = np.vstack([bottom, *walls])

    lw, ll = _LID_MARGIN * w, _LID_MARGIN * length
    lid_z = h * max(_WALL_TOPS)
    n_tab = int(_TAB_FRACTION * n_points)
    n_plate = n_points - n_tab
    px = _sample_1d(rng, n_plate, -lw / 2, lw / 2, lambda x: 1.0 + 0.4 * x / (lw / 2))
    py = _sample_1d(
        rng, n_plate, -ll / 2, ll / 2, lambda y: 1.0 + 0.3 * y / (ll / 2) + 0.2 * ((y / (ll / 2)) ** 2 - 1.0 / 3.0)
    )
    plate = np.column_stack([px, py, np.full(n_plate, lid_z)])
    tab_side = 0.2 * min(lw, ll)
    tab = np.column_stack(
        [
            rng.uniform(lw / 2 - tab_side, lw / 2, n_tab),
            rng.uniform(ll / 2 - tab_side, ll / 2, n_tab),
            np.full(n_tab, lid_z + _TAB_RAISE * min(w, length)),
        ]
    )
    lid = np.vstack([plate, tab])

    lid, box = _normalize_pair(lid, box)
    return PointCloud(lid), PointCloud(box)


FAMILIES = {
    "ring-on-peg": gen_ring_on_peg,
    "lid-on-box": gen_lid_on_box,
}


def perturb(
    pa_goal: PointCloud,
    pb_goal: PointCloud,
    seed: int,
    max_translation: float = 1.0,
    family: str = "unknown",
    upright: bool = False,
    rotate: bool = True,
) -> TaskInstance:
    """Draw rigid perturbations of a goal pair and package the instance.

    Args:
        upright: restrict both perturbations to rotations about the vertical
            axis (gravity-respecting poses).
        rotate: with False, both perturbations are pure translations.
    """
    rng = np.random.default_rng(seed)

    def draw() -> RigidTransform:
        if not rotate:
            rot = np.eye(3)
        elif upright:
            rot = rotation_about_z(rng.uniform(0.0, 360.0))
        else:
            return random_transform(rng, max_translation)
        tr = rng.uniform(-max_translation, max_translation, 3) if max_translation else np.zeros(3)
        return RigidTransform(rot, tr)

    t_alpha = draw()
    t_beta = draw()
    return TaskInstance(
        pa_init=apply(t_alpha, pa_goal),
        pb_init=apply(t_beta, pb_goal),
        pa_goal=pa_goal,
        pb_goal=pb_goal,
        t_alpha=t_alpha,
        t_beta=t_beta,
        t_cross_gt=compose(t_beta, inverse(t_alpha)),
        family=family,
        seed=seed,
    )


def make_instances(
    family: str,
    count: int,
    seed: int,
    n_points: int = 256,
    variation: float = 0.0,
    max_translation: float = 1.0,
    shape_seeds: list[int] | None = None,
    upright: bool = False,
) -> list[TaskInstance]:
    """Generate instances of one family.

    shape_seeds pins the object geometry per instance (cycled if shorter than
    count), which is how held-out perturbations of already-seen objects are
    produced; by default instance i uses shape seed `seed + i`.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}; valid: {sorted(FAMILIES)}")
    gen = FAMILIES[family]
    instances = []
    for i in range(count):
        shape_seed = (
            shape_seeds[i % len(shape_seeds)] if shape_seeds else seed + i
        )
        pa_goal, pb_goal = gen(shape_seed, n_points=n_points, variation=variation)
        instances.append(
            perturb(
                pa_goal,
                pb_goal,
                seed=seed + 70_001 * (i + 1),
                max_translation=max_translation,
                family=family,
                upright=upright,
            )
        )
    return instances


# ------------------------------------------------------------------ dataset IO

_CLOUD_FIELDS = ("pa_init", "pb_init", "pa_goal", "pb_goal")
_TRANSFORM_FIELDS = ("t_alpha", "t_beta", "t_cross_gt")


def _write_blob(path: Path, points: np.ndarray) -> str:
    data = _BLOB_MAGIC + struct.pack("<II", _BLOB_VERSION, points.shape[0])
    data += points.astype("<f8").tobytes()
    path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def _read_blob(path: Path, checksum: str) -> np.ndarray:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise DatasetFormatError(f"cannot read {path.name}: {exc}") from exc
    if hashlib.sha256(data).hexdigest() != checksum:
        raise DatasetFormatError(f"checksum mismatch for {path.name}")
    if data[:4] != _BLOB_MAGIC:
        raise DatasetFormatError(f"{path.name} is not a point cloud blob")
    version, n = struct.unpack("<II", data[4:12])
    if version != _BLOB_VERSION:
        raise DatasetFormatError(f"unsupported blob version {version}")
    body = data[12:]
    if len(body) != 24 * n:
        raise DatasetFormatError(f"{path.name} has wrong payload size")
    return np.frombuffer(body, dtype="<f8").reshape(n, 3).copy()


def _transform_json(t: RigidTransform) -> dict:
    return {
        "rotation": [float(x) for x in t.rotation.reshape(-1)],
        "translation": [float(x) for x in t.translation],
    }


def _transform_from_json(obj: dict) -> RigidTransform:
    return RigidTransform(
        np.array(obj["rotation"], dtype=np.float64).reshape(3, 3),
        np.array(obj["translation"], dtype=np.float64),
    )


def dataset_write(instances: list[TaskInstance], path) -> None:
    """Write instances to a directory: manifest.json plus one blob per cloud."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    checksums: dict[str, str] = {}
    entries = []
    for i, inst in enumerate(instances):
        clouds = {}
        for field_name in _CLOUD_FIELDS:
            fname = f"{i:04d}_{field_name}.rpcl"
            clouds[field_name] = fname
            checksums[fname] = _write_blob(
                root / fname, getattr(inst, field_name).points
            )
        entries.append(
            {
                "id": i,
                "family": inst.family,
                "seed": inst.seed,
                "clouds": clouds,
                "transforms": {
                    name: _transform_json(getattr(inst, name))
                    for name in _TRANSFORM_FIELDS
                },
            }
        )
    manifest = {
        "format_version": _MANIFEST_VERSION,
        "count": len(instances),
        "instances": entries,
        "checksums": checksums,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1))
    # Rewriting over a larger dataset must not leave stale blobs behind;
    # readers follow the manifest, so cleanup after it lands is safe.
    for stray in root.glob("*.rpcl"):
        if stray.name not in checksums:
            stray.unlink()


def dataset_read(path) -> list[TaskInstance]:
    """Read a dataset directory written by dataset_write; round trip is bit-exact.

    Raises:
        DatasetFormatError: missing manifest, version mismatch, corrupted blob.
    """
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except OSError as exc:
        raise DatasetFormatError(f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"manifest is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != _MANIFEST_VERSION:
        raise DatasetFormatError(
            f"unsupported dataset version {manifest.get('format_version')}"
        )
    checksums = manifest.get("checksums", {})
    instances = []
    for entry in manifest.get("instances", []):
        try:
            clouds = {
                name: PointCloud(
                    _read_blob(root / entry["clouds"][name], checksums[entry["clouds"][name]])
                )
                for name in _CLOUD_FIELDS
            }
            transforms = {
                name: _transform_from_json(entry["transforms"][name])
                for name in _TRANSFORM_FIELDS
            }
            instances.append(
                TaskInstance(
                    **clouds,
                    **transforms,
                    family=entry["family"],
                    seed=entry["seed"],
                )
            )
        except (KeyError, ValueError) as exc:
            raise DatasetFormatError(f"malformed dataset entry: {exc}") from exc
    if len(instances) != manifest.get("count"):
        raise DatasetFormatError("manifest count disagrees with instance list")
    return instances
