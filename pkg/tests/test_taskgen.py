import json

import numpy as np
import pytest

from relplace import taskgen as tg
from relplace.errors import DatasetFormatError
from relplace.geometry import (
    RigidTransform,
    apply,
    pairwise_distances,
    rotation_error,
    translation_error,
)


def _diam(pts: np.ndarray) -> float:
    return float(pairwise_distances(pts, pts).max())


# ----------------------------------------------------------------- generators


def test_ring_determinism():
    a1, b1 = tg.gen_ring_on_peg(seed=3, n_points=128, variation=0.1)
    a2, b2 = tg.gen_ring_on_peg(seed=3, n_points=128, variation=0.1)
    assert np.array_equal(a1.points, a2.points)
    assert np.array_equal(b1.points, b2.points)
    a3, _ = tg.gen_ring_on_peg(seed=4, n_points=128, variation=0.1)
    assert not np.array_equal(a1.points, a3.points)


def test_ring_unit_diameter():
    for seed in range(5):
        a, b = tg.gen_ring_on_peg(seed=seed, n_points=128, variation=0.1)
        assert abs(max(_diam(a.points), _diam(b.points)) - 1.0) < 1e-12


def test_ring_does_not_interpenetrate_peg():
    for seed in range(10):
        ring, peg = tg.gen_ring_on_peg(seed=seed, n_points=256, variation=0.15)
        lo, hi = ring.points[:, 2].min(), ring.points[:, 2].max()
        band = peg.points[(peg.points[:, 2] >= lo) & (peg.points[:, 2] <= hi)]
        assert band.shape[0] > 0, "ring band should overlap the peg shaft"
        peg_radius = np.linalg.norm(band[:, :2], axis=1).max()
        ring_inner = np.linalg.norm(ring.points[:, :2], axis=1).min()
        assert ring_inner > peg_radius


def test_ring_notch_densified():
    ring, _ = tg.gen_ring_on_peg(seed=11, n_points=4096)
    azimuth = np.degrees(np.arctan2(ring.points[:, 1], ring.points[:, 0])) % 360.0
    frac = np.mean(azimuth < 20.0)
    # tripled density over a 20 degree arc: expected fraction 60/400 = 0.15
    assert 0.12 < frac < 0.18


def test_ring_rejects_tiny_clouds():
    with pytest.raises(ValueError):
        tg.gen_ring_on_peg(seed=0, n_points=32)


def test_lid_determinism_and_unit_diameter():
    a1, b1 = tg.gen_lid_on_box(seed=9, n_points=128, variation=0.1)
    a2, b2 = tg.gen_lid_on_box(seed=9, n_points=128, variation=0.1)
    assert np.array_equal(a1.points, a2.points)
    assert np.array_equal(b1.points, b2.points)
    assert abs(max(_diam(a1.points), _diam(b1.points)) - 1.0) < 1e-12


def test_lid_footprint_inside_box():
    for seed in range(10):
        lid, box = tg.gen_lid_on_box(seed=seed, n_points=256, variation=0.15)
        for axis in (0, 1):
            assert lid.points[:, axis].max() <= box.points[:, axis].max() + 1e-9
            assert lid.points[:, axis].min() >= box.points[:, axis].min() - 1e-9


def test_lid_sits_above_box():
    lid, box = tg.gen_lid_on_box(seed=2, n_points=128)
    assert lid.points[:, 2].min() >= box.points[:, 2].max() - 1e-9


def test_lid_variation_monotonicity():
    def spread(variation: float) -> float:
        dims = []
        for seed in range(15):
            _, box = tg.gen_lid_on_box(seed=seed, n_points=128, variation=variation)
            dims.append(box.points.max(axis=0) - box.points.min(axis=0))
        dims = np.array(dims)
        return float(np.mean(np.std(dims, axis=0)))

    assert spread(0.2) > spread(0.02)


# -------------------------------------------------------------------- perturb


def test_perturb_no_motion_gives_identity_cross_pose():
    pa, pb = tg.gen_ring_on_peg(seed=0, n_points=64)
    inst = tg.perturb(pa, pb, seed=5, max_translation=0.0, rotate=False)
    assert np.array_equal(inst.t_cross_gt.rotation, np.eye(3))
    assert np.array_equal(inst.t_cross_gt.translation, np.zeros(3))
    assert np.array_equal(inst.pa_init.points, pa.points)


def test_perturb_invariant_many_instances():
    pa, pb = tg.gen_ring_on_peg(seed=1, n_points=64)
    for seed in range(1000):
        inst = tg.perturb(pa, pb, seed=seed, max_translation=2.0, family="ring-on-peg")
        moved = apply(inst.t_cross_gt, inst.pa_init.points)
        target = apply(inst.t_beta, inst.pa_goal.points)
        assert np.max(np.linalg.norm(moved - target, axis=1)) < 1e-10


def test_perturb_error_metrics_zero_on_ground_truth():
    pa, pb = tg.gen_lid_on_box(seed=1, n_points=64)
    inst = tg.perturb(pa, pb, seed=77, max_translation=1.5)
    assert rotation_error(inst.t_cross_gt, inst.t_cross_gt) == 0.0
    assert translation_error(inst.t_cross_gt, inst.t_cross_gt, inst.pa_init) == 0.0


def test_perturb_upright_keeps_vertical_axis():
    pa, pb = tg.gen_ring_on_peg(seed=2, n_points=64)
    for seed in range(20):
        inst = tg.perturb(pa, pb, seed=seed, max_translation=1.0, upright=True)
        for t in (inst.t_alpha, inst.t_beta):
            assert abs(t.rotation[2, 2] - 1.0) < 1e-12
            assert np.max(np.abs(t.rotation[2, :2])) < 1e-12


def test_inconsistent_instance_rejected():
    pa, pb = tg.gen_ring_on_peg(seed=3, n_points=64)
    inst = tg.perturb(pa, pb, seed=1, max_translation=1.0)
    with pytest.raises(ValueError):
        tg.TaskInstance(
            pa_init=inst.pa_init,
            pb_init=inst.pb_init,
            pa_goal=inst.pa_goal,
            pb_goal=inst.pb_goal,
            t_alpha=inst.t_beta,  # swapped: breaks the alignment invariant
            t_beta=inst.t_alpha,
            t_cross_gt=inst.t_cross_gt,
            family="ring-on-peg",
            seed=1,
        )


def test_make_instances_families_and_shape_seeds():
    with pytest.raises(ValueError, match="ring-on-peg"):
        tg.make_instances("no-such-family", count=1, seed=0)
    insts = tg.make_instances(
        "ring-on-peg",
        count=4,
        seed=9,
        n_points=64,
        variation=0.3,
        shape_seeds=[5],
    )
    for inst in insts[1:]:
        assert np.array_equal(inst.pa_goal.points, insts[0].pa_goal.points)
        assert np.array_equal(inst.pb_goal.points, insts[0].pb_goal.points)
    assert not np.array_equal(insts[0].pa_init.points, insts[1].pa_init.points)
    varied = tg.make_instances("ring-on-peg", count=2, seed=9, n_points=64, variation=0.3)
    assert not np.array_equal(varied[0].pa_goal.points, varied[1].pa_goal.points)


# ----------------------------------------------------------------- dataset IO


def _sample_instances(n: int = 3) -> list[tg.TaskInstance]:
    pa, pb = tg.gen_ring_on_peg(seed=0, n_points=64)
    return [
        tg.perturb(pa, pb, seed=s, max_translation=1.0, family="ring-on-peg")
        for s in range(n)
    ]


def test_dataset_round_trip_bit_exact(tmp_path):
    instances = _sample_instances()
    tg.dataset_write(instances, tmp_path / "ds")
    loaded = tg.dataset_read(tmp_path / "ds")
    assert len(loaded) == len(instances)
    for a, b in zip(instances, loaded):
        for field_name in ("pa_init", "pb_init", "pa_goal", "pb_goal"):
            assert np.array_equal(
                getattr(a, field_name).points, getattr(b, field_name).points
            )
        for name in ("t_alpha", "t_beta", "t_cross_gt"):
            assert np.array_equal(getattr(a, name).rotation, getattr(b, name).rotation)
            assert np.array_equal(
                getattr(a, name).translation, getattr(b, name).translation
            )
        assert a.family == b.family and a.seed == b.seed


def test_dataset_empty_round_trip(tmp_path):
    tg.dataset_write([], tmp_path / "empty")
    assert tg.dataset_read(tmp_path / "empty") == []


def test_dataset_rewrite_removes_stale_blobs(tmp_path):
    tg.dataset_write(_sample_instances(3), tmp_path / "ds")
    tg.dataset_write(_sample_instances(1), tmp_path / "ds")
    blobs = sorted(p.name for p in (tmp_path / "ds").glob("*.rpcl"))
    assert blobs == sorted(f"0000_{f}.rpcl" for f in
                           ("pa_init", "pb_init", "pa_goal", "pb_goal"))
    assert len(tg.dataset_read(tmp_path / "ds")) == 1


def test_dataset_corruption_detected(tmp_path):
    tg.dataset_write(_sample_instances(1), tmp_path / "ds")
    blob = next((tmp_path / "ds").glob("*.rpcl"))
    data = bytearray(blob.read_bytes())
    data[20] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(DatasetFormatError, match="checksum"):
        tg.dataset_read(tmp_path / "ds")


def test_dataset_version_mismatch(tmp_path):
    tg.dataset_write(_sample_instances(1), tmp_path / "ds")
    manifest_path = tmp_path / "ds" / "manifest.json"
    manifest = json.loads(manifest_path.read_text())
    manifest["format_version"] = 42
    manifest_path.write_text(json.dumps(manifest))
    with pytest.raises(DatasetFormatError, match="version"):
        tg.dataset_read(tmp_path / "ds")


def test_dataset_missing_manifest(tmp_path):
    with pytest.raises(DatasetFormatError):
        tg.dataset_read(tmp_path / "nothing-here")
