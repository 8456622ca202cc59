import numpy as np
import pytest

from relplace.errors import AllZeroWeights, CountMismatch, DegenerateConfiguration
from relplace.geometry import (
    RigidTransform,
    apply,
    compose,
    inverse,
    random_transform,
    rotation_error,
)
from relplace.procrustes import pro_objective, pro_oracle, pro_solve


def test_identity_on_equal_clouds():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(12, 3))
    t = pro_solve(p, p)
    assert np.allclose(t.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(t.translation, 0.0, atol=1e-12)


def test_exact_recovery():
    rng = np.random.default_rng(1)
    for _ in range(100):
        p = rng.normal(size=(20, 3))
        t_true = random_transform(rng, 2.0)
        got = pro_solve(p, apply(t_true, p))
        assert rotation_error(got, t_true) < 1e-9
        assert np.linalg.norm(got.translation - t_true.translation) < 1e-10


def test_weighted_recovery():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = rng.normal(size=(15, 3))
        w = rng.random(15) + 0.05
        t_true = random_transform(rng, 1.0)
        got = pro_solve(p, apply(t_true, p), w)
        assert rotation_error(got, t_true) < 1e-9


def test_weighted_noisy_beats_lm_oracle():
    rng = np.random.default_rng(3)
    for trial in range(10):
        p = rng.normal(size=(50, 3))
        t_true = random_transform(rng, 1.0)
        q = apply(t_true, p) + rng.normal(size=(50, 3)) * 0.05
        w = rng.random(50) + 0.01
        got = pro_solve(p, q, w)
        oracle = pro_oracle(p, q, w, restarts=20, seed=trial)
        assert pro_objective(p, q, w, got) <= pro_objective(p, q, w, oracle) + 1e-10


def test_two_sided_equivariance():
    rng = np.random.default_rng(4)
    for trial in range(200):
        n = int(rng.integers(5, 40))
        p = rng.normal(size=(n, 3))
        q = rng.normal(size=(n, 3))
        w = rng.random(n) + 0.01 if trial % 2 else None
        t_a = random_transform(rng, 3.0)
        t_b = random_transform(rng, 3.0)
        lhs = pro_solve(apply(t_a, p), apply(t_b, q), w)
        rhs = compose(t_b, compose(pro_solve(p, q, w), inverse(t_a)))
        assert rotation_error(lhs, rhs) < 1e-7
        assert np.linalg.norm(lhs.translation - rhs.translation) < 1e-8


def test_weight_scaling_invariance():
    rng = np.random.default_rng(5)
    p = rng.normal(size=(25, 3))
    q = rng.normal(size=(25, 3))
    w = rng.random(25) + 0.1
    base = pro_solve(p, q, w)
    scaled = pro_solve(p, q, w * 137.0)
    assert np.max(np.abs(base.rotation - scaled.rotation)) < 1e-10
    assert np.max(np.abs(base.translation - scaled.translation)) < 1e-10


def test_reflected_inputs_still_give_proper_rotation():
    rng = np.random.default_rng(6)
    mirror = np.diag([1.0, 1.0, -1.0])
    for _ in range(100):
        p = rng.normal(size=(10, 3))
        q = p @ mirror.T + rng.normal(size=3)
        t = pro_solve(p, q)
        assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-10


def test_det_plus_one_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(200):
        p = rng.normal(size=(8, 3))
        q = rng.normal(size=(8, 3))
        t = pro_solve(p, q)
        assert abs(np.linalg.det(t.rotation) - 1.0) < 1e-10


def test_degenerate_configurations_rejected():
    rng = np.random.default_rng(8)
    line = np.outer(np.linspace(0.0, 1.0, 10), np.array([1.0, 2.0, 0.5]))
    with pytest.raises(DegenerateConfiguration):
        pro_solve(line, rng.normal(size=(10, 3)))
    coincident = np.tile(np.array([1.0, 2.0, 3.0]), (5, 1))
    with pytest.raises(DegenerateConfiguration):
        pro_solve(coincident, rng.normal(size=(5, 3)))


def test_weight_validation():
    rng = np.random.default_rng(9)
    p = rng.normal(size=(6, 3))
    q = rng.normal(size=(6, 3))
    with pytest.raises(AllZeroWeights):
        pro_solve(p, q, np.zeros(6))
    with pytest.raises(DegenerateConfiguration):
        pro_solve(p, q, np.array([1.0, 1.0, 0.0, 0.0, 0.0, 0.0]))
    with pytest.raises(CountMismatch):
        pro_solve(p, q, np.ones(5))
    with pytest.raises(ValueError):
        pro_solve(p, q, np.array([1.0, 1.0, 1.0, 1.0, 1.0, -0.5]))


def test_count_mismatch():
    with pytest.raises(CountMismatch):
        pro_solve(np.zeros((4, 3)), np.zeros((5, 3)))


def test_minimizes_objective_against_perturbations():
    # nudging the returned transform can only increase the objective
    rng = np.random.default_rng(10)
    p = rng.normal(size=(30, 3))
    q = rng.normal(size=(30, 3)) * 0.5 + p
    t = pro_solve(p, q)
    base = pro_objective(p, q, None, t)
    for _ in range(20):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = 1e-4
        k = np.array(
            [
                [0.0, -axis[2], axis[1]],
                [axis[2], 0.0, -axis[0]],
                [-axis[1], axis[0], 0.0],
            ]
        )
        r_nudge = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
        nudged = RigidTransform(r_nudge @ t.rotation, t.translation + rng.normal(size=3) * 1e-5)
        assert pro_objective(p, q, None, nudged) >= base - 1e-12
