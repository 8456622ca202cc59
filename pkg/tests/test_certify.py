"""The certification suite itself: passes on random parameters, catches an
injected improper-rotation bug, runs fast at low trial counts."""

import time
from types import SimpleNamespace

import numpy as np
import pytest

from relplace import certify as ct

EXPECTED_ROWS = 14


def test_suite_passes_on_random_params():
    rows = ct.run_suite(trials=3, seed=0)
    assert len(rows) == EXPECTED_ROWS
    assert [r.name for r in rows if not r.passed] == []


def test_suite_deterministic():
    a = ct.run_suite(trials=2, seed=5)
    b = ct.run_suite(trials=2, seed=5)
    assert [(r.name, r.worst) for r in a] == [(r.name, r.worst) for r in b]


def _alignment_without_reflection_fix(p, q, w=None):
    """The classic buggy Procrustes: SVD alignment missing the det correction.

    Proper targets still come out right, so only the reflected-input probe can
    expose it, which is exactly what the det row is for.
    """
    w = np.ones(len(p)) if w is None else np.asarray(w, dtype=float)
    wp = w[:, None]
    p_bar = (wp * p).sum(axis=0) / w.sum()
    q_bar = (wp * q).sum(axis=0) / w.sum()
    s = ((q - q_bar) * wp).T @ (p - p_bar)
    u, _, vt = np.linalg.svd(s)
    rot = u @ vt
    return SimpleNamespace(rotation=rot, translation=q_bar - rot @ p_bar)


def test_injected_reflection_bug_fails_det_row(monkeypatch):
    monkeypatch.setattr(ct, "pro_solve", _alignment_without_reflection_fix)
    rows = ct.run_suite(trials=2, seed=0)
    by_name = {r.name: r for r in rows}

    det = by_name["alignment rotation always proper"]
    assert not det.passed
    assert det.worst > 1.0  # a reflection is det -1, as far from +1 as it gets
    # the bug is invisible on proper inputs: the other alignment rows still pass
    assert by_name["alignment exact recovery (deg)"].passed
    assert by_name["alignment two-sided equivariance (deg)"].passed

    table = ct.format_table(rows)
    assert "FAIL" in table
    assert f"overall: FAIL ({EXPECTED_ROWS - 1}/{EXPECTED_ROWS})" in table


def test_single_trial_under_one_second():
    ct.run_suite(trials=1, seed=1)  # warm any lazy numpy internals
    start = time.perf_counter()
    rows = ct.run_suite(trials=1, seed=2)
    elapsed = time.perf_counter() - start
    assert all(r.passed for r in rows)
    assert elapsed < 1.0, f"trials=1 took {elapsed:.2f}s"


def test_format_table_shape():
    rows = ct.run_suite(trials=1, seed=3)
    table = ct.format_table(rows)
    lines = table.splitlines()
    assert len(lines) == EXPECTED_ROWS + 2  # header + rows + verdict
    assert lines[0].split()[:2] == ["check", "worst"]
    assert all("pass" in line for line in lines[1:-1])
    assert lines[-1] == f"overall: PASS ({EXPECTED_ROWS}/{EXPECTED_ROWS})"


def test_trials_must_be_positive():
    with pytest.raises(ValueError, match="trials"):
        ct.run_suite(trials=0)
