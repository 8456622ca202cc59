"""Weighted least-squares rigid alignment with reflection correction.

Solves min_{R, t} sum_i w_i ||R p_i + t - q_i||^2 over proper rotations via
the SVD construction, plus a quaternion-parameterized nonlinear oracle used
only to cross-check optimality.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import least_squares

from .errors import AllZeroWeights, CountMismatch, DegenerateConfiguration, NoConvergence
from .geometry import PointCloud, RigidTransform, quaternion_to_matrix

# S is rank-deficient (collinear/coincident support) below this singular ratio
_RANK_RATIO = 1e-12


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.points
    pts = np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected an N x 3 point array, got {pts.shape}")
    return pts


def _weights(w, n: int) -> np.ndarray:
    if w is None:
        return np.full(n, 1.0 / n)
    w = np.asarray(w, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise CountMismatch(f"{w.shape[0]} weights for {n} points")
    if not np.all(np.isfinite(w)) or np.any(w < 0.0):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total == 0.0:
        raise AllZeroWeights("all alignment weights are zero")
    if np.count_nonzero(w) < 3:
        raise DegenerateConfiguration("fewer than 3 strictly positive weights")
    return w / total


def pro_objective(p, q, w, transform: RigidTransform) -> float:
    """Weighted alignment objective at a given transform."""
    p, q = _points(p), _points(q)
    w = _weights(w, p.shape[0])
    moved = p @ transform.rotation.T + transform.translation
    return float(np.sum(w * np.sum((moved - q) ** 2, axis=1)))


def pro_solve(p, q, w=None) -> RigidTransform:
    """Optimal rigid alignment mapping points p onto corresponding points q.

    Weighted centroids are removed, S = X^T W Y is decomposed by SVD, and
    D = diag(1, 1, det(V U^T)) forces a proper rotation, so det(R) = +1 even
    for mirrored correspondences (which then incur the least-squares cost of
    flipping the smallest singular direction rather than a reflection).

    Args:
        p, q: matched (N, 3) point sets (arrays or PointClouds), N >= 3.
        w: optional non-negative weights, at least 3 strictly positive.

    Returns:
        RigidTransform minimizing sum_i w_i ||R p_i + t - q_i||^2.

    Raises:
        CountMismatch, AllZeroWeights, DegenerateConfiguration (rank < 2 S:
        collinear or coincident weighted support).
    """
    p, q = _points(p), _points(q)
    if p.shape[0] != q.shape[0]:
        raise CountMismatch(f"{p.shape[0]} source points for {q.shape[0]} targets")
    n = p.shape[0]
    if n < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {n}")
    w = _weights(w, n)

    p_bar = w @ p
    q_bar = w @ q
    x = p - p_bar
    y = q - q_bar
    s = x.T @ (w[:, None] * y)

    u, sig, vt = np.linalg.svd(s)
    if sig[1] <= _RANK_RATIO * sig[0] or sig[0] == 0.0:
        raise DegenerateConfiguration(
            "correspondences are collinear or coincident (rank-deficient S)"
        )
    v = vt.T
    d = np.eye(3)
    d[2, 2] = np.linalg.det(v @ u.T)
    r = v @ d @ u.T
    return RigidTransform(r, q_bar - r @ p_bar)


def pro_oracle(p, q, w=None, restarts: int = 20, seed: int = 0) -> RigidTransform:
    """Levenberg-Marquardt alignment over quaternion + translation.

    Exists solely as an independent optimality check on pro_solve: starts from
    `restarts` random orientations and returns the best local minimum found.
    """
    p, q = _points(p), _points(q)
    if p.shape[0] != q.shape[0]:
        raise CountMismatch(f"{p.shape[0]} source points for {q.shape[0]} targets")
    w = _weights(w, p.shape[0])
    sqrt_w = np.sqrt(w)[:, None]

    def residuals(params):
        quat = params[:4]
        quat = quat / np.linalg.norm(quat)
        rot = quaternion_to_matrix(quat)
        moved = p @ rot.T + params[4:]
        return ((moved - q) * sqrt_w).reshape(-1)

    rng = np.random.default_rng(seed)
    t_scale = max(1.0, float(np.abs(q).max() + np.abs(p).max()))
    best = None
    for _ in range(restarts):
        quat0 = rng.standard_normal(4)
        quat0 /= np.linalg.norm(quat0)
        x0 = np.concatenate([quat0, rng.uniform(-t_scale, t_scale, 3)])
        sol = least_squares(residuals, x0, method="lm", xtol=1e-14, ftol=1e-14)
        if sol.status > 0:
            obj = float(np.sum(sol.fun**2))
            if best is None or obj < best[0]:
                best = (obj, sol.x)
    if best is None:
        raise NoConvergence(f"no LM restart converged in {restarts} attempts")
    params = best[1]
    quat = params[:4] / np.linalg.norm(params[:4])
    return RigidTransform(quaternion_to_matrix(quat), params[4:])
