"""Closed-form least-squares multilateration, differentiable in the radii.

Recovers a 3D position from scalar distances to >= 4 non-coplanar beacons by
minimizing sum_i (||p_i - p||^2 - r_i^2)^2. With consistent radii the closed
form below is the exact global minimizer; see mul_oracle for the independent
nonlinear check.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import least_squares

from . import autodiff as ad
from .errors import CountMismatch, DegenerateBeacons, NoConvergence

# beacons count as coplanar when the covariance eigenvalues are this skewed
_COPLANAR_RATIO = 1e-9
_MAX_CONDITION = 1e12


def _validate(radii: np.ndarray, beacons: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    beacons = np.asarray(beacons, dtype=np.float64)
    if beacons.ndim != 2 or beacons.shape[1] != 3:
        raise ValueError(f"beacons must be N x 3, got {beacons.shape}")
    if radii.shape[0] != beacons.shape[0]:
        raise CountMismatch(
            f"{radii.shape[0]} radii for {beacons.shape[0]} beacons"
        )
    if not np.all(np.isfinite(radii)) or np.any(radii <= 0.0):
        raise ValueError("radii must be strictly positive and finite")
    check_beacon_geometry(beacons)
    return radii, beacons


def check_beacon_geometry(beacons: np.ndarray) -> None:
    """Raise DegenerateBeacons for < 4 beacons or a (near-)coplanar set."""
    n = beacons.shape[0]
    if n < 4:
        raise DegenerateBeacons(f"need at least 4 beacons, got {n}")
    centered = beacons - beacons.mean(axis=0)
    eigs = np.linalg.eigvalsh(centered.T @ centered / n)
    if eigs[0] <= _COPLANAR_RATIO * eigs[-1]:
        raise DegenerateBeacons(
            f"beacons are (near-)coplanar: covariance eigenvalue ratio {eigs[0] / eigs[-1]:.3e}"
        )


def mul_objective(radii: np.ndarray, beacons: np.ndarray, p: np.ndarray) -> float:
    """Squared-distance residual objective sum_i (||p_i - p||^2 - r_i^2)^2."""
    d2 = np.sum((beacons - np.asarray(p)[None, :]) ** 2, axis=1)
    return float(np.sum((d2 - np.asarray(radii) ** 2) ** 2))


def mul_solve(radii: np.ndarray, beacons: np.ndarray) -> np.ndarray:
    """Closed-form position from distances to known beacons.

    Follows the sequence a, B, c, f, H, q of the overspecified-case closed
    form, with one correction: the middle term of B is -(p_i^T p_i) I, not
    +(p_i^T p_i) I. With the plus sign the solver neither recovers a receiver
    from consistent radii nor commutes with rigid motions; with the minus sign
    f reduces exactly to mean((||b_i||^2 - r_i^2) b_i) in the centroid frame
    and both properties hold to machine precision.

    Args:
        radii: length-N strictly positive distances.
        beacons: (N, 3) non-coplanar points, N >= 4.

    Returns:
        The minimizing 3-vector p* = q + c.

    Raises:
        DegenerateBeacons: coplanar beacons or ill-conditioned H.
        CountMismatch: radii/beacon count disagreement.
    """
    radii, beacons = _validate(radii, beacons)
    n = beacons.shape[0]
    r2 = radii * radii
    p2 = np.sum(beacons * beacons, axis=1)

    a = ((p2 - r2)[:, None] * beacons).mean(axis=0)
    b_mat = (-2.0 * (beacons.T @ beacons) + (r2.sum() - p2.sum()) * np.eye(3)) / n
    c = beacons.mean(axis=0)
    f = a + b_mat @ c + 2.0 * c * (c @ c)
    h = (-2.0 / n) * (beacons.T @ beacons) + 2.0 * np.outer(c, c)
    if np.linalg.cond(h) >= _MAX_CONDITION:
        raise DegenerateBeacons("normal matrix H is (near-)singular")
    q = -np.linalg.solve(h, f)
    return q + c


def mul_batch(radii_matrix: np.ndarray, beacons: np.ndarray) -> np.ndarray:
    """Row-wise mul_solve: row i of the output solves row i of radii_matrix."""
    radii_matrix = np.asarray(radii_matrix, dtype=np.float64)
    if radii_matrix.ndim != 2:
        raise ValueError(f"radii matrix must be 2-d, got shape {radii_matrix.shape}")
    out = np.empty((radii_matrix.shape[0], 3))
    for i in range(radii_matrix.shape[0]):
        try:
            out[i] = mul_solve(radii_matrix[i], beacons)
        except (DegenerateBeacons, CountMismatch, ValueError) as exc:
            raise type(exc)(f"row {i}: {exc}") from exc
    return out


def mul_batch_diff(radii: ad.Tensor, beacons: np.ndarray) -> ad.Tensor:
    """Differentiable mul_batch for a (K, N) radii tensor on the tape.

    In the centroid frame the solution is affine in the squared radii:
    p*_row = c + inv(2 Cb) @ (u0 - (1/N) B^T r^2), so the whole batch is one
    square, one matmul against the centered beacons, and one matmul against
    the constant 3x3 inverse. Matches mul_batch to float rounding.
    """
    beacons = np.asarray(beacons, dtype=np.float64)
    check_beacon_geometry(beacons)
    n = beacons.shape[0]
    if radii.shape[1] != n:
        raise CountMismatch(f"{radii.shape[1]} radii columns for {n} beacons")
    c = beacons.mean(axis=0)
    centered = beacons - c
    nb2 = np.sum(centered * centered, axis=1)
    u0 = (nb2[:, None] * centered).mean(axis=0)
    m = ad.matrix_inverse(ad.Tensor(2.0 * (centered.T @ centered) / n))

    r2 = ad.square(radii)
    u = ad.add(ad.multiply(ad.matmul(r2, ad.Tensor(centered)), -1.0 / n), ad.Tensor(u0))
    return ad.add(ad.matmul(u, m), ad.Tensor(c))


def mul_oracle(
    radii: np.ndarray,
    beacons: np.ndarray,
    restarts: int = 20,
    seed: int = 0,
) -> np.ndarray:
    """Levenberg-Marquardt minimizer of the same objective, as an independent check.

    Starts from `restarts` random points inside the beacon bounding box and
    returns the best minimizer found. Unlike mul_solve this does not require
    non-coplanar beacons; instead, if two symmetric minima show up (the mirror
    ambiguity of a coplanar beacon set) it raises DegenerateBeacons carrying
    both minima in the `minima` attribute.

    Raises:
        NoConvergence: no restart reached a solver convergence status.
    """
    radii = np.asarray(radii, dtype=np.float64).reshape(-1)
    beacons = np.asarray(beacons, dtype=np.float64)
    if radii.shape[0] != beacons.shape[0]:
        raise CountMismatch(f"{radii.shape[0]} radii for {beacons.shape[0]} beacons")
    r2 = radii * radii

    def residuals(x):
        return np.sum((beacons - x[None, :]) ** 2, axis=1) - r2

    lo, hi = beacons.min(axis=0), beacons.max(axis=0)
    mid, span = 0.5 * (lo + hi), hi - lo
    # a degenerate box axis (coplanar beacons) would pin every start into the
    # plane, where symmetry zeroes the out-of-plane gradient; give such axes
    # the scale of the widest one so restarts straddle both mirror basins
    width = max(float(span.max()), 1.0)
    span = np.where(span < 1e-9 * width, width, span)
    rng = np.random.default_rng(seed)
    solutions = []
    for _ in range(restarts):
        x0 = mid + (rng.random(3) - 0.5) * span
        sol = least_squares(
            residuals, x0, method="lm", xtol=1e-14, ftol=1e-14, gtol=1e-14
        )
        if sol.status > 0:
            solutions.append((float(np.sum(sol.fun**2)), sol.x))
    if not solutions:
        raise NoConvergence(f"no LM restart converged in {restarts} attempts")

    solutions.sort(key=lambda t: t[0])
    best_obj, best_x = solutions[0]
    # two well-separated minima at the same objective mean a mirror ambiguity
    scale = float(np.linalg.norm(span))
    for obj, x in solutions[1:]:
        if obj <= best_obj + 1e-9 * max(1.0, best_obj) and (
            np.linalg.norm(x - best_x) > 1e-6 * scale
        ):
            err = DegenerateBeacons(
                "ambiguous multilateration: two symmetric minima found"
            )
            err.minima = [best_x, x]
            raise err
    return best_x
