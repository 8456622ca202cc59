"""Executable certification of every geometric claim the pipeline makes.

Each check draws seeded random instances, measures the worst deviation from
the claimed identity, and compares it against the claim's tolerance. The
suite runs on any parameter snapshot: the properties hold by construction,
not by training, so random parameters must certify as well as trained ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import pipeline as pl
from .geometry import (
    apply,
    compose,
    inverse,
    random_transform,
    rotation_error,
    translation_error,
)
from .multilateration import mul_objective, mul_solve
from .procrustes import pro_solve
from .taskgen import gen_ring_on_peg


@dataclass
class CheckRow:
    """One certified property: worst observed deviation vs its tolerance."""

    name: str
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


def _mul_rows(trials: int, rng: np.random.Generator) -> list[CheckRow]:
    worst_rec = worst_eqv = worst_obj = 0.0
    for _ in range(trials):
        beacons = rng.normal(size=(10, 3))
        target = 1.5 * rng.normal(size=3)
        radii = np.linalg.norm(beacons - target, axis=1)
        solved = mul_solve(radii, beacons)
        worst_rec = max(worst_rec, float(np.linalg.norm(solved - target)))
        worst_obj = max(worst_obj, mul_objective(radii, beacons, solved))
        t = random_transform(rng, max_translation=2.0)
        moved = mul_solve(radii, apply(t, beacons))
        worst_eqv = max(worst_eqv, float(np.linalg.norm(moved - apply(t, solved))))
    return [
        CheckRow("multilateration exact recovery", worst_rec, 1e-8),
        CheckRow("multilateration SE(3) equivariance", worst_eqv, 1e-8),
        CheckRow("multilateration residual optimality (consistent)", worst_obj, 1e-10),
    ]


def _pro_rows(trials: int, rng: np.random.Generator) -> list[CheckRow]:
    worst_rec = worst_eqv = worst_det = 0.0
    for _ in range(trials):
        p = rng.normal(size=(12, 3))
        w = rng.uniform(0.1, 2.0, 12)
        t_true = random_transform(rng, max_translation=2.0)
        q = apply(t_true, p)
        est = pro_solve(p, q, w)
        worst_rec = max(worst_rec, rotation_error(est, t_true))

        ta = random_transform(rng, max_translation=2.0)
        tb = random_transform(rng, max_translation=2.0)
        moved = pro_solve(apply(ta, p), apply(tb, q), w)
        expected = compose(tb, compose(est, inverse(ta)))
        worst_eqv = max(worst_eqv, rotation_error(moved, expected))

        reflected = q @ np.diag([1.0, 1.0, -1.0])
        noisy = q + 0.3 * rng.normal(size=q.shape)
        for target in (q, reflected, noisy):
            det = np.linalg.det(pro_solve(p, target, w).rotation)
            worst_det = max(worst_det, abs(det - 1.0))
    return [
        CheckRow("alignment exact recovery (deg)", worst_rec, 1e-9),
        CheckRow("alignment two-sided equivariance (deg)", worst_eqv, 1e-7),
        CheckRow("alignment rotation always proper", worst_det, 1e-12),
    ]


def _kernel_rows(
    trials: int, rng: np.random.Generator, params: enc.EncoderParams
) -> list[CheckRow]:
    d = params.d
    worst_sym = 0.0
    for _ in range(max(trials, 10)):
        x = rng.normal(size=d)
        y = rng.normal(size=d)
        diff = enc.kernel_eval(x, y, params).item() - enc.kernel_eval(y, x, params).item()
        worst_sym = max(worst_sym, abs(diff))

    n = params.k_neighbors + 6
    pa = rng.normal(size=(n, 3))
    pb = rng.normal(size=(n + 4, 3)) + np.array([1.5, 0.0, 0.0])

    def chain(a, b):
        fa = enc.encode(a, "A", params)
        fb = enc.encode(b, "B", params)
        fa_hat, fb_hat = enc.cross_attention(fa, fb, params)
        return enc.kernel_matrix(fa_hat, fb_hat, params, sample_k="all").entries

    base = chain(pa, pb)
    worst_inv = 0.0
    min_entry = float(base.min())
    for _ in range(trials):
        ta = random_transform(rng, max_translation=3.0)
        tb = random_transform(rng, max_translation=3.0)
        moved = chain(apply(ta, pa), apply(tb, pb))
        worst_inv = max(worst_inv, float(np.max(np.abs(moved - base))))
        min_entry = min(min_entry, float(moved.min()))
    return [
        CheckRow("kernel symmetry (exact)", worst_sym, 0.0),
        CheckRow("kernel SE(3) invariance", worst_inv, 1e-9),
        CheckRow("kernel positivity (margin below)", max(0.0, -min_entry), 0.0),
    ]


def _end_to_end_rows(
    trials: int, rng: np.random.Generator, params: enc.EncoderParams
) -> list[CheckRow]:
    n = max(96, params.k_neighbors + 2)
    pa, pb = gen_ring_on_peg(seed=17, n_points=n)
    sample_k = n
    base = pl.cross_pose(pa, pb, params, sample_k=sample_k, rng_seed=3)
    worst_rot = worst_tr = 0.0
    for _ in range(trials):
        ta = random_transform(rng, max_translation=10.0)
        tb = random_transform(rng, max_translation=10.0)
        moved = pl.cross_pose(
            apply(ta, pa), apply(tb, pb), params, sample_k=sample_k, rng_seed=3
        )
        expected = compose(tb, compose(base.transform, inverse(ta)))
        worst_rot = max(worst_rot, rotation_error(moved.transform, expected))
        worst_tr = max(worst_tr, translation_error(moved.transform, expected, pa))
    return [
        CheckRow("end-to-end equivariance, rotation (deg)", worst_rot, 1e-5),
        CheckRow("end-to-end equivariance, translation", worst_tr, 1e-7),
    ]


def _gradient_rows(rng: np.random.Generator, params: enc.EncoderParams) -> list[CheckRow]:
    d = params.d
    x = ad.Tensor(rng.normal(size=d))
    y_arr = rng.normal(size=d)
    kernel_dev = ad.gradient_check(
        lambda t: enc.kernel_eval(t, y_arr, params), x
    )

    fa = ad.Tensor(rng.normal(size=(2, d)))
    fb = ad.Tensor(rng.normal(size=(3, d)))

    def attn_loss(t):
        a_hat, b_hat = enc.cross_attention(t, fb, params)
        return ad.add(ad.mean(ad.square(a_hat)), ad.mean(ad.square(b_hat)))

    attention_dev = ad.gradient_check(attn_loss, fa)

    beacons = rng.normal(size=(6, 3))
    anchor = rng.normal(size=(2, 3))
    radii = ad.Tensor(np.linalg.norm(anchor[:, None, :] - beacons[None], axis=2))
    from .multilateration import mul_batch_diff

    def mul_loss(t):
        return ad.mean(ad.square(mul_batch_diff(t, beacons)))

    mul_dev = ad.gradient_check(mul_loss, radii)
    return [
        CheckRow("kernel gradient vs finite differences", kernel_dev, 1e-4),
        CheckRow("attention gradient vs finite differences", attention_dev, 1e-4),
        CheckRow("multilateration gradient vs finite differences", mul_dev, 1e-4),
    ]


def run_suite(
    params: enc.EncoderParams | None = None, trials: int = 100, seed: int = 0
) -> list[CheckRow]:
    """All property checks; deterministic per (params, trials, seed)."""
    if trials < 1:
        raise ValueError("trials must be positive")
    rng = np.random.default_rng(seed)
    if params is None:
        params = enc.init_params(seed=seed, d=16, k_neighbors=8)
        scale = np.random.default_rng(seed + 1)
        for key in ("wq", "wk", "wv", "wo"):
            params.gamma[key].array[:] = 0.3 * scale.normal(size=(params.d, params.d))
    rows = []
    rows += _mul_rows(trials, rng)
    rows += _pro_rows(trials, rng)
    rows += _kernel_rows(trials, rng, params)
    rows += _end_to_end_rows(trials, rng, params)
    rows += _gradient_rows(rng, params)
    return rows


def format_table(rows: list[CheckRow]) -> str:
    width = max(len(r.name) for r in rows) + 2
    lines = [f"{'check':<{width}}{'worst':>12}  {'tolerance':>10}  status"]
    for r in rows:
        status = "pass" if r.passed else "FAIL"
        lines.append(
            f"{r.name:<{width}}{r.worst:>12.3e}  {r.tolerance:>10.1e}  {status}"
        )
    n_pass = sum(r.passed for r in rows)
    verdict = "PASS" if n_pass == len(rows) else "FAIL"
    lines.append(f"overall: {verdict} ({n_pass}/{len(rows)})")
    return "\n".join(lines)
