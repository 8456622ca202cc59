"""Invariant per-point features, cross-attention, and the goal-distance kernel.

Every feature is built from pairwise distances only, so the whole feature
chain is exactly SE(3)-invariant rather than invariant-by-training. No
normalization layers appear anywhere: batch statistics would couple outputs
across instances and break both determinism and the invariance certification.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import (
    CheckpointFormatError,
    SampleTooLarge,
    TooFewPoints,
    WidthNotDivisible,
)
from .geometry import PointCloud, pairwise_distances

_CHECKPOINT_MAGIC = b"RPKT"
_CHECKPOINT_VERSION = 1

# kernel perceptron hidden widths; the encoders use two hidden layers of 64
_KERNEL_HIDDEN = (300, 100)
_ENCODER_HIDDEN = (64, 64)


def _points(p) -> np.ndarray:
    return p.points if isinstance(p, PointCloud) else np.asarray(p, dtype=np.float64)


def invariant_descriptors(p, k_neighbors: int) -> np.ndarray:
    """Per-point geometric descriptors that depend on pairwise distances only.

    Each row is [distance to the cloud centroid, the sorted distances to the
    k nearest neighbors, the three eigenvalues (descending) of the covariance
    of the point plus those neighbors], giving k + 4 columns. Rigidly moving
    the cloud leaves every entry unchanged up to float rounding.

    Args:
        p: (N, 3) points or a PointCloud, N >= k_neighbors + 1.
        k_neighbors: neighborhood size.

    Raises:
        TooFewPoints: when N < k_neighbors + 1.
    """
    pts = _points(p)
    n = pts.shape[0]
    if n < k_neighbors + 1:
        raise TooFewPoints(f"{n} points cannot support {k_neighbors} neighbors")

    centroid_dist = np.linalg.norm(pts - pts.mean(axis=0), axis=1)

    dists = pairwise_distances(pts, pts)
    order = np.argsort(dists, axis=1)[:, 1 : k_neighbors + 1]
    knn_dists = np.sort(np.take_along_axis(dists, order, axis=1), axis=1)

    # local patch = the point and its neighbors; eigenvalues of its covariance
    patch = np.concatenate([pts[:, None, :], pts[order]], axis=1)
    centered = patch - patch.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / patch.shape[1]
    eigs = np.linalg.eigvalsh(cov)[:, ::-1]

    return np.column_stack([centroid_dist, knn_dists, eigs])


@dataclass
class EncoderParams:
    """All trainable parameter groups plus the architecture they imply.

    theta_a / theta_b: per-object encoder perceptrons, alternating (W, b).
    gamma: cross-attention projections wq, wk, wv, wo shared by both
    attention directions. psi: kernel perceptron, alternating (W, b).
    """

    d: int
    heads: int
    k_neighbors: int
    share_encoders: bool
    theta_a: list[ad.Tensor]
    theta_b: list[ad.Tensor]
    gamma: dict[str, ad.Tensor]
    psi: list[ad.Tensor]

    def named_tensors(self) -> list[tuple[str, ad.Tensor]]:
        named = [(f"theta_a.{i}", t) for i, t in enumerate(self.theta_a)]
        if not self.share_encoders:
            named += [(f"theta_b.{i}", t) for i, t in enumerate(self.theta_b)]
        named += [(f"gamma.{k}", self.gamma[k]) for k in sorted(self.gamma)]
        named += [(f"psi.{i}", t) for i, t in enumerate(self.psi)]
        return named

    def trainable(self) -> list[ad.Tensor]:
        return [t for _, t in self.named_tensors()]


def _mlp_layers(rng, widths: list[int], final_std: float | None = None) -> list[ad.Tensor]:
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        last = i == len(widths) - 2
        if last and final_std is not None:
            std = final_std
        elif last:
            std = np.sqrt(1.0 / fan_in)
        else:
            std = np.sqrt(2.0 / fan_in)  # He init for the relu layers
        layers.append(ad.Tensor(rng.normal(size=(fan_in, fan_out)) * std, requires_grad=True))
        layers.append(ad.Tensor(np.zeros(fan_out), requires_grad=True))
    return layers


def softplus_inverse(y: float) -> float:
    """x with softplus(x) = y, for y > 0."""
    if y <= 0:
        raise ValueError("softplus is strictly positive")
    return float(y + np.log1p(-np.exp(-y)))


def init_params(
    seed: int,
    d: int = 32,
    heads: int = 4,
    k_neighbors: int = 16,
    share_encoders: bool = False,
    descriptor_stats: tuple[np.ndarray, np.ndarray] | None = None,
    kernel_mean: float | None = None,
) -> EncoderParams:
    """Fresh parameters, deterministic per seed.

    Args:
        descriptor_stats: optional (mean, std) of training descriptors; the
            standardization is folded into the first encoder layer, so the
            parameter layout is unchanged and invariance is unaffected.
        kernel_mean: optional typical goal distance; sets the kernel output
            bias so an untrained kernel already predicts the right scale.
    """
    if d % heads != 0:
        raise WidthNotDivisible(f"feature width {d} not divisible by {heads} heads")
    rng = np.random.default_rng(seed)
    h = k_neighbors + 4

    def encoder_stack():
        layers = _mlp_layers(rng, [h, *_ENCODER_HIDDEN, d])
        if descriptor_stats is not None:
            mu, sigma = descriptor_stats
            sigma = np.maximum(np.asarray(sigma, dtype=np.float64), 1e-12)
            w0, b0 = layers[0].array, layers[1].array
            b0 -= (np.asarray(mu) / sigma) @ w0
            w0 /= sigma[:, None]
        return layers

    theta_a = encoder_stack()
    theta_b = theta_a if share_encoders else encoder_stack()

    scale = np.sqrt(1.0 / d)
    gamma = {
        name: ad.Tensor(rng.normal(size=(d, d)) * scale, requires_grad=True)
        for name in ("wq", "wk", "wv")
    }
    # zero output projection: attention starts as the identity residual
    gamma["wo"] = ad.Tensor(np.zeros((d, d)), requires_grad=True)

    # final-layer spread well above rounding scale: a near-constant fresh
    # kernel would make the downstream alignment nearly degenerate
    psi = _mlp_layers(rng, [2 * d, *_KERNEL_HIDDEN, 1], final_std=0.3)
    if kernel_mean is not None:
        psi[-1].array[:] = softplus_inverse(kernel_mean)
    return EncoderParams(d, heads, k_neighbors, share_encoders, theta_a, theta_b, gamma, psi)


def calibrate_kernel_scale(
    params: EncoderParams,
    feature_pairs: list[tuple[np.ndarray, np.ndarray]],
    target_std: float = 0.1,
    seed: int = 0,
    pairs_per_cloud: int = 2048,
) -> None:
    """Pin the kernel head's initial output distribution on real feature pairs.

    Rescales the final weight and recenters the bias in place so symmetric
    pre-softplus values have roughly target_std spread around the configured
    typical-distance level. A fresh head's spread otherwise depends on the
    incidental feature norm and can start far wider than the true distance
    spread, which leaves most softplus units saturated at zero and stalls
    training from the first step.
    """
    rng = np.random.default_rng(seed)

    def hidden(x: np.ndarray) -> np.ndarray:
        n_layers = len(params.psi) // 2
        for k in range(n_layers - 1):
            x = np.maximum(x @ params.psi[2 * k].array + params.psi[2 * k + 1].array, 0.0)
        return x

    vals = []
    for fa, fb in feature_pairs:
        i = rng.integers(0, fa.shape[0], size=pairs_per_cloud)
        j = rng.integers(0, fb.shape[0], size=pairs_per_cloud)
        h_ij = hidden(np.concatenate([fa[i], fb[j]], axis=1))
        h_ji = hidden(np.concatenate([fb[j], fa[i]], axis=1))
        vals.append(0.5 * (h_ij + h_ji) @ params.psi[-2].array)
    stacked = np.concatenate(vals)
    spread = float(stacked.std())
    if spread > 0:
        scale = target_std / spread
        params.psi[-2].array *= scale
        params.psi[-1].array -= scale * float(stacked.mean())


def _run_mlp(x: ad.Tensor, layers: list[ad.Tensor], stable: bool = False) -> ad.Tensor:
    product = ad.matmul_stable if stable else ad.matmul
    n_layers = len(layers) // 2
    for i in range(n_layers):
        x = ad.add(product(x, layers[2 * i]), layers[2 * i + 1])
        if i < n_layers - 1:
            x = ad.relu(x)
    return x


def encode(
    p,
    side: str,
    params: EncoderParams,
    descriptors: np.ndarray | None = None,
) -> ad.Tensor:
    """Invariant (N, d) features for one object's cloud.

    Args:
        p: points or PointCloud.
        side: "A" or "B", selecting the per-object perceptron.
        descriptors: precomputed invariant_descriptors output, to avoid
            recomputing neighborhoods every training step.
    """
    if side not in ("A", "B"):
        raise ValueError(f"side must be 'A' or 'B', got {side!r}")
    if descriptors is None:
        descriptors = invariant_descriptors(p, params.k_neighbors)
    layers = params.theta_a if side == "A" else params.theta_b
    return _run_mlp(ad.Tensor(descriptors), layers)


def cross_attention(
    fa: ad.Tensor, fb: ad.Tensor, params: EncoderParams
) -> tuple[ad.Tensor, ad.Tensor]:
    """Multi-head attention each way between the two feature sets.

    A attends to B (queries from A, keys/values from B) and symmetrically B
    attends to A, with the projection weights shared by both directions. The
    returned features are the residual sums phi + phi_cross, so zeroed value
    or output projections leave the inputs untouched.
    """
    d = params.d
    if fa.shape[1] != d or fb.shape[1] != d:
        raise ValueError("feature width does not match params.d")
    if d % params.heads != 0:
        raise WidthNotDivisible(f"width {d} not divisible by {params.heads} heads")
    dh = d // params.heads
    scale = 1.0 / np.sqrt(dh)
    wq, wk, wv, wo = (params.gamma[k] for k in ("wq", "wk", "wv", "wo"))

    def attend(queries: ad.Tensor, keys: ad.Tensor, values: ad.Tensor) -> ad.Tensor:
        q = ad.matmul(queries, wq)
        k = ad.matmul(keys, wk)
        v = ad.matmul(values, wv)
        contexts = []
        for head in range(params.heads):
            lo, hi = head * dh, (head + 1) * dh
            qh = ad.slice_axis(q, 1, lo, hi)
            kh = ad.slice_axis(k, 1, lo, hi)
            vh = ad.slice_axis(v, 1, lo, hi)
            attn = ad.softmax_rows(ad.multiply(ad.matmul(qh, ad.transpose(kh)), scale))
            contexts.append(ad.matmul(attn, vh))
        return ad.matmul(ad.concat(contexts, axis=1), wo)

    fa_hat = ad.add(fa, attend(fa, fb, fb))
    fb_hat = ad.add(fb, attend(fb, fa, fa))
    return fa_hat, fb_hat


# Pair rows go through the kernel perceptron in bounded blocks (memory), via
# the batch-invariant matrix product: each kernel value is bit-identical no
# matter which other pairs are evaluated alongside it, which is what lets a
# sampled matrix match the full matrix entry-for-entry.
_PAIR_CHUNK = 8192


def _kernel_raw(pairs: ad.Tensor, params: EncoderParams) -> ad.Tensor:
    n = pairs.shape[0]
    if n <= _PAIR_CHUNK:
        return _run_mlp(pairs, params.psi, stable=True)
    outs = [
        _run_mlp(ad.slice_axis(pairs, 0, lo, min(lo + _PAIR_CHUNK, n)), params.psi, stable=True)
        for lo in range(0, n, _PAIR_CHUNK)
    ]
    return ad.concat(outs, axis=0)


def kernel_eval(phi_i, phi_j, params: EncoderParams) -> ad.Tensor:
    """Symmetric positive kernel value for one feature pair.

    softplus of the average of the pair perceptron run in both argument
    orders; symmetry is exact (float addition commutes), positivity comes
    from the softplus range. Uses the same batch-invariant evaluation as
    kernel_matrix, so the value matches the corresponding matrix entry
    bit-for-bit.
    """
    xi = phi_i if isinstance(phi_i, ad.Tensor) else ad.Tensor(np.asarray(phi_i))
    xj = phi_j if isinstance(phi_j, ad.Tensor) else ad.Tensor(np.asarray(phi_j))
    xi = ad.reshape(xi, (1, -1))
    xj = ad.reshape(xj, (1, -1))
    m_ij = _kernel_raw(ad.concat([xi, xj], axis=1), params)
    m_ji = _kernel_raw(ad.concat([xj, xi], axis=1), params)
    out = ad.softplus(ad.multiply(ad.add(m_ij, m_ji), 0.5))
    return ad.reshape(out, ())


@dataclass
class KernelMatrix:
    """Predicted pairwise goal distances with index maps back to the clouds."""

    entries: np.ndarray
    rows: np.ndarray  # indices into cloud A
    cols: np.ndarray  # indices into cloud B
    tensor: ad.Tensor | None = field(default=None, repr=False)


def _pair_matrix(fa_s: ad.Tensor, fb_s: ad.Tensor, params: EncoderParams) -> ad.Tensor:
    ka, kb = fa_s.shape[0], fb_s.shape[0]
    a_rep = ad.repeat_rows(fa_s, kb)
    b_til = ad.tile_rows(fb_s, ka)
    m_ij = _kernel_raw(ad.concat([a_rep, b_til], axis=1), params)
    m_ji = _kernel_raw(ad.concat([b_til, a_rep], axis=1), params)
    sym = ad.multiply(ad.add(m_ij, m_ji), 0.5)
    return ad.reshape(ad.softplus(sym), (ka, kb))


def kernel_matrix(
    fa: ad.Tensor,
    fb: ad.Tensor,
    params: EncoderParams,
    sample_k: int | str | None = "all",
    rng_seed: int = 0,
) -> KernelMatrix:
    """Kernel values for sampled feature rows of A against sampled rows of B.

    Sampling (without replacement, K row indices then K column indices from
    one seeded stream) happens only here; everything upstream runs on the
    full-resolution clouds. sample_k = "all" or None keeps every pair.
    """
    na, nb = fa.shape[0], fb.shape[0]
    if sample_k in (None, "all"):
        rows = np.arange(na)
        cols = np.arange(nb)
    else:
        k = int(sample_k)
        if k > min(na, nb):
            raise SampleTooLarge(f"sample_k={k} exceeds cloud sizes ({na}, {nb})")
        rng = np.random.default_rng(rng_seed)
        rows = rng.choice(na, size=k, replace=False)
        cols = rng.choice(nb, size=k, replace=False)

    fa_s = ad.gather_rows(fa, rows)
    fb_s = ad.gather_rows(fb, cols)
    out = _pair_matrix(fa_s, fb_s, params)
    return KernelMatrix(entries=out.array, rows=rows, cols=cols, tensor=out)


def save_params(params: EncoderParams, path) -> None:
    """Write a versioned binary checkpoint (magic RPKT, named float64 arrays)."""
    named = [(name, t.array) for name, t in params.named_tensors()]
    named += [
        ("meta.d", np.float64(params.d)),
        ("meta.heads", np.float64(params.heads)),
        ("meta.k_neighbors", np.float64(params.k_neighbors)),
        ("meta.share_encoders", np.float64(params.share_encoders)),
    ]
    with open(path, "wb") as fh:
        fh.write(_CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", _CHECKPOINT_VERSION, len(named)))
        for name, arr in named:
            arr = np.asarray(arr, dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes())


def _read_exact(fh, count: int) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointFormatError("truncated checkpoint file")
    return data


def load_params(path) -> EncoderParams:
    """Read a checkpoint written by save_params.

    Raises:
        CheckpointFormatError: wrong magic, unsupported version, or truncation.
    """
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointFormatError(f"cannot open checkpoint: {exc}") from exc
    with fh:
        if _read_exact(fh, 4) != _CHECKPOINT_MAGIC:
            raise CheckpointFormatError("not a parameter checkpoint (bad magic)")
        version, count = struct.unpack("<II", _read_exact(fh, 8))
        if version != _CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4))
            dims = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank)) if rank else ()
            size = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8")
            arrays[name] = data.reshape(dims).copy()

    try:
        d = int(arrays.pop("meta.d"))
        heads = int(arrays.pop("meta.heads"))
        k_neighbors = int(arrays.pop("meta.k_neighbors"))
        share = bool(int(arrays.pop("meta.share_encoders")))

        def stack(prefix: str) -> list[ad.Tensor]:
            names = sorted(
                (n for n in arrays if n.startswith(prefix)),
                key=lambda n: int(n.split(".")[1]),
            )
            return [ad.Tensor(arrays[n], requires_grad=True) for n in names]

        theta_a = stack("theta_a.")
        theta_b = theta_a if share else stack("theta_b.")
        gamma = {
            key: ad.Tensor(arrays[f"gamma.{key}"], requires_grad=True)
            for key in ("wq", "wk", "wv", "wo")
        }
        psi = stack("psi.")
    except KeyError as exc:
        raise CheckpointFormatError(f"checkpoint missing array {exc}") from exc
    if not theta_a or not psi:
        raise CheckpointFormatError("checkpoint missing parameter stacks")
    return EncoderParams(d, heads, k_neighbors, share, theta_a, theta_b, gamma, psi)
