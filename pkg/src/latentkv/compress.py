"""Balanced joint compression of no-rotary keys and values, and assembly of
the final latent-attention layer.

The no-rotary key activations typically carry much more energy than the
values; dividing the key projection by the norm ratio alpha (and scaling the
query-side map by alpha, which leaves logits unchanged) stops the joint PCA
basis from being dominated by the keys.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import MlaLayer, _check_finite
from .linalg import Array, canonical_signs, covariance, sym_eig
from .rotation import SplitKeyLayer


@dataclass(frozen=True)
class BalanceFactor:
    """Norm ratio between no-rotary key and value activations.

    ``alpha`` is mean_knope_norm / mean_v_norm, except in the degenerate
    case of an identically-zero no-rotary key (or an empty one), where
    balancing is a no-op and alpha is pinned to 1.
    """

    alpha: float
    mean_knope_norm: float
    mean_v_norm: float

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha <= 0.0:
            raise ValueError(f"alpha must be positive and finite, got {self.alpha}")


def compute_alpha(split: SplitKeyLayer, x: Array) -> BalanceFactor:
    """Mean per-token L2 norms of the no-rotary key and value activations."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("calibration stream must be a nonempty (n, D) matrix")
    kn = np.linalg.norm(x @ split.wdk_nope.T, axis=1)
    vn = np.linalg.norm(x @ split.wdv.T, axis=1)
    mean_k = float(np.mean(kn)) if kn.size else 0.0
    mean_v = float(np.mean(vn))
    if mean_v == 0.0:
        raise ValueError("value activations have zero norm; alpha undefined")
    alpha = mean_k / mean_v if mean_k > 0.0 else 1.0
    return BalanceFactor(alpha=alpha, mean_knope_norm=mean_k, mean_v_norm=mean_v)


def balance(split: SplitKeyLayer, factor: BalanceFactor) -> SplitKeyLayer:
    """Scale the no-rotary key down by alpha and its query-side map up by alpha.

    The two scalings cancel inside every logit, so outputs are unchanged;
    only the latent coordinates that the joint PCA sees move.
    """
    a = factor.alpha
    return SplitKeyLayer(
        wq=split.wq,
        wuk_rope=split.wuk_rope,
        wuk_nope=split.wuk_nope * a,
        wdk_rope=split.wdk_rope,
        wdk_nope=split.wdk_nope / a,
        wuv=split.wuv,
        wdv=split.wdv,
        wo=split.wo,
        rope=split.rope,
        heads=split.heads,
        groups=split.groups,
    )


@dataclass(frozen=True, eq=False)
class KvPcaBasis:
    """Centred PCA basis of the concatenated [k_nope; v] activations."""

    mean: Array  # (k_dims + v_dims,)
    basis: Array  # (k_dims + v_dims, r_kv), orthonormal columns
    captured_energy_fraction: float

    def __post_init__(self):
        object.__setattr__(self, "mean", _check_finite("mean", self.mean))
        object.__setattr__(self, "basis", _check_finite("basis", self.basis))
        if self.basis.ndim != 2 or self.mean.shape != (self.basis.shape[0],):
            raise ValueError("mean and basis dimensions do not match")
        if not 0.0 <= self.captured_energy_fraction <= 1.0 + 1e-12:
            raise ValueError("captured_energy_fraction must be in [0, 1]")

    @property
    def rank(self) -> int:
        return self.basis.shape[1]


def _pca_basis(samples: Array, rank: int, *, center: bool) -> tuple[Array, Array, float]:
    """Top-``rank`` eigenbasis of the (optionally centred) second moment.

    Returns (mean, basis, captured fraction); mean is zero when not
    centring.
    """
    n, dim = samples.shape
    if rank > dim:
        raise ValueError(f"rank {rank} exceeds dimension {dim}")
    if n < max(rank, 2):
        raise ValueError(f"need at least {max(rank, 2)} samples, got {n}")
    mean = samples.mean(axis=0) if center else np.zeros(dim)
    eig = sym_eig(covariance(samples - mean))
    vals = np.clip(eig.eigenvalues, 0.0, None)
    total = float(np.sum(vals))
    captured = float(np.sum(vals[:rank])) / total if total > 0.0 else 1.0
    basis = canonical_signs(eig.eigenvectors[:, :rank])
    return mean, basis, min(captured, 1.0)


def joint_kv_pca(balanced: SplitKeyLayer, x: Array, r_kv: int) -> KvPcaBasis:
    """Fit the joint latent basis on balanced [k_nope; v] activations."""
    x = np.asarray(x, dtype=np.float64)
    k_dims = balanced.wdk_nope.shape[0]
    v_dims = balanced.wdv.shape[0]
    if not 1 <= r_kv <= k_dims + v_dims:
        raise ValueError(f"r_kv must be in [1, {k_dims + v_dims}], got {r_kv}")
    c = np.hstack([x @ balanced.wdk_nope.T, x @ balanced.wdv.T])
    mean, basis, captured = _pca_basis(c, r_kv, center=True)
    return KvPcaBasis(mean=mean, basis=basis, captured_energy_fraction=captured)


@dataclass(frozen=True, eq=False)
class DecomposedKv:
    """Latent projections produced by the joint basis.

    ``value_offset`` is the value part of the mean component the truncated
    basis cannot represent; the matching key part is discarded because a
    key offset shared by all positions cancels in the softmax.
    """

    wdkv: Array  # (r_kv, D)
    wuk: Array  # (heads*head_dim, r_kv)
    wuv: Array  # (heads*head_dim, r_kv)
    value_offset: Array  # (groups*head_dim,)


def decompose_projections(balanced: SplitKeyLayer, basis: KvPcaBasis) -> DecomposedKv:
    """Compose the split projections with the joint basis.

    Down-projection: basis^T stacked on [wdk_nope; wdv].  Up-projections:
    the per-head key/value maps composed with the matching basis rows.
    """
    k_dims = balanced.wdk_nope.shape[0]
    v_dims = balanced.wdv.shape[0]
    if basis.basis.shape[0] != k_dims + v_dims:
        raise ValueError("basis dimension does not match the split layer")
    r = basis.basis
    down = np.vstack([balanced.wdk_nope, balanced.wdv])
    residual_mean = basis.mean - r @ (r.T @ basis.mean)
    return DecomposedKv(
        wdkv=r.T @ down,
        wuk=balanced.wuk_nope @ r[:k_dims],
        wuv=balanced.wuv @ r[k_dims:],
        value_offset=residual_mean[k_dims:],
    )


def assemble_mla(split: SplitKeyLayer, parts: DecomposedKv) -> MlaLayer:
    """Package the split layer and latent projections as a final MLA layer.

    The split layer scores with 1/sqrt(head_dim) while the assembled layer
    scores with 1/sqrt(d_nope + d_rope); both query blocks are scaled by
    sqrt((d_nope + d_rope)/head_dim) so logits are preserved.
    """
    h, d, dim = split.heads, split.head_dim, split.hidden_dim
    dr = split.d_rope
    scale = np.sqrt((d + dr) / d)

    wq_rope = np.einsum(
        "hdr,hdD->hrD", split.wuk_rope.reshape(h, d, dr), split.wq.reshape(h, d, dim)
    ).reshape(h * dr, dim)

    offset = np.einsum(
        "hdw,w->hd", split.wuv.reshape(h, d, split.wdv.shape[0]), parts.value_offset
    ).reshape(h * d)
    out_bias: Optional[Array] = split.wo @ offset
    if np.allclose(out_bias, 0.0, atol=1e-300):
        out_bias = None

    return MlaLayer(
        wdkv=parts.wdkv,
        wuk=parts.wuk,
        wuv=parts.wuv,
        wkr=split.wdk_rope.copy(),
        wq_nope=split.wq * scale,
        wq_rope=wq_rope * scale,
        wo=split.wo.copy(),
        rope=split.rope,
        heads=h,
        out_bias=out_bias,
    )


def compress_query(layer: MlaLayer, x: Array, r_q: int) -> tuple[MlaLayer, float]:
    """Factor the query path through an ``r_q``-dimensional latent.

    Uncentered PCA on the stacked query activations keeps the path linear
    (no query bias); at full rank the factors reproduce the direct weights
    exactly.  Returns the factored layer and the captured energy fraction.
    """
    x = np.asarray(x, dtype=np.float64)
    h, dn, dr = layer.heads, layer.d_nope, layer.d_rope
    stack = np.vstack([layer.wq_nope, layer.wq_rope])
    if not 1 <= r_q <= stack.shape[0]:
        raise ValueError(f"r_q must be in [1, {stack.shape[0]}], got {r_q}")
    q = x @ stack.T
    _, r_basis, captured = _pca_basis(q, r_q, center=False)
    recon = r_basis @ (r_basis.T @ stack)
    factored = MlaLayer(
        wdkv=layer.wdkv,
        wuk=layer.wuk,
        wuv=layer.wuv,
        wkr=layer.wkr,
        wq_nope=recon[: h * dn],
        wq_rope=recon[h * dn :],
        wo=layer.wo,
        rope=layer.rope,
        heads=h,
        wdq=r_basis.T @ stack,
        wuq=r_basis,
        out_bias=layer.out_bias,
    )
    return factored, captured


def value_reconstruction_error(
    k_acts: Array,
    v_acts: Array,
    r_kv: int,
    *,
    balanced: bool,
    weight_based: tuple[Array, Array] | None = None,
) -> float:
    """RMS error of the value activations after rank-``r_kv`` joint PCA.

    The basis is fitted on [k; v] activations (optionally norm-balanced), or
    on the stacked weight rows when ``weight_based`` supplies (wk, wv) —
    the weight-only variant assumes isotropic inputs.  The error is always
    measured on the unscaled value activations.
    """
    k = np.asarray(k_acts, dtype=np.float64)
    v = np.asarray(v_acts, dtype=np.float64)
    if k.shape[0] != v.shape[0]:
        raise ValueError("key and value activations need matching sample counts")
    alpha = 1.0
    if balanced:
        mean_k = float(np.mean(np.linalg.norm(k, axis=1))) if k.shape[1] else 0.0
        mean_v = float(np.mean(np.linalg.norm(v, axis=1)))
        if mean_k > 0.0 and mean_v > 0.0:
            alpha = mean_k / mean_v
    kb = k / alpha
    c = np.hstack([kb, v])
    if weight_based is None:
        mean, basis, _ = _pca_basis(c, r_kv, center=True)
    else:
        wk, wv = weight_based
        stacked = np.vstack([np.asarray(wk, dtype=np.float64) / alpha, np.asarray(wv, dtype=np.float64)])
        eig = sym_eig(stacked @ stacked.T)
        basis = canonical_signs(eig.eigenvectors[:, :r_kv])
        mean = np.zeros(c.shape[1])
    recon = mean + (c - mean) @ basis @ basis.T
    v_hat = recon[:, k.shape[1] :]
    return float(np.sqrt(np.mean((v_hat - v) ** 2)))
