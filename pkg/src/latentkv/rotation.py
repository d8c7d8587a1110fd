"""Per-frequency joint rotations that concentrate key energy, and the
rotary/no-rotary split of the merged key head.

Within the merged key head, frequency l of every block occupies dims
2l + b*head_dim (real part) and 2l+1 + b*head_dim (imaginary part).  Any
orthogonal matrix applied identically to the real and imaginary slice of
one frequency leaves rotary logits unchanged, because both slices rotate by
the same angle at every position.  Fitting those matrices by PCA of the
summed real/imaginary second moments pushes key energy into the leading
block, after which the trailing blocks can drop their rotary encoding and
join the values for compression.

Frequency folding widens the slices: schedules whose angles are constant
over groups of ``group_size`` consecutive frequencies admit one joint
rotation per group.  Folding a non-degenerate schedule is the only
approximation this module makes before the split itself.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .attention import CacheSpec, _check_finite, causal_softmax
from .linalg import Array, canonical_signs, covariance, orthonormal_defect, sym_eig
from .rewrites import MergedGqaLayer
from .rope import RopeSchedule, rotate_rows

ROTATION_DEFECT_TOL = 1e-8


def _group_slices(head_dim: int, groups: int, group_size: int):
    """Index sets (real, imag) per frequency group, sorted ascending.

    Sorted order is block-major: slot j of a slice maps to block j //
    group_size, frequency offset j % group_size.  The leading ``m`` slots of
    a rotated slice therefore land in the leading blocks of the merged head.
    """
    n_pairs = head_dim // 2
    if group_size < 1 or n_pairs % group_size != 0:
        raise ValueError(f"group_size {group_size} does not divide {n_pairs} frequencies")
    blocks = np.arange(groups) * head_dim
    for start in range(0, n_pairs, group_size):
        freqs = np.arange(start, start + group_size)
        real = np.sort(np.concatenate([2 * freqs + b for b in blocks]))
        yield real, real + 1


@dataclass(frozen=True, eq=False)
class FreqStats:
    """Uncentered second moments of merged-key slices, one pair per group.

    Accumulated on pre-rotary key activations; the summed real+imaginary
    moment is identical pre- and post-rotary, so either works.  Stats merge
    exactly across shards by adding sums and counts.
    """

    group_size: int
    groups: int  # key/value heads g of the source layer
    head_dim: int
    sample_count: int
    sigma_x: Array  # (n_groups, m*g, m*g)
    sigma_y: Array
    dim_sq_sums: Array  # (groups*head_dim,) squared activation sums per dim

    def __post_init__(self):
        object.__setattr__(self, "sigma_x", _check_finite("sigma_x", self.sigma_x))
        object.__setattr__(self, "sigma_y", _check_finite("sigma_y", self.sigma_y))
        object.__setattr__(self, "dim_sq_sums", _check_finite("dim_sq_sums", self.dim_sq_sums))
        n_groups = (self.head_dim // 2) // self.group_size
        width = self.group_size * self.groups
        if self.sigma_x.shape != (n_groups, width, width):
            raise ValueError("sigma_x has inconsistent shape")
        if self.sigma_y.shape != self.sigma_x.shape:
            raise ValueError("sigma_y shape must match sigma_x")
        if self.dim_sq_sums.shape != (self.groups * self.head_dim,):
            raise ValueError("dim_sq_sums has inconsistent shape")
        if self.sample_count < 0:
            raise ValueError("sample_count must be >= 0")

    @property
    def n_groups(self) -> int:
        return (self.head_dim // 2) // self.group_size

    def dim_rms(self) -> Array:
        """Root-mean-square key activation per merged-head dimension."""
        if self.sample_count == 0:
            return np.zeros_like(self.dim_sq_sums)
        return np.sqrt(self.dim_sq_sums / self.sample_count)


def collect_key_stats(layer: MergedGqaLayer, x: Array, group_size: int) -> FreqStats:
    """Accumulate slice second moments of the merged key over a token stream."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.hidden_dim:
        raise ValueError(f"stream must be (n, {layer.hidden_dim}), got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("calibration stream is empty")
    d, g = layer.head_dim, layer.groups
    keys = x @ layer.wk.T  # pre-rotary merged keys, (n, g*d)
    sx, sy = [], []
    for real, imag in _group_slices(d, g, group_size):
        kx = keys[:, real]
        ky = keys[:, imag]
        sx.append(kx.T @ kx)
        sy.append(ky.T @ ky)
    return FreqStats(
        group_size=group_size,
        groups=g,
        head_dim=d,
        sample_count=x.shape[0],
        sigma_x=np.stack(sx),
        sigma_y=np.stack(sy),
        dim_sq_sums=np.sum(keys**2, axis=0),
    )


def merge_stats(a: FreqStats, b: FreqStats) -> FreqStats:
    """Combine stats collected on two shards; exact up to float addition."""
    if (a.group_size, a.groups, a.head_dim) != (b.group_size, b.groups, b.head_dim):
        raise ValueError("stats shapes do not match")
    return FreqStats(
        group_size=a.group_size,
        groups=a.groups,
        head_dim=a.head_dim,
        sample_count=a.sample_count + b.sample_count,
        sigma_x=a.sigma_x + b.sigma_x,
        sigma_y=a.sigma_y + b.sigma_y,
        dim_sq_sums=a.dim_sq_sums + b.dim_sq_sums,
    )


@dataclass(frozen=True, eq=False)
class RotationSet:
    """One orthogonal matrix per frequency group, columns sorted by energy."""

    group_size: int
    rotations: tuple[Array, ...]

    def __post_init__(self):
        rots = tuple(np.asarray(u, dtype=np.float64) for u in self.rotations)
        for u in rots:
            if u.ndim != 2 or u.shape[0] != u.shape[1]:
                raise ValueError("rotations must be square")
            if orthonormal_defect(u) > 1e-10:
                raise ValueError("rotation is not orthogonal")
        object.__setattr__(self, "rotations", rots)


def solve_rotations(stats: FreqStats) -> RotationSet:
    """Energy-concentrating rotations from the summed slice moments.

    Per group the eigenvectors of sigma_x + sigma_y, in descending
    eigenvalue order, maximise the energy captured by any leading subset of
    rotated coordinates.
    """
    rots = []
    for grp in range(stats.n_groups):
        eig = sym_eig(stats.sigma_x[grp] + stats.sigma_y[grp])
        rots.append(canonical_signs(eig.eigenvectors))
    return RotationSet(group_size=stats.group_size, rotations=tuple(rots))


def rotation_matrix(layer_head_dim: int, groups: int, rot: RotationSet) -> Array:
    """Expand a RotationSet into the full (g*d, g*d) coordinate transform."""
    width = groups * layer_head_dim
    expected = (layer_head_dim // 2) // rot.group_size
    if len(rot.rotations) != expected:
        raise ValueError(f"expected {expected} rotations, got {len(rot.rotations)}")
    p = np.eye(width)
    for (real, imag), u in zip(_group_slices(layer_head_dim, groups, rot.group_size), rot.rotations):
        if u.shape[0] != real.shape[0]:
            raise ValueError("rotation size does not match slice width")
        p[np.ix_(real, real)] = u.T
        p[np.ix_(imag, imag)] = u.T
    return p


def fold_frequencies(layer: MergedGqaLayer, group_size: int) -> MergedGqaLayer:
    """Approximate each group of consecutive frequencies by its first angle.

    Identity for group_size 1 and for schedules already constant within the
    groups; otherwise the output of this step is where folding error enters.
    """
    folded = layer.rope.fold(group_size)
    if np.array_equal(folded.thetas, layer.rope.thetas):
        return layer
    return MergedGqaLayer(
        wq=layer.wq,
        wuk=layer.wuk,
        wk=layer.wk,
        wuv=layer.wuv,
        wv=layer.wv,
        wo=layer.wo,
        rope=folded,
        heads=layer.heads,
        groups=layer.groups,
    )


def apply_rotations(layer: MergedGqaLayer, rot: RotationSet) -> MergedGqaLayer:
    """Rotate the merged key head and the matching query-side columns.

    Requires the layer's angles to be constant within every rotation group
    (always true for group_size 1; fold the schedule first otherwise) —
    that is exactly the condition under which logits are invariant for any
    orthogonal choice, not just the fitted one.
    """
    m = rot.group_size
    thetas = layer.rope.thetas
    if m > 1:
        by_group = thetas.reshape(-1, m)
        if not np.all(by_group == by_group[:, :1]):
            raise ValueError(
                "rotary angles vary within a rotation group; fold the schedule first"
            )
    for u in rot.rotations:
        if orthonormal_defect(u) > ROTATION_DEFECT_TOL:
            raise ValueError("rotation orthonormal defect exceeds tolerance")
    p = rotation_matrix(layer.head_dim, layer.groups, rot)
    return MergedGqaLayer(
        wq=layer.wq,
        wuk=layer.wuk @ p.T,
        wk=p @ layer.wk,
        wuv=layer.wuv,
        wv=layer.wv,
        wo=layer.wo,
        rope=layer.rope,
        heads=layer.heads,
        groups=layer.groups,
    )


@dataclass(frozen=True, eq=False)
class SplitKeyLayer:
    """Merged layer whose key head is split into rotary and no-rotary parts.

    The leading ``d_rope`` rotated key dims keep their rotary encoding and
    are shared by every query head; the remaining dims drop it.  Stacking
    [wdk_rope; wdk_nope] reproduces the rotated key projection exactly —
    the split changes the forward only through the dropped rotary factors.
    """

    wq: Array  # (heads*head_dim, D)
    wuk_rope: Array  # (heads*head_dim, d_rope)
    wuk_nope: Array  # (heads*head_dim, groups*head_dim - d_rope)
    wdk_rope: Array  # (d_rope, D)
    wdk_nope: Array  # (groups*head_dim - d_rope, D)
    wuv: Array  # (heads*head_dim, groups*head_dim)
    wdv: Array  # (groups*head_dim, D)
    wo: Array  # (D, heads*head_dim)
    rope: RopeSchedule  # over d_rope
    heads: int
    groups: int

    def __post_init__(self):
        for name in ("wq", "wuk_rope", "wuk_nope", "wdk_rope", "wdk_nope", "wuv", "wdv", "wo"):
            object.__setattr__(self, name, _check_finite(name, getattr(self, name)))
        h, g = self.heads, self.groups
        d = self.wq.shape[0] // h
        dim = self.wq.shape[1]
        dr = self.wdk_rope.shape[0]
        nn = self.wdk_nope.shape[0]
        if dr + nn != g * d:
            raise ValueError("rope and nope key rows must partition groups*head_dim")
        if self.wuk_rope.shape != (h * d, dr) or self.wuk_nope.shape != (h * d, nn):
            raise ValueError("wuk splits must be (heads*head_dim, d_rope/-nope)")
        if self.wdk_rope.shape[1] != dim or self.wdk_nope.shape != (nn, dim):
            raise ValueError("wdk splits must project from D")
        if self.wuv.shape != (h * d, g * d) or self.wdv.shape != (g * d, dim):
            raise ValueError("value projections have inconsistent shapes")
        if self.wo.shape != (dim, h * d):
            raise ValueError("wo must be (D, heads*head_dim)")
        if self.rope.head_dim != dr:
            raise ValueError(f"rope covers {self.rope.head_dim} dims, d_rope is {dr}")

    @property
    def hidden_dim(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.heads

    @property
    def d_rope(self) -> int:
        return self.wdk_rope.shape[0]

    @property
    def d_nope_total(self) -> int:
        return self.wdk_nope.shape[0]

    def cache_spec(self, dtype_bytes: int = 4) -> CacheSpec:
        return CacheSpec(
            per_token_scalars=2 * self.groups * self.head_dim,
            dtype_bytes=dtype_bytes,
            label="split",
        )

    def forward(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.hidden_dim:
            raise ValueError(f"input must be (T, {self.hidden_dim}), got {x.shape}")
        t, h, g, d = x.shape[0], self.heads, self.groups, self.head_dim
        dr, nn = self.d_rope, self.d_nope_total
        pos = np.arange(t)

        q = (x @ self.wq.T).reshape(t, h, d)
        scores = np.zeros((h, t, t))
        if dr:
            q_r = np.einsum("thd,hdr->thr", q, self.wuk_rope.reshape(h, d, dr))
            q_r = rotate_rows(q_r.reshape(t * h, dr), np.repeat(pos, h), self.rope.thetas)
            k_r = rotate_rows(x @ self.wdk_rope.T, pos, self.rope.thetas)
            scores += np.einsum("thr,sr->hts", q_r.reshape(t, h, dr), k_r)
        if nn:
            q_n = np.einsum("thd,hdn->thn", q, self.wuk_nope.reshape(h, d, nn))
            k_n = x @ self.wdk_nope.T
            scores += np.einsum("thn,sn->hts", q_n, k_n)

        p = causal_softmax(scores / np.sqrt(d))
        cv = x @ self.wdv.T
        o_hat = np.einsum("hts,sw->thw", p, cv)
        o = np.einsum("thw,hdw->thd", o_hat, self.wuv.reshape(h, d, g * d))
        return o.reshape(t, h * d) @ self.wo.T


def split_rope_nope(layer: MergedGqaLayer, n_keep_heads: int = 1) -> SplitKeyLayer:
    """Keep rotary on the leading blocks of the rotated key head, drop the rest.

    ``n_keep_heads`` leading head_dim blocks keep their (possibly folded)
    angles; all remaining key dims lose the rotary encoding and the query
    side simply skips it for those dims.  This is the lossy step: the error
    equals the positional content of the dropped dims.
    """
    g, d = layer.groups, layer.head_dim
    if not 0 <= n_keep_heads <= g:
        raise ValueError(f"n_keep_heads must be in [0, {g}], got {n_keep_heads}")
    dr = n_keep_heads * d
    return SplitKeyLayer(
        wq=layer.wq,
        wuk_rope=layer.wuk[:, :dr],
        wuk_nope=layer.wuk[:, dr:],
        wdk_rope=layer.wk[:dr],
        wdk_nope=layer.wk[dr:],
        wuv=layer.wuv,
        wdv=layer.wv,
        wo=layer.wo,
        rope=layer.rope.tile(n_keep_heads),
        heads=layer.heads,
        groups=g,
    )


def leading_energy(stats: FreqStats, rot: RotationSet | None, n_keep_heads: int) -> float:
    """Mean squared key activation captured by the leading blocks.

    With ``rot=None`` this reads the unrotated coordinate energies; with the
    fitted rotations it equals the top eigenvalue mass per group, which is
    maximal over all orthogonal choices.
    """
    m = stats.group_size
    keep = n_keep_heads * m
    total = 0.0
    for grp in range(stats.n_groups):
        s = stats.sigma_x[grp] + stats.sigma_y[grp]
        if rot is None:
            total += float(np.trace(s[:keep, :keep]))
        else:
            u = rot.rotations[grp]
            total += float(np.trace((u.T @ s @ u)[:keep, :keep]))
    return total / max(stats.sample_count, 1)


def key_norm_rows(
    pre: MergedGqaLayer,
    post_plain: MergedGqaLayer,
    post_folded: MergedGqaLayer,
    x: Array,
) -> list[dict]:
    """Per-dimension key RMS before rotation, after it, and after folding.

    Report rows for energy-concentration plots; one row per merged-head
    dimension.
    """
    rows = []
    norms = []
    for layer in (pre, post_plain, post_folded):
        keys = np.asarray(x, dtype=np.float64) @ layer.wk.T
        norms.append(np.sqrt(np.mean(keys**2, axis=0)))
    for dim in range(norms[0].shape[0]):
        rows.append(
            {
                "dimension": dim,
                "pre_norm": float(norms[0][dim]),
                "rotated_norm": float(norms[1][dim]),
                "folded_norm": float(norms[2][dim]),
            }
        )
    return rows


def concat_pca_energies(groups: Sequence[Array]) -> tuple[float, float]:
    """Compare separate top-1 PCAs against one joint top-M PCA.

    Returns (separate, joint): the summed top eigenvalue of each group's
    covariance, and the top-M eigenvalue mass of the concatenated data.  The
    joint figure can never fall below the separate one — the block-embedded
    separate directions are a feasible joint basis.
    """
    mats = [np.asarray(g, dtype=np.float64) for g in groups]
    n = mats[0].shape[0]
    if any(m.shape[0] != n for m in mats):
        raise ValueError("all groups need the same sample count")
    if n < 2:
        raise ValueError("need at least 2 samples")
    centered = [m - m.mean(axis=0) for m in mats]
    separate = sum(float(sym_eig(covariance(c)).eigenvalues[0]) for c in centered)
    joint_eigs = sym_eig(covariance(np.hstack(centered))).eigenvalues
    joint = float(np.sum(joint_eigs[: len(mats)]))
    return separate, joint


def pca_concat_gain(n_groups: int, dim: int, n_samples: int, seed: int) -> tuple[float, float]:
    """Seeded random instance of the separate-vs-joint PCA comparison."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.Generator(np.random.Philox(key=seed))
    groups = [rng.standard_normal((n_samples, dim)) for _ in range(n_groups)]
    return concat_pca_energies(groups)
