"""Reference forward passes for GQA and latent (MLA-style) attention layers.

Single-stream causal attention over a (T, D) token matrix, no batching, no
dropout, no projection biases.  The latent layer supports two equivalent
paradigms: the per-head expanded form and the absorbed form that attends
directly on the cached latents.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linalg import Array
from .rope import RopeSchedule, rotate_rows


def _check_finite(name: str, a: Array) -> Array:
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def causal_softmax(scores: Array) -> Array:
    """Row-stochastic causal attention weights.

    ``scores`` is (..., T, T); entry (t, j) is masked for j > t.  Max
    subtraction keeps the exponentials in range.
    """
    t = scores.shape[-1]
    mask = np.tril(np.ones((t, t), dtype=bool))
    masked = np.where(mask, scores, -np.inf)
    m = np.max(masked, axis=-1, keepdims=True)
    e = np.where(mask, np.exp(masked - m), 0.0)
    return e / np.sum(e, axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class GqaLayer:
    """Grouped-query attention projections plus rotary schedule.

    ``heads`` query heads share ``groups`` key/value heads; head i reads
    group i // (heads // groups).
    """

    wq: Array  # (heads*head_dim, D)
    wk: Array  # (groups*head_dim, D)
    wv: Array  # (groups*head_dim, D)
    wo: Array  # (D, heads*head_dim)
    rope: RopeSchedule  # over head_dim
    heads: int
    groups: int

    def __post_init__(self):
        for name in ("wq", "wk", "wv", "wo"):
            object.__setattr__(self, name, _check_finite(name, getattr(self, name)))
        if self.heads <= 0 or self.groups <= 0 or self.heads % self.groups != 0:
            raise ValueError(f"groups {self.groups} must divide heads {self.heads}")
        d = self.wq.shape[0] // self.heads
        dim = self.wq.shape[1]
        if self.heads * d != self.wq.shape[0] or self.heads * d != dim:
            raise ValueError("wq must be (heads*head_dim, heads*head_dim)")
        if self.wk.shape != (self.groups * d, dim) or self.wv.shape != (self.groups * d, dim):
            raise ValueError("wk/wv must be (groups*head_dim, D)")
        if self.wo.shape != (dim, self.heads * d):
            raise ValueError("wo must be (D, heads*head_dim)")
        if self.rope.head_dim != d:
            raise ValueError(f"rope covers {self.rope.head_dim} dims, head_dim is {d}")

    @property
    def hidden_dim(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.heads

    def cache_spec(self, dtype_bytes: int = 4) -> "CacheSpec":
        return CacheSpec(
            per_token_scalars=2 * self.groups * self.head_dim,
            dtype_bytes=dtype_bytes,
            label="gqa",
        )

    def forward(self, x: Array) -> Array:
        return gqa_forward(self, x)


def gqa_forward(layer: GqaLayer, x: Array, *, rope: bool = True) -> Array:
    """Causal GQA forward over a (T, D) token matrix.

    Scores use scale 1/sqrt(head_dim); ``rope=False`` runs the content-only
    variant used by the rotation-free rewrites.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.hidden_dim:
        raise ValueError(f"input must be (T, {layer.hidden_dim}), got {x.shape}")
    t, h, g, d = x.shape[0], layer.heads, layer.groups, layer.head_dim
    if t < 1:
        raise ValueError("need at least one token")
    pos = np.arange(t)

    q = x @ layer.wq.T  # (T, h*d)
    k = x @ layer.wk.T  # (T, g*d)
    v = x @ layer.wv.T
    if rope:
        q = rotate_rows(q, pos, np.tile(layer.rope.thetas, h))
        k = rotate_rows(k, pos, np.tile(layer.rope.thetas, g))

    qh = q.reshape(t, h, d)
    kh = k.reshape(t, g, d)
    vh = v.reshape(t, g, d)
    group_of_head = np.arange(h) // (h // g)
    kq = kh[:, group_of_head, :]  # (T, h, d) keys seen by each head
    vq = vh[:, group_of_head, :]

    scores = np.einsum("thd,shd->hts", qh, kq) / np.sqrt(d)
    p = causal_softmax(scores)
    o = np.einsum("hts,shd->thd", p, vq)
    return o.reshape(t, h * d) @ layer.wo.T


@dataclass(frozen=True, eq=False)
class MlaLayer:
    """Latent-attention layer in the absorbable (DeepSeek-shaped) layout.

    Per token the cache stores the latent ``wdkv @ x`` (r_kv dims) plus the
    shared rotary key ``wkr @ x`` (d_rope dims).  Content keys/values expand
    from the latent per head via ``wuk``/``wuv``.  An optional factorised
    query path (``wdq``/``wuq``) must reproduce ``wq_nope``/``wq_rope``
    exactly; ``out_bias`` carries the constant output offset produced when a
    truncated PCA basis is compensated for its dropped mean.
    """

    wdkv: Array  # (r_kv, D)
    wuk: Array  # (heads*d_nope, r_kv)
    wuv: Array  # (heads*d_nope, r_kv)
    wkr: Array  # (d_rope, D)
    wq_nope: Array  # (heads*d_nope, D)
    wq_rope: Array  # (heads*d_rope, D)
    wo: Array  # (D, heads*d_nope)
    rope: RopeSchedule  # over d_rope
    heads: int
    wdq: Optional[Array] = None  # (r_q, D)
    wuq: Optional[Array] = None  # (heads*(d_nope+d_rope), r_q), nope rows first
    out_bias: Optional[Array] = None  # (D,)

    def __post_init__(self):
        for name in ("wdkv", "wuk", "wuv", "wkr", "wq_nope", "wq_rope", "wo"):
            object.__setattr__(self, name, _check_finite(name, getattr(self, name)))
        h = self.heads
        if h <= 0 or self.wq_nope.shape[0] % h != 0:
            raise ValueError("wq_nope rows must be a multiple of heads")
        dn = self.wq_nope.shape[0] // h
        dim = self.wq_nope.shape[1]
        r_kv = self.wdkv.shape[0]
        if self.wdkv.shape[1] != dim:
            raise ValueError("wdkv must be (r_kv, D)")
        if self.wuk.shape != (h * dn, r_kv) or self.wuv.shape != (h * dn, r_kv):
            raise ValueError("wuk/wuv must be (heads*d_nope, r_kv)")
        dr = self.wkr.shape[0]
        if self.wkr.shape[1] != dim:
            raise ValueError("wkr must be (d_rope, D)")
        if self.wq_rope.shape != (h * dr, dim):
            raise ValueError("wq_rope must be (heads*d_rope, D)")
        if self.wo.shape != (dim, h * dn):
            raise ValueError("wo must be (D, heads*d_nope)")
        if self.rope.head_dim != dr:
            raise ValueError(f"rope covers {self.rope.head_dim} dims, d_rope is {dr}")
        if (self.wdq is None) != (self.wuq is None):
            raise ValueError("wdq and wuq must be provided together")
        if self.wdq is not None:
            object.__setattr__(self, "wdq", _check_finite("wdq", self.wdq))
            object.__setattr__(self, "wuq", _check_finite("wuq", self.wuq))
            r_q = self.wdq.shape[0]
            if self.wdq.shape[1] != dim or self.wuq.shape != (h * (dn + dr), r_q):
                raise ValueError("query factors must be (r_q, D) and (heads*(d_nope+d_rope), r_q)")
            stack = self.wuq @ self.wdq
            if not np.allclose(stack[: h * dn], self.wq_nope, atol=1e-10) or not np.allclose(
                stack[h * dn :], self.wq_rope, atol=1e-10
            ):
                raise ValueError("wuq @ wdq must reproduce the stacked query weights")
        if self.out_bias is not None:
            bias = _check_finite("out_bias", self.out_bias)
            if bias.shape != (dim,):
                raise ValueError("out_bias must be (D,)")
            object.__setattr__(self, "out_bias", bias)

    @property
    def hidden_dim(self) -> int:
        return self.wq_nope.shape[1]

    @property
    def d_nope(self) -> int:
        return self.wq_nope.shape[0] // self.heads

    @property
    def d_rope(self) -> int:
        return self.wkr.shape[0]

    @property
    def r_kv(self) -> int:
        return self.wdkv.shape[0]

    def cache_spec(self, dtype_bytes: int = 4) -> "CacheSpec":
        return CacheSpec(
            per_token_scalars=self.r_kv + self.d_rope,
            dtype_bytes=dtype_bytes,
            label="mla",
        )

    def forward(self, x: Array) -> Array:
        return mla_forward_mha_paradigm(self, x)

    def query_stacks(self, x: Array) -> tuple[Array, Array]:
        """Pre-rotation query activations, (T, h*d_nope) and (T, h*d_rope)."""
        h, dn = self.heads, self.d_nope
        if self.wdq is not None:
            stack = (x @ self.wdq.T) @ self.wuq.T
            return stack[:, : h * dn], stack[:, h * dn :]
        return x @ self.wq_nope.T, x @ self.wq_rope.T


def _mla_scores(layer: MlaLayer, x: Array) -> tuple[Array, Array, Array]:
    """Shared score computation: returns (weights, latents, rotated shared key)."""
    t, h = x.shape[0], layer.heads
    dn, dr = layer.d_nope, layer.d_rope
    pos = np.arange(t)

    q_nope, q_rope = layer.query_stacks(x)
    if dr:
        q_rope = rotate_rows(q_rope, pos, np.tile(layer.rope.thetas, h))
    ckv = x @ layer.wdkv.T  # (T, r_kv)
    kr = rotate_rows(x @ layer.wkr.T, pos, layer.rope.thetas)  # (T, d_rope)

    # Absorbed queries: wuk folds into the query side, so scores read the
    # latent cache directly (identical to expanding keys per head).
    qn = q_nope.reshape(t, h, dn)
    q_hat = np.einsum("thd,hdr->thr", qn, layer.wuk.reshape(h, dn, layer.r_kv))
    scores = np.einsum("thr,sr->hts", q_hat, ckv)
    if dr:
        qr = q_rope.reshape(t, h, dr)
        scores += np.einsum("thr,sr->hts", qr, kr)
    p = causal_softmax(scores / np.sqrt(dn + dr))
    return p, ckv, kr


def mla_forward_mha_paradigm(layer: MlaLayer, x: Array) -> Array:
    """Forward in the per-head expanded paradigm: keys/values leave the latent."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.hidden_dim:
        raise ValueError(f"input must be (T, {layer.hidden_dim}), got {x.shape}")
    t, h, dn = x.shape[0], layer.heads, layer.d_nope
    p, ckv, _ = _mla_scores(layer, x)
    vc = (ckv @ layer.wuv.T).reshape(t, h, dn)
    o = np.einsum("hts,shd->thd", p, vc)
    y = o.reshape(t, h * dn) @ layer.wo.T
    if layer.out_bias is not None:
        y = y + layer.out_bias
    return y


def mla_forward_absorbed(layer: MlaLayer, x: Array) -> tuple[Array, Array]:
    """Forward attending directly on cached latents.

    Returns the output and the per-token cached width trace: each token
    stores r_kv + d_rope scalars.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.hidden_dim:
        raise ValueError(f"input must be (T, {layer.hidden_dim}), got {x.shape}")
    t, h, dn = x.shape[0], layer.heads, layer.d_nope
    p, ckv, kr = _mla_scores(layer, x)
    cached = np.concatenate([ckv, kr], axis=1)  # what a serving cache stores
    o_hat = np.einsum("hts,sr->thr", p, ckv)
    vu = np.einsum("thr,hdr->thd", o_hat, layer.wuv.reshape(h, dn, layer.r_kv))
    y = vu.reshape(t, h * dn) @ layer.wo.T
    if layer.out_bias is not None:
        y = y + layer.out_bias
    cache_trace = np.full(t, cached.shape[1], dtype=np.int64)
    return y, cache_trace


@dataclass(frozen=True)
class CacheSpec:
    """Per-token KV cache footprint of one layer."""

    per_token_scalars: int
    dtype_bytes: int
    label: str = ""

    def __post_init__(self):
        if self.per_token_scalars <= 0:
            raise ValueError("per_token_scalars must be positive")
        if self.dtype_bytes <= 0:
            raise ValueError("dtype_bytes must be positive")


def kv_cache_bytes(spec: CacheSpec, seq_len: int) -> int:
    """Exact cache size in bytes for a sequence of ``seq_len`` tokens."""
    if seq_len < 0:
        raise ValueError("seq_len must be >= 0")
    return spec.per_token_scalars * spec.dtype_bytes * seq_len
