"""Output-preserving layer rewrites.

Three constructive transforms: GQA into a factorised latent form (selector
up-projections over a stacked K/V latent), the factorised form into a wide
single-KV-head absorbed form, and the key-head merge that widens every
query head onto one shared key/value head with a blockwise rotary schedule.
The first two are content-only (no rotary); the merge is the rotary-bearing
entry point of the conversion pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import CacheSpec, GqaLayer, _check_finite, causal_softmax
from .linalg import Array
from .rope import RopeSchedule, rotate_rows


@dataclass(frozen=True, eq=False)
class MlaFactorizedLayer:
    """Latent K/V with per-head up-projections, queries left unfactorised.

    When produced by ``gqa_to_mla_factorized`` the latent stacks the source
    key rows over the value rows and ``wuk``/``wuv`` are 0/1 selectors; the
    fields themselves allow dense up-projections.
    """

    wdkv: Array  # (2*groups*head_dim, D), [wk; wv] when GQA-derived
    wuk: Array  # (heads*head_dim, 2*groups*head_dim)
    wuv: Array  # (heads*head_dim, 2*groups*head_dim)
    wq: Array  # (heads*head_dim, D)
    wo: Array  # (D, heads*head_dim)
    heads: int
    groups: int

    def __post_init__(self):
        for name in ("wdkv", "wuk", "wuv", "wq", "wo"):
            object.__setattr__(self, name, _check_finite(name, getattr(self, name)))
        h, g = self.heads, self.groups
        if h <= 0 or g <= 0 or h % g != 0:
            raise ValueError(f"groups {g} must divide heads {h}")
        d = self.wq.shape[0] // h
        dim = self.wq.shape[1]
        latent = 2 * g * d
        if self.wq.shape[0] != h * d:
            raise ValueError("wq rows must be heads*head_dim")
        if self.wdkv.shape != (latent, dim):
            raise ValueError("wdkv must be (2*groups*head_dim, D)")
        if self.wuk.shape != (h * d, latent) or self.wuv.shape != (h * d, latent):
            raise ValueError("wuk/wuv must be (heads*head_dim, 2*groups*head_dim)")
        if self.wo.shape != (dim, h * d):
            raise ValueError("wo must be (D, heads*head_dim)")

    @property
    def hidden_dim(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.heads

    def forward(self, x: Array) -> Array:
        """Content-only causal forward (no rotary), scale 1/sqrt(head_dim)."""
        x = np.asarray(x, dtype=np.float64)
        t, h, d = x.shape[0], self.heads, self.head_dim
        latent = self.wdkv.shape[0]
        c = x @ self.wdkv.T  # (T, latent)
        q = (x @ self.wq.T).reshape(t, h, d)
        k = np.einsum("tl,hdl->thd", c, self.wuk.reshape(h, d, latent))
        v = np.einsum("tl,hdl->thd", c, self.wuv.reshape(h, d, latent))
        p = causal_softmax(np.einsum("thd,shd->hts", q, k) / np.sqrt(d))
        o = np.einsum("hts,shd->thd", p, v)
        return o.reshape(t, h * d) @ self.wo.T


@dataclass(frozen=True, eq=False)
class MqaAbsorbedLayer:
    """Wide per-head queries attending to one shared latent K/V head.

    ``score_dim`` keeps the source 1/sqrt(head_dim) scale so absorption
    preserves logits.
    """

    wq: Array  # (heads*latent, D)
    wdkv: Array  # (latent, D)
    wo: Array  # (D, heads*latent)
    heads: int
    score_dim: int

    def __post_init__(self):
        for name in ("wq", "wdkv", "wo"):
            object.__setattr__(self, name, _check_finite(name, getattr(self, name)))
        latent = self.wdkv.shape[0]
        dim = self.wdkv.shape[1]
        if self.heads <= 0 or self.score_dim <= 0:
            raise ValueError("heads and score_dim must be positive")
        if self.wq.shape != (self.heads * latent, dim):
            raise ValueError("wq must be (heads*latent, D)")
        if self.wo.shape != (dim, self.heads * latent):
            raise ValueError("wo must be (D, heads*latent)")

    @property
    def hidden_dim(self) -> int:
        return self.wdkv.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.wdkv.shape[0]

    def forward(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        t, h, latent = x.shape[0], self.heads, self.latent_dim
        c = x @ self.wdkv.T  # shared K and V
        q = (x @ self.wq.T).reshape(t, h, latent)
        p = causal_softmax(np.einsum("thl,sl->hts", q, c) / np.sqrt(self.score_dim))
        o = np.einsum("hts,sl->thl", p, c)
        return o.reshape(t, h * latent) @ self.wo.T


@dataclass(frozen=True, eq=False)
class MergedGqaLayer:
    """GQA with all key/value heads merged into one wide shared head.

    Every query head is widened to groups*head_dim via ``wuk`` (selectors at
    construction, rotated later); the rotary schedule covers one head_dim
    block and is applied repeatedly every head_dim dims of the merged head.
    Scores keep the source 1/sqrt(head_dim) scale.
    """

    wq: Array  # (heads*head_dim, D)
    wuk: Array  # (heads*head_dim, groups*head_dim)
    wk: Array  # (groups*head_dim, D), merged key head
    wuv: Array  # (heads*head_dim, groups*head_dim)
    wv: Array  # (groups*head_dim, D), merged value head
    wo: Array  # (D, heads*head_dim)
    rope: RopeSchedule  # over head_dim, applied blockwise
    heads: int
    groups: int

    def __post_init__(self):
        for name in ("wq", "wuk", "wk", "wuv", "wv", "wo"):
            object.__setattr__(self, name, _check_finite(name, getattr(self, name)))
        h, g = self.heads, self.groups
        if h <= 0 or g <= 0 or h % g != 0:
            raise ValueError(f"groups {g} must divide heads {h}")
        d = self.wq.shape[0] // h
        dim = self.wq.shape[1]
        if self.wq.shape[0] != h * d:
            raise ValueError("wq rows must be heads*head_dim")
        if self.wuk.shape != (h * d, g * d) or self.wuv.shape != (h * d, g * d):
            raise ValueError("wuk/wuv must be (heads*head_dim, groups*head_dim)")
        if self.wk.shape != (g * d, dim) or self.wv.shape != (g * d, dim):
            raise ValueError("wk/wv must be (groups*head_dim, D)")
        if self.wo.shape != (dim, h * d):
            raise ValueError("wo must be (D, heads*head_dim)")
        if self.rope.head_dim != d:
            raise ValueError(f"rope covers {self.rope.head_dim} dims, head_dim is {d}")

    @property
    def hidden_dim(self) -> int:
        return self.wq.shape[1]

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.heads

    def cache_spec(self, dtype_bytes: int = 4) -> CacheSpec:
        return CacheSpec(
            per_token_scalars=2 * self.groups * self.head_dim,
            dtype_bytes=dtype_bytes,
            label="merged-gqa",
        )

    def forward(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.hidden_dim:
            raise ValueError(f"input must be (T, {self.hidden_dim}), got {x.shape}")
        t, h, g, d = x.shape[0], self.heads, self.groups, self.head_dim
        pos = np.arange(t)
        wide = np.tile(self.rope.thetas, g)

        q = (x @ self.wq.T).reshape(t, h, d)
        q_hat = np.einsum("thd,hdw->thw", q, self.wuk.reshape(h, d, g * d))
        q_hat = rotate_rows(q_hat.reshape(t * h, g * d), np.repeat(pos, h), wide)
        q_hat = q_hat.reshape(t, h, g * d)
        k_hat = rotate_rows(x @ self.wk.T, pos, wide)
        cv = x @ self.wv.T  # (T, g*d)

        p = causal_softmax(np.einsum("thw,sw->hts", q_hat, k_hat) / np.sqrt(d))
        o_hat = np.einsum("hts,sw->thw", p, cv)
        o = np.einsum("thw,hdw->thd", o_hat, self.wuv.reshape(h, d, g * d))
        return o.reshape(t, h * d) @ self.wo.T


def _selector(heads: int, groups: int, head_dim: int, blocks: int, block_of_head) -> Array:
    """0/1 up-projection placing head i's identity at block_of_head(i)."""
    h, d = heads, head_dim
    sel = np.zeros((h * d, blocks * d))
    eye = np.eye(d)
    for i in range(h):
        b = block_of_head(i)
        sel[i * d : (i + 1) * d, b * d : (b + 1) * d] = eye
    return sel


def gqa_to_mla_factorized(src: GqaLayer) -> MlaFactorizedLayer:
    """Rewrite GQA as a factorised latent layer, content path only.

    The latent stacks the key rows over the value rows; head i's key
    selector picks latent block k and its value selector block groups+k,
    where k is the source group of head i.  Outputs match the rotary-free
    GQA forward exactly.
    """
    h, g, d = src.heads, src.groups, src.head_dim
    per_group = h // g
    return MlaFactorizedLayer(
        wdkv=np.vstack([src.wk, src.wv]),
        wuk=_selector(h, g, d, 2 * g, lambda i: i // per_group),
        wuv=_selector(h, g, d, 2 * g, lambda i: g + i // per_group),
        wq=src.wq.copy(),
        wo=src.wo.copy(),
        heads=h,
        groups=g,
    )


def mla_factorized_to_mqa(src: MlaFactorizedLayer) -> MqaAbsorbedLayer:
    """Absorb the up-projections: wide queries, shared latent K/V.

    Head i's query becomes wuk_i^T @ wq_i (latent-wide); wuv folds blockwise
    into the output projection.  Logits and outputs are unchanged.
    """
    h, d = src.heads, src.head_dim
    dim = src.hidden_dim
    latent = src.wdkv.shape[0]
    wuk_h = src.wuk.reshape(h, d, latent)
    wq_h = src.wq.reshape(h, d, dim)
    wq_wide = np.einsum("hdl,hdD->hlD", wuk_h, wq_h).reshape(h * latent, dim)
    wo_abs = np.einsum("Dhd,hdl->Dhl", src.wo.reshape(dim, h, d), src.wuv.reshape(h, d, latent))
    return MqaAbsorbedLayer(
        wq=wq_wide,
        wdkv=src.wdkv.copy(),
        wo=wo_abs.reshape(dim, h * latent),
        heads=h,
        score_dim=d,
    )


def merge_key_heads(src: GqaLayer) -> MergedGqaLayer:
    """Merge every key/value group into one wide shared head.

    Queries widen through selector ``wuk`` onto the merged key head and the
    per-head rotary becomes one blockwise rotation of the whole head, so the
    forward output is unchanged and the cache stays 2*groups*head_dim
    scalars per token.
    """
    h, g, d = src.heads, src.groups, src.head_dim
    per_group = h // g
    sel = _selector(h, g, d, g, lambda i: i // per_group)
    return MergedGqaLayer(
        wq=src.wq.copy(),
        wuk=sel,
        wk=src.wk.copy(),
        wuv=sel.copy(),
        wv=src.wv.copy(),
        wo=src.wo.copy(),
        rope=src.rope,
        heads=h,
        groups=g,
    )
