"""Single-stream decode-loop benchmark with exact cache accounting.

For each context length L the run prefills L//2 tokens (cache fill only)
and then decodes the remaining tokens one at a time; tokens per second is
wall clock over the decode half.  Absolute numbers are host-specific; the
meaningful outputs are the trend across context lengths and the exact
cache-byte accounting.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from .attention import GqaLayer, MlaLayer, kv_cache_bytes
from .linalg import Array
from .rope import rotate_rows


@dataclass(frozen=True)
class BenchRow:
    label: str
    context_length: int
    prefill_tokens: int
    decode_tokens: int
    tokens_per_second: float
    cache_bytes: int

    def to_dict(self) -> dict:
        return asdict(self)


def parse_context_lengths(text: str) -> list[int]:
    """Parse "1k,2k,4k" style context lists; a k suffix multiplies by 1024."""
    lengths = []
    for part in text.split(","):
        part = part.strip().lower()
        if not part:
            continue
        if part.endswith("k"):
            lengths.append(int(float(part[:-1]) * 1024))
        else:
            lengths.append(int(part))
    if not lengths:
        raise ValueError(f"no context lengths in {text!r}")
    return lengths


def _decode_gqa(layer: GqaLayer, x: Array, prefill: int) -> float:
    t_total = x.shape[0]
    h, g, d = layer.heads, layer.groups, layer.head_dim
    group_of_head = np.arange(h) // (h // g)
    thetas_k = np.tile(layer.rope.thetas, g)
    thetas_q = np.tile(layer.rope.thetas, h)
    scale = 1.0 / np.sqrt(d)

    k_cache = np.empty((t_total, g, d))
    v_cache = np.empty((t_total, g, d))
    pos = np.arange(prefill)
    k_cache[:prefill] = rotate_rows(x[:prefill] @ layer.wk.T, pos, thetas_k).reshape(prefill, g, d)
    v_cache[:prefill] = (x[:prefill] @ layer.wv.T).reshape(prefill, g, d)

    start = time.perf_counter()
    for t in range(prefill, t_total):
        xt = x[t]
        k_cache[t] = rotate_rows((layer.wk @ xt)[None], [t], thetas_k).reshape(g, d)
        v_cache[t] = (layer.wv @ xt).reshape(g, d)
        q = rotate_rows((layer.wq @ xt)[None], [t], thetas_q).reshape(h, d)
        kq = k_cache[: t + 1, group_of_head, :]  # (t+1, h, d)
        scores = np.einsum("hd,shd->hs", q, kq) * scale
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        o = np.einsum("hs,shd->hd", p, v_cache[: t + 1, group_of_head, :])
        _ = layer.wo @ o.reshape(h * d)
    return time.perf_counter() - start


def _decode_mla(layer: MlaLayer, x: Array, prefill: int) -> float:
    t_total = x.shape[0]
    h, dn, dr, r = layer.heads, layer.d_nope, layer.d_rope, layer.r_kv
    wuk = layer.wuk.reshape(h, dn, r)
    wuv = layer.wuv.reshape(h, dn, r)
    scale = 1.0 / np.sqrt(dn + dr)
    thetas_q = np.tile(layer.rope.thetas, h)

    c_cache = np.empty((t_total, r))
    kr_cache = np.empty((t_total, dr))
    pos = np.arange(prefill)
    c_cache[:prefill] = x[:prefill] @ layer.wdkv.T
    kr_cache[:prefill] = rotate_rows(x[:prefill] @ layer.wkr.T, pos, layer.rope.thetas)

    start = time.perf_counter()
    for t in range(prefill, t_total):
        xt = x[t]
        c_cache[t] = layer.wdkv @ xt
        kr_cache[t] = rotate_rows((layer.wkr @ xt)[None], [t], layer.rope.thetas)[0]
        if layer.wdq is not None:
            stack = layer.wuq @ (layer.wdq @ xt)
            q_nope, q_rope = stack[: h * dn], stack[h * dn :]
        else:
            q_nope, q_rope = layer.wq_nope @ xt, layer.wq_rope @ xt
        q_hat = np.einsum("hd,hdr->hr", q_nope.reshape(h, dn), wuk)
        scores = q_hat @ c_cache[: t + 1].T  # (h, t+1)
        if dr:
            q_r = rotate_rows(q_rope[None], [t], thetas_q).reshape(h, dr)
            scores += q_r @ kr_cache[: t + 1].T
        scores *= scale
        scores -= scores.max(axis=1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=1, keepdims=True)
        o_hat = p @ c_cache[: t + 1]  # (h, r)
        o = np.einsum("hr,hdr->hd", o_hat, wuv)
        y = layer.wo @ o.reshape(h * dn)
        if layer.out_bias is not None:
            y = y + layer.out_bias
    return time.perf_counter() - start


def bench_decode(
    layer: GqaLayer | MlaLayer,
    context_lengths: list[int],
    dtype_bytes: int = 4,
    seed: int = 0,
) -> list[BenchRow]:
    """Decode-loop throughput plus exact cache bytes per context length."""
    rows = []
    spec = layer.cache_spec(dtype_bytes)
    rng = np.random.Generator(np.random.Philox(key=seed))
    x_all = rng.standard_normal((max(context_lengths), layer.hidden_dim))
    decoder = _decode_mla if isinstance(layer, MlaLayer) else _decode_gqa

    # Warm up allocator and BLAS paths before timing.
    warm = min(64, max(context_lengths))
    decoder(layer, x_all[:warm], warm // 2)

    for length in context_lengths:
        if length < 2:
            raise ValueError(f"context length must be >= 2, got {length}")
        prefill = length // 2
        elapsed = decoder(layer, x_all[:length], prefill)
        decode_tokens = length - prefill
        rows.append(
            BenchRow(
                label=spec.label,
                context_length=length,
                prefill_tokens=prefill,
                decode_tokens=decode_tokens,
                tokens_per_second=decode_tokens / elapsed,
                cache_bytes=kv_cache_bytes(spec, length),
            )
        )
    return rows
