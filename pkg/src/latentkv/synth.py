"""Seeded synthetic layers and calibration streams.

All randomness flows through numpy's Philox engine, a counter-based 64-bit
generator: streams depend only on the seed, never on thread count or
platform, so conversions are reproducible bit for bit.
"""

from __future__ import annotations

import numpy as np

from .attention import GqaLayer
from .linalg import Array
from .rope import RopeSchedule

STRUCTURES = ("iid", "low_rank", "key_dominant")


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


def synth_gqa(seed: int, hidden_dim: int, heads: int, groups: int, rope_base: float = 10000.0) -> GqaLayer:
    """Random GQA layer with N(0, 1/hidden_dim) entries, deterministic per seed."""
    if heads <= 0 or hidden_dim % heads != 0:
        raise ValueError(f"heads {heads} must divide hidden_dim {hidden_dim}")
    if groups <= 0 or heads % groups != 0:
        raise ValueError(f"groups {groups} must divide heads {heads}")
    d = hidden_dim // heads
    if d % 2 != 0:
        raise ValueError(f"head_dim {d} must be even for rotary pairing")
    rng = _rng(seed)
    scale = 1.0 / np.sqrt(hidden_dim)
    return GqaLayer(
        wq=rng.standard_normal((heads * d, hidden_dim)) * scale,
        wk=rng.standard_normal((groups * d, hidden_dim)) * scale,
        wv=rng.standard_normal((groups * d, hidden_dim)) * scale,
        wo=rng.standard_normal((hidden_dim, heads * d)) * scale,
        rope=RopeSchedule.standard(d, rope_base),
        heads=heads,
        groups=groups,
    )


def synth_calib(
    seed: int,
    n: int,
    dim: int,
    structure: str = "iid",
    *,
    rank: int | None = None,
    factor: float | None = None,
) -> Array:
    """Deterministic calibration stream of ``n`` token rows.

    Structures: ``iid`` standard normal rows; ``low_rank`` rows lying
    exactly in a ``rank``-dimensional subspace; ``key_dominant`` iid rows
    whose leading ceil(dim/2) coordinates are scaled by ``factor`` —
    paired with layers whose no-rotary key projection reads that block, it
    reproduces the key-over-value norm imbalance.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    if structure not in STRUCTURES:
        raise ValueError(f"unknown structure {structure!r}, expected one of {STRUCTURES}")
    rng = _rng(seed)
    if structure == "iid":
        return rng.standard_normal((n, dim))
    if structure == "low_rank":
        if rank is None or not 1 <= rank <= dim:
            raise ValueError(f"low_rank needs 1 <= rank <= {dim}, got {rank}")
        coeffs = rng.standard_normal((n, rank))
        directions = rng.standard_normal((rank, dim))
        return coeffs @ directions
    if factor is None or factor <= 0.0:
        raise ValueError(f"key_dominant needs a positive factor, got {factor}")
    x = rng.standard_normal((n, dim))
    x[:, : (dim + 1) // 2] *= factor
    return x
