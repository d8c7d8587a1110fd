"""Rotary position embedding with interleaved dimension pairing.

Adjacent dimensions (2l, 2l+1) form one rotation pair; dimension pair l
rotates by angle t * theta_l at position t.  This is the interleaved
layout (pairs are adjacent), not the half-split variant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import Array


@dataclass(frozen=True, eq=False)
class RopeSchedule:
    """Rotation angles, one per adjacent dimension pair.

    ``standard(head_dim, base)`` builds the usual geometric schedule
    theta_i = base ** (-2*(i-1)/head_dim); explicit theta tables cover
    folded or tiled variants produced during conversion (``base`` is only
    recorded for schedules built from the formula).
    """

    thetas: Array
    base: float | None = None

    def __post_init__(self):
        thetas = np.asarray(self.thetas, dtype=np.float64)
        if thetas.ndim != 1:
            raise ValueError("thetas must be a 1-D array")
        if not np.all(np.isfinite(thetas)):
            raise ValueError("thetas must be finite")
        object.__setattr__(self, "thetas", thetas)

    @property
    def head_dim(self) -> int:
        return 2 * self.thetas.shape[0]

    @classmethod
    def standard(cls, head_dim: int, base: float = 10000.0) -> "RopeSchedule":
        if head_dim <= 0 or head_dim % 2 != 0:
            raise ValueError(f"head_dim must be a positive even number, got {head_dim}")
        if base <= 0.0:
            raise ValueError(f"base must be positive, got {base}")
        idx = np.arange(head_dim // 2, dtype=np.float64)
        thetas = base ** (-2.0 * idx / head_dim)
        if base > 1.0 and not np.all(np.diff(thetas) < 0.0):
            raise ValueError("standard schedule must be strictly decreasing")
        return cls(thetas=thetas, base=base)

    def fold(self, group_size: int) -> "RopeSchedule":
        """Replace each run of ``group_size`` consecutive angles by the first.

        Groups of near-equal frequencies are treated as one effective
        frequency; ``group_size`` must divide the number of pairs.
        """
        n = self.thetas.shape[0]
        if group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {group_size}")
        if n % group_size != 0:
            raise ValueError(f"group_size {group_size} does not divide {n} pairs")
        if group_size == 1:
            return self
        reps = self.thetas.reshape(-1, group_size)[:, 0]
        return RopeSchedule(thetas=np.repeat(reps, group_size))

    def tile(self, blocks: int) -> "RopeSchedule":
        """Schedule for ``blocks`` copies of this head laid out back to back."""
        if blocks < 0:
            raise ValueError(f"blocks must be >= 0, got {blocks}")
        return RopeSchedule(thetas=np.tile(self.thetas, blocks))


def rotate_rows(x: Array, positions: Array, thetas: Array) -> Array:
    """Apply position-dependent pair rotations to each row of ``x``.

    ``x`` is (T, 2*len(thetas)); row t rotates pair l by positions[t] *
    thetas[l].  Norm preserving by construction.
    """
    x = np.asarray(x, dtype=np.float64)
    thetas = np.asarray(thetas, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2 * thetas.shape[0]:
        raise ValueError(
            f"row width {x.shape[1] if x.ndim == 2 else None} does not match "
            f"{2 * thetas.shape[0]} rotated dims"
        )
    if x.shape[1] == 0:
        return x.copy()
    ang = np.outer(np.asarray(positions, dtype=np.float64), thetas)
    c, s = np.cos(ang), np.sin(ang)
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * c - odd * s
    out[:, 1::2] = even * s + odd * c
    return out


def apply_rope(x: Array, t: int, sched: RopeSchedule) -> Array:
    """Rotate a single vector to encode position ``t``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"apply_rope expects a vector, got shape {x.shape}")
    if x.shape[0] % 2 != 0:
        raise ValueError(f"vector dim must be even, got {x.shape[0]}")
    if x.shape[0] != sched.head_dim:
        raise ValueError(f"vector dim {x.shape[0]} does not match schedule dim {sched.head_dim}")
    return rotate_rows(x[None, :], np.array([t]), sched.thetas)[0]
