"""Conversion pipeline, verification helpers, and report emission.

Stages run in order merge -> collect -> rotate -> split -> balance ->
compress -> assemble; every stage's output error is measured against the
source layer on a held-out slice of the calibration stream.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .attention import MlaLayer
from .compress import (
    assemble_mla,
    balance,
    compress_query,
    compute_alpha,
    decompose_projections,
    joint_kv_pca,
    value_reconstruction_error,
)
from .linalg import Array
from .rewrites import merge_key_heads
from .rotation import (
    apply_rotations,
    collect_key_stats,
    fold_frequencies,
    key_norm_rows,
    solve_rotations,
    split_rope_nope,
)
from .synth import synth_calib, synth_gqa

STAGES = ("merge", "rotate", "split", "balance", "compress", "assemble")


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a conversion run needs, JSON-serialisable.

    ``input_bundle``/``calib_tensor`` point at files; the ``synth_*``
    fields generate inputs instead.  ``freq_group_size`` is the number of
    adjacent frequencies folded together (1 disables folding).
    """

    seed: int = 0
    input_bundle: Optional[str] = None
    synth_layer: Optional[dict] = None  # {hidden_dim, heads, groups, rope_base?}
    calib_tensor: Optional[str] = None
    synth_calib: Optional[dict] = None  # {n, structure?, rank?, factor?}
    freq_group_size: int = 1
    n_keep_heads: int = 1
    r_kv: int = 0
    r_q: Optional[int] = None
    holdout_fraction: float = 0.1
    eval_tokens: int = 32
    lossless_tol: float = 1e-8
    rank_sweep: tuple[int, ...] = ()
    output_bundle: Optional[str] = None
    output_report: Optional[str] = None

    @classmethod
    def from_json(cls, path: str | Path) -> "PipelineConfig":
        with open(path) as fh:
            raw = json.load(fh)
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "rank_sweep" in raw and raw["rank_sweep"] is not None:
            raw["rank_sweep"] = tuple(int(r) for r in raw["rank_sweep"])
        return cls(**raw)

    def validate(self) -> None:
        if (self.input_bundle is None) == (self.synth_layer is None):
            raise ValueError("config needs exactly one of input_bundle / synth_layer")
        if (self.calib_tensor is None) == (self.synth_calib is None):
            raise ValueError("config needs exactly one of calib_tensor / synth_calib")
        if self.r_kv < 1:
            raise ValueError("r_kv must be >= 1")
        if self.freq_group_size < 1 or self.n_keep_heads < 0:
            raise ValueError("freq_group_size must be >= 1 and n_keep_heads >= 0")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in (0, 1)")


def reduction_label(fraction: float) -> str:
    """Two-decimal percentage label for a cache reduction fraction."""
    return f"{100.0 * fraction:.2f}%"


@dataclass
class ConversionReport:
    """Per-stage errors, cache accounting, and emission tables."""

    seed: int
    config: dict[str, Any]
    stage_errors: dict[str, dict[str, float]] = field(default_factory=dict)
    cache: dict[str, Any] = field(default_factory=dict)
    captured_energy: dict[str, Any] = field(default_factory=dict)
    balance: dict[str, Any] = field(default_factory=dict)
    key_norms: list[dict] = field(default_factory=list)
    balance_norms: list[dict] = field(default_factory=list)
    rank_sweep: list[dict] = field(default_factory=list)
    bench: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "config": self.config,
            "stage_errors": self.stage_errors,
            "cache": self.cache,
            "captured_energy": self.captured_energy,
            "balance": self.balance,
            "key_norms": self.key_norms,
            "balance_norms": self.balance_norms,
            "rank_sweep": self.rank_sweep,
            "bench": self.bench,
        }


@dataclass(frozen=True, eq=False)
class EquivalenceSummary:
    """Output differences between two layers on a shared token stream."""

    max_abs: float
    max_rel: float
    per_position: Array
    within_tol: Optional[bool] = None


def verify_equivalence(a, b, x: Array, tol: Optional[float] = None) -> EquivalenceSummary:
    """Compare two layers' forward outputs position by position.

    Errors above ``tol`` are reported, not raised: lossy conversions are
    expected to differ and the caller decides what counts as failure.
    """
    x = np.asarray(x, dtype=np.float64)
    if a.hidden_dim != b.hidden_dim:
        raise ValueError(f"hidden dims differ: {a.hidden_dim} vs {b.hidden_dim}")
    ya = a.forward(x)
    yb = b.forward(x)
    diff = np.abs(ya - yb)
    max_abs = float(diff.max()) if diff.size else 0.0
    ref = max(float(np.abs(ya).max()), float(np.abs(yb).max()), 1e-300)
    return EquivalenceSummary(
        max_abs=max_abs,
        max_rel=max_abs / ref,
        per_position=diff.max(axis=1),
        within_tol=None if tol is None else bool(max_abs <= tol),
    )


def _load_inputs(cfg: PipelineConfig):
    from .bundles import load_layer_bundle

    if cfg.input_bundle is not None:
        layer = load_layer_bundle(cfg.input_bundle)
    else:
        spec = dict(cfg.synth_layer)
        layer = synth_gqa(
            seed=cfg.seed,
            hidden_dim=int(spec["hidden_dim"]),
            heads=int(spec["heads"]),
            groups=int(spec["groups"]),
            rope_base=float(spec.get("rope_base", 10000.0)),
        )
    if cfg.calib_tensor is not None:
        from .tensorfile import load_tensor

        calib = load_tensor(cfg.calib_tensor)
    else:
        spec = dict(cfg.synth_calib)
        calib = synth_calib(
            seed=cfg.seed + 1,
            n=int(spec["n"]),
            dim=layer.hidden_dim,
            structure=spec.get("structure", "iid"),
            rank=spec.get("rank"),
            factor=spec.get("factor"),
        )
    return layer, calib


def convert_pipeline(cfg: PipelineConfig) -> tuple[MlaLayer, ConversionReport]:
    """Run the full conversion and measure every stage against the source.

    The calibration stream splits into a fitting part (statistics, PCA) and
    a held-out evaluation sequence; stage errors are cumulative versus the
    source layer so the report reads as "error after this stage".
    """
    cfg.validate()
    source, calib = _load_inputs(cfg)
    from .attention import GqaLayer

    if not isinstance(source, GqaLayer):
        raise ValueError("conversion starts from a GQA layer bundle")
    if calib.ndim != 2 or calib.shape[1] != source.hidden_dim:
        raise ValueError("calibration stream width must match the layer hidden dim")

    n = calib.shape[0]
    held = max(1, int(round(n * cfg.holdout_fraction)))
    if held >= n:
        raise ValueError("holdout leaves no fitting samples")
    fit, eval_x = calib[: n - held], calib[n - held :]
    eval_x = eval_x[: cfg.eval_tokens]

    g, d = source.groups, source.head_dim
    d_rope = cfg.n_keep_heads * d
    latent_full = (2 * g - cfg.n_keep_heads) * d
    if cfg.r_kv > latent_full:
        raise ValueError(f"r_kv {cfg.r_kv} exceeds joint latent dimension {latent_full}")

    report = ConversionReport(seed=cfg.seed, config=cfg.__dict__.copy())
    report.config["rank_sweep"] = list(cfg.rank_sweep)
    y_ref = source.forward(eval_x)
    ref_mag = max(float(np.abs(y_ref).max()), 1e-300)

    def record(stage: str, layer) -> None:
        diff = np.abs(layer.forward(eval_x) - y_ref)
        report.stage_errors[stage] = {
            "max_abs": float(diff.max()),
            "max_rel": float(diff.max()) / ref_mag,
        }

    merged = merge_key_heads(source)
    record("merge", merged)

    folded = fold_frequencies(merged, cfg.freq_group_size)
    stats = collect_key_stats(folded, fit, cfg.freq_group_size)
    rotations = solve_rotations(stats)
    rotated = apply_rotations(folded, rotations)
    record("rotate", rotated)

    if cfg.freq_group_size > 1:
        plain = apply_rotations(merged, solve_rotations(collect_key_stats(merged, fit, 1)))
    else:
        plain = rotated
    report.key_norms = key_norm_rows(merged, plain, rotated, fit)

    split = split_rope_nope(rotated, cfg.n_keep_heads)
    record("split", split)

    factor = compute_alpha(split, fit)
    balanced = balance(split, factor)
    record("balance", balanced)
    report.balance = {
        "alpha": factor.alpha,
        "mean_knope_norm": factor.mean_knope_norm,
        "mean_v_norm": factor.mean_v_norm,
    }
    report.balance_norms = [
        {
            "component": "key_nope",
            "pre_balance_norm": factor.mean_knope_norm,
            "post_balance_norm": factor.mean_knope_norm / factor.alpha,
        },
        {
            "component": "value",
            "pre_balance_norm": factor.mean_v_norm,
            "post_balance_norm": factor.mean_v_norm,
        },
    ]

    basis = joint_kv_pca(balanced, fit, cfg.r_kv)
    parts = decompose_projections(balanced, basis)
    converted = assemble_mla(balanced, parts)
    record("compress", converted)
    report.captured_energy["kv"] = basis.captured_energy_fraction

    if cfg.r_q is not None:
        converted, captured_q = compress_query(converted, fit, cfg.r_q)
        report.captured_energy["query"] = captured_q
    else:
        report.captured_energy["query"] = None
    record("assemble", converted)

    before = 2 * g * d
    after = cfg.r_kv + d_rope
    fraction = 1.0 - after / before
    report.cache = {
        "before_scalars_per_token": before,
        "after_scalars_per_token": after,
        "reduction_fraction": fraction,
        "reduction_label": reduction_label(fraction),
    }

    if cfg.rank_sweep:
        k_acts = fit @ balanced.wdk_nope.T
        v_acts = fit @ balanced.wdv.T
        for rank in cfg.rank_sweep:
            for method, kwargs in (
                ("activation_balanced", {"balanced": True}),
                ("activation_unbalanced", {"balanced": False}),
                ("weight_balanced", {"balanced": True, "weight_based": (balanced.wdk_nope, balanced.wdv)}),
            ):
                err = value_reconstruction_error(k_acts, v_acts, rank, **kwargs)
                report.rank_sweep.append({"method": method, "rank": int(rank), "value_rms_error": err})

    if cfg.output_bundle is not None:
        from .bundles import save_layer_bundle

        save_layer_bundle(cfg.output_bundle, converted)
    if cfg.output_report is not None:
        emit_report(report, "json", cfg.output_report)
    return converted, report


def _write_csv(path: Path, rows: list[dict], headers: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=headers)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def emit_report(report: ConversionReport, fmt: str, out: str | Path) -> list[Path]:
    """Write the report as one JSON file or one CSV per table.

    JSON field ordering is fixed by construction, so identical runs emit
    identical bytes.
    """
    out = Path(out)
    if fmt == "json":
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
        return [out]
    if fmt != "csv":
        raise ValueError(f"format must be 'json' or 'csv', got {fmt!r}")
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    errors = [
        {"stage": stage, "max_abs": vals["max_abs"], "max_rel": vals["max_rel"]}
        for stage, vals in report.stage_errors.items()
    ]
    tables = (
        ("errors.csv", errors, ["stage", "max_abs", "max_rel"]),
        ("key_norms.csv", report.key_norms, ["dimension", "pre_norm", "rotated_norm", "folded_norm"]),
        (
            "balance_norms.csv",
            report.balance_norms,
            ["component", "pre_balance_norm", "post_balance_norm"],
        ),
        ("rank_sweep.csv", report.rank_sweep, ["method", "rank", "value_rms_error"]),
        (
            "bench.csv",
            report.bench,
            ["label", "context_length", "decode_tokens", "tokens_per_second", "cache_bytes"],
        ),
    )
    for fname, rows, headers in tables:
        path = out / fname
        _write_csv(path, rows, headers)
        paths.append(path)
    return paths
