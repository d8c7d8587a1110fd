"""Directory bundles: a JSON manifest plus one tensor file per named weight.

manifest.json schema::

    {
      "format": "latentkv-bundle",
      "version": 1,
      "kind": "gqa" | "mla" | "freq_stats",
      "config": {...},            # scalar config for the kind
      "tensors": {"name": "name.mlaf", ...}
    }

gqa config: hidden_dim, heads, groups, rope_base.
mla config: hidden_dim, heads, d_nope, d_rope, r_kv, r_q (null when the
query path is not factorised).
freq_stats config: group_size, groups, head_dim, sample_count.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .attention import GqaLayer, MlaLayer
from .rope import RopeSchedule
from .rotation import FreqStats
from .tensorfile import TensorFileError, load_tensor, save_tensor

FORMAT = "latentkv-bundle"
VERSION = 1

Layer = Union[GqaLayer, MlaLayer]


def _write_manifest(path: Path, kind: str, config: dict, tensors: dict[str, np.ndarray]) -> None:
    path.mkdir(parents=True, exist_ok=True)
    names = {}
    for name, arr in tensors.items():
        fname = f"{name}.mlaf"
        save_tensor(path / fname, arr)
        names[name] = fname
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "config": config,
        "tensors": names,
    }
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_manifest(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise TensorFileError(f"{path}: missing manifest.json")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT:
        raise TensorFileError(f"{path}: not a {FORMAT} directory")
    if manifest.get("version") != VERSION:
        raise TensorFileError(f"{path}: unsupported bundle version {manifest.get('version')}")
    tensors = {}
    for name, fname in manifest.get("tensors", {}).items():
        fpath = path / fname
        if not fpath.is_file():
            raise TensorFileError(f"{path}: manifest names missing tensor file {fname}")
        tensors[name] = load_tensor(fpath)
    return manifest, tensors


def save_layer_bundle(path: str | Path, layer: Layer) -> None:
    """Persist a GQA or MLA layer as a bundle directory."""
    path = Path(path)
    if isinstance(layer, GqaLayer):
        config = {
            "hidden_dim": layer.hidden_dim,
            "heads": layer.heads,
            "groups": layer.groups,
            "rope_base": layer.rope.base,
        }
        tensors = {
            "wq": layer.wq,
            "wk": layer.wk,
            "wv": layer.wv,
            "wo": layer.wo,
            "rope_thetas": layer.rope.thetas,
        }
        _write_manifest(path, "gqa", config, tensors)
        return
    if isinstance(layer, MlaLayer):
        config = {
            "hidden_dim": layer.hidden_dim,
            "heads": layer.heads,
            "d_nope": layer.d_nope,
            "d_rope": layer.d_rope,
            "r_kv": layer.r_kv,
            "r_q": None if layer.wdq is None else int(layer.wdq.shape[0]),
        }
        tensors = {
            "wdkv": layer.wdkv,
            "wuk": layer.wuk,
            "wuv": layer.wuv,
            "wkr": layer.wkr,
            "wq_nope": layer.wq_nope,
            "wq_rope": layer.wq_rope,
            "wo": layer.wo,
            "rope_thetas": layer.rope.thetas,
        }
        if layer.wdq is not None:
            tensors["wdq"] = layer.wdq
            tensors["wuq"] = layer.wuq
        if layer.out_bias is not None:
            tensors["out_bias"] = layer.out_bias
        _write_manifest(path, "mla", config, tensors)
        return
    raise ValueError(f"cannot bundle layer of type {type(layer).__name__}")


def load_layer_bundle(path: str | Path) -> Layer:
    """Load a layer bundle; validates manifest/tensor consistency."""
    path = Path(path)
    manifest, tensors = _read_manifest(path)
    kind = manifest.get("kind")
    config = manifest.get("config", {})
    try:
        if kind == "gqa":
            base = config.get("rope_base")
            return GqaLayer(
                wq=tensors["wq"],
                wk=tensors["wk"],
                wv=tensors["wv"],
                wo=tensors["wo"],
                rope=RopeSchedule(thetas=tensors["rope_thetas"], base=base),
                heads=int(config["heads"]),
                groups=int(config["groups"]),
            )
        if kind == "mla":
            return MlaLayer(
                wdkv=tensors["wdkv"],
                wuk=tensors["wuk"],
                wuv=tensors["wuv"],
                wkr=tensors["wkr"],
                wq_nope=tensors["wq_nope"],
                wq_rope=tensors["wq_rope"],
                wo=tensors["wo"],
                rope=RopeSchedule(thetas=tensors["rope_thetas"]),
                heads=int(config["heads"]),
                wdq=tensors.get("wdq"),
                wuq=tensors.get("wuq"),
                out_bias=tensors.get("out_bias"),
            )
    except KeyError as exc:
        raise TensorFileError(f"{path}: manifest is missing entry {exc}") from exc
    raise TensorFileError(f"{path}: unknown bundle kind {kind!r}")


def save_stats_bundle(path: str | Path, stats: FreqStats) -> None:
    """Persist calibration statistics for later merging or rotation solving."""
    config = {
        "group_size": stats.group_size,
        "groups": stats.groups,
        "head_dim": stats.head_dim,
        "sample_count": stats.sample_count,
    }
    tensors = {
        "sigma_x": stats.sigma_x,
        "sigma_y": stats.sigma_y,
        "dim_sq_sums": stats.dim_sq_sums,
    }
    _write_manifest(Path(path), "freq_stats", config, tensors)


def load_stats_bundle(path: str | Path) -> FreqStats:
    path = Path(path)
    manifest, tensors = _read_manifest(path)
    if manifest.get("kind") != "freq_stats":
        raise TensorFileError(f"{path}: not a freq_stats bundle")
    config = manifest.get("config", {})
    try:
        return FreqStats(
            group_size=int(config["group_size"]),
            groups=int(config["groups"]),
            head_dim=int(config["head_dim"]),
            sample_count=int(config["sample_count"]),
            sigma_x=tensors["sigma_x"],
            sigma_y=tensors["sigma_y"],
            dim_sq_sums=tensors["dim_sq_sums"],
        )
    except KeyError as exc:
        raise TensorFileError(f"{path}: manifest is missing entry {exc}") from exc
