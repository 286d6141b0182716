"""Experiment configuration files (YAML or JSON) with strict key checking.

Example::

    architecture:
      family: small-vgg-bn       # mlp | toy-resnet | small-vgg-bn | resnet18 | concat-block
      num_classes: 10
      input_shape: [3, 32, 32]
      width: 8                   # optional channel scale
      embedding_dim: null        # set (e.g. 128) for retrieval
      graph_file: null           # custom graph description, overrides family
    split:
      technique: kels            # kels | wels
      split_rate: 0.5
    train:
      epochs: 20
      generations: 5
      batch_size: 32
      lr: 0.256
      loss: ce                   # ce | smooth-ce | triplet
    data:
      source: synthetic-blobs    # synthetic-blobs | idx-pair | tensor-manifest
      classes: 10
      per_class: 60
    seed: 0
    output_dir: runs/demo
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .evolve import TrainConfig

ARCH_KEYS = {"family", "num_classes", "input_shape", "width", "embedding_dim", "graph_file",
             "hidden", "branch_widths"}
SPLIT_KEYS = {"technique", "split_rate"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "technique", "split_rate"}
DATA_KEYS = {
    "synthetic-blobs": {"source", "classes", "per_class", "noise", "signal", "grid", "eval_fraction"},
    "idx-pair": {"source", "train_images", "train_labels", "eval_images", "eval_labels", "limit",
                 "eval_limit", "eval_fraction"},
    "tensor-manifest": {"source", "manifest", "eval_fraction"},
}
TOP_KEYS = {"architecture", "split", "train", "data", "seed", "output_dir"}
FAMILIES = ("mlp", "toy-resnet", "small-vgg-bn", "resnet18", "concat-block")

DEFAULTS: dict[str, Any] = {
    "architecture": {"family": "small-vgg-bn", "num_classes": 10, "input_shape": [3, 32, 32]},
    "split": {"technique": "kels", "split_rate": 0.5},
    "train": {"epochs": 20, "generations": 5, "batch_size": 32},
    "data": {"source": "synthetic-blobs", "classes": 10, "per_class": 60},
    "seed": 0,
    "output_dir": "runs/default",
}


@dataclass
class ExperimentConfig:
    architecture: dict
    split: dict
    train: TrainConfig
    data: dict
    seed: int
    output_dir: Path
    base_dir: Path = field(default_factory=Path.cwd)

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def to_dict(self) -> dict:
        train = dataclasses.asdict(self.train)
        for k in ("seed", "technique", "split_rate"):
            train.pop(k)
        return {"architecture": self.architecture, "split": self.split, "train": train,
                "data": self.data, "seed": self.seed, "output_dir": str(self.output_dir)}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "data":
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def apply_override(raw: dict, item: str) -> None:
    """Apply a ``dot.path=value`` override; the value is parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, _, value = item.partition("=")
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r}: {p!r} is not a section")
    node[parts[-1]] = yaml.safe_load(value)


def _strict(section: str, d: Any, allowed: set[str]) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")
    return d


def parse_config(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    _strict("<top>", raw, TOP_KEYS)
    merged = _merge(DEFAULTS, raw)
    arch = _strict("architecture", merged["architecture"], ARCH_KEYS)
    split = _strict("split", merged["split"], SPLIT_KEYS)
    train = _strict("train", merged["train"], TRAIN_KEYS)
    data = merged["data"]
    if not isinstance(data, dict) or data.get("source") not in DATA_KEYS:
        raise ConfigError(f"data.source must be one of {sorted(DATA_KEYS)}")
    _strict("data", data, DATA_KEYS[data["source"]])
    if not arch.get("graph_file") and arch.get("family") not in FAMILIES:
        raise ConfigError(f"unknown architecture family {arch.get('family')!r}")
    if not isinstance(arch.get("num_classes"), int) or arch["num_classes"] < 2:
        raise ConfigError("architecture.num_classes must be an integer >= 2")
    try:
        seed = int(merged["seed"])
        cfg = TrainConfig(seed=seed, technique=split["technique"], split_rate=float(split["split_rate"]),
                          **train)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.task == "retrieval" and not arch.get("embedding_dim"):
        raise ConfigError("triplet loss needs architecture.embedding_dim")
    if cfg.task == "classification" and arch.get("embedding_dim"):
        raise ConfigError("embedding_dim is only valid with the triplet loss")
    base = base_dir or Path.cwd()
    return ExperimentConfig(arch, split, cfg, data, seed, Path(merged["output_dir"]), base)


def load_config(path, overrides=(), seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    raw = raw or {}
    for item in overrides:
        apply_override(raw, item)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = out
    return parse_config(raw, path.parent)
