"""Experiment configuration files (YAML or JSON) with strict key checking."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from .data import SyntheticConfig
from .errors import ConfigError, DataError
from .losses import MEDIAN, CompositeLossConfig, KernelConfig
from .trainer import TrainConfig

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "synthetic": {"dim": 16, "n_source": 800, "n_target": 400,
                      "shift_strength": 1.5, "noise_std": 0.05},
        "embeddings": None,
        "val_fraction": 0.2,
    },
    "train": {
        "variant": "SourceOnly",
        "epochs": 50,
        "pretrain_epochs": 10,
        "batch_size": 16,
        "lr": 1e-3,
        "disc_lr": None,
        "grl_lambda": 1.0,
        "normalize_labels": False,
        "adapt_layers": "conv+fc1",
        "eval_pairs": 400,
        "loss": {"alpha": 0.3, "beta": 0.0, "gamma": 0.1, "sigma_smooth": 0.0,
                 "regression_norm": "L1", "kernel_bandwidth": MEDIAN},
    },
    "grid": {"variants": None, "gammas": None, "layers": None, "rank": None},
    "mds": {"max_items": 100, "max_iter": 500, "tol": 1e-9},
}


@dataclass
class ExperimentConfig:
    seed: int
    output_dir: Path
    synthetic: Optional[SyntheticConfig]
    embeddings: Optional[List[Path]]
    val_fraction: float
    train: TrainConfig
    grid: Dict[str, Any] = field(default_factory=dict)
    mds: Dict[str, Any] = field(default_factory=dict)


def _merge(defaults: dict, given: dict, where: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {type(given).__name__}")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown} in {where or 'top level'}")
    out = {}
    for key, default in defaults.items():
        value = given.get(key, default)
        if isinstance(default, dict):
            sub = given.get(key)
            value = dict(default) if sub is None else _merge(default, sub, f"{where}.{key}" if where else key)
        out[key] = value
    return out


def _check_type(value, kinds, name):
    if isinstance(value, bool) and bool not in kinds:
        raise ConfigError(f"{name} must be {'/'.join(k.__name__ for k in kinds)}, got a boolean")
    if not isinstance(value, kinds):
        raise ConfigError(f"{name} must be {'/'.join(k.__name__ for k in kinds)}, got {value!r}")
    return value


def build_config(raw: Optional[dict], overrides: Optional[dict] = None) -> ExperimentConfig:
    """Validate a raw mapping against the schema and build typed configs."""
    doc = _merge(DEFAULTS, raw or {}, "")
    for key, value in (overrides or {}).items():
        if value is not None:
            doc[key] = value
    seed = _check_type(doc["seed"], (int,), "seed")
    data, tr, loss = doc["data"], doc["train"], doc["train"]["loss"]

    embeddings = data["embeddings"]
    if embeddings is not None:
        if isinstance(embeddings, str):
            embeddings = [embeddings]
        if not isinstance(embeddings, list) or not embeddings:
            raise ConfigError("data.embeddings must be a path or a nonempty list of paths")
        embeddings = [Path(p) for p in embeddings]
        synthetic = None
    else:
        syn = data["synthetic"]
        for k in ("dim", "n_source", "n_target"):
            _check_type(syn[k], (int,), f"data.synthetic.{k}")
        for k in ("shift_strength", "noise_std"):
            _check_type(syn[k], (int, float), f"data.synthetic.{k}")
        try:
            synthetic = SyntheticConfig(seed=seed, **syn)
        except DataError as exc:
            raise ConfigError(f"data.synthetic: {exc}") from None

    for k in ("epochs", "pretrain_epochs", "batch_size", "eval_pairs"):
        _check_type(tr[k], (int,), f"train.{k}")
    for k in ("alpha", "beta", "gamma", "sigma_smooth"):
        _check_type(loss[k], (int, float), f"train.loss.{k}")
    bw = loss["kernel_bandwidth"]
    try:
        kernel = KernelConfig(bw if bw == MEDIAN else float(bw))
        loss_cfg = CompositeLossConfig(alpha=float(loss["alpha"]), beta=float(loss["beta"]),
                                       gamma=float(loss["gamma"]),
                                       sigma_smooth=float(loss["sigma_smooth"]),
                                       regression_norm=str(loss["regression_norm"]), kernel=kernel)
        train_cfg = TrainConfig(
            variant=tr["variant"], epochs=tr["epochs"], batch_size=tr["batch_size"],
            lr=float(tr["lr"]), loss=loss_cfg, adapt_layers=tr["adapt_layers"],
            normalize_labels=bool(tr["normalize_labels"]), pretrain_epochs=tr["pretrain_epochs"],
            seed=seed, grl_lambda=float(tr["grl_lambda"]),
            disc_lr=None if tr["disc_lr"] is None else float(tr["disc_lr"]),
            eval_pairs=tr["eval_pairs"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"train: {exc}") from None

    val_fraction = _check_type(data["val_fraction"], (int, float), "data.val_fraction")
    if not 0 < val_fraction < 1:
        raise ConfigError("data.val_fraction must lie in (0, 1)")
    grid = doc["grid"]
    for key, value in grid.items():
        if value is not None and (not isinstance(value, list) or len(value) == 0):
            raise ConfigError(f"grid.{key} must be a nonempty list")
    mds = doc["mds"]
    _check_type(mds["max_items"], (int,), "mds.max_items")
    _check_type(mds["max_iter"], (int,), "mds.max_iter")
    if mds["max_items"] < 3:
        raise ConfigError("mds.max_items must be at least 3")
    return ExperimentConfig(seed, Path(doc["output_dir"]), synthetic, embeddings,
                            float(val_fraction), train_cfg, grid, mds)


def load_config(path, overrides: Optional[dict] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from None
    return build_config(raw, overrides)


def with_seed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    syn = None if cfg.synthetic is None else dataclasses.replace(cfg.synthetic, seed=seed)
    return dataclasses.replace(cfg, seed=seed, synthetic=syn,
                               train=dataclasses.replace(cfg.train, seed=seed))


def default_config_text() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False)
