"""Run configuration: built-in defaults < YAML file < command-line flags."""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .cometa import KINDS, check_kinds
from .dataio import (InteractionLog, SplitSpec, SyntheticConfig, load_csv, load_movielens,
                     synthesize)
from .evalharness import PHASES, ProtocolConfig
from .seg import SegTrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, Any] = {
    "data": {
        "source": "synthetic",
        "seed": 0,
        "synthetic": {},
        "movielens": {"ratings": None, "users": None, "movies": None},
        "csv": {"path": None, "columns": {}, "multi_sep": None},
    },
    "split": {"n_old": 200, "n_new": 80, "k_fold": 20, "holdout": None},
    "model": {"dim": 16, "hidden": [64, 64, 64], "lr": 0.001, "batch_size": 256,
              "pretrain_epochs": 8},
    "warm": {"epochs": 1, "lr": 0.001},
    "cometa": {"k": 8, "positive_only": True, "eta": 0.001, "beta": 0.1, "m": 20, "lr": 0.001,
               "epochs": 10, "first_order": False, "hidden": [64, 64]},
    "run": {"kinds": list(KINDS), "seeds": [0, 1, 2, 3, 4], "out": "runs/default",
            "phase": "all", "parallel_seeds": 1},
}


# sections whose keys are not fixed in advance
FREEFORM = {("data", "synthetic"), ("data", "csv", "columns")}


def _merge(base: dict, update: dict, path: tuple = ()) -> dict:
    for key, value in update.items():
        where = ".".join(path + (key,))
        if key not in base and path not in FREEFORM:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base.get(key), dict) and path + (key,) not in FREEFORM:
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            _merge(base[key], value, path + (key,))
        else:
            base[key] = value
    return base


def load_config(path=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"missing config file: {path}")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        _merge(cfg, data)
    return cfg


def set_value(cfg: dict, dotted: str, raw: str) -> None:
    """Apply ``section.key=value``; the value is parsed as YAML."""
    keys = tuple(dotted.split("."))
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if not isinstance(node, dict) or (keys[-1] not in node and keys[:-1] not in FREEFORM):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = yaml.safe_load(raw)


def validate(cfg: dict) -> dict:
    run = cfg["run"]
    try:
        run["kinds"] = check_kinds(run["kinds"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not run["seeds"] or not all(isinstance(s, int) for s in run["seeds"]):
        raise ConfigError("run.seeds must be a non-empty list of integers")
    if run["phase"] not in ("all",) + PHASES[:1]:
        raise ConfigError(f"run.phase must be 'all' or 'cold', got {run['phase']!r}")
    if int(run["parallel_seeds"]) < 1:
        raise ConfigError("run.parallel_seeds must be >= 1")
    if cfg["data"]["source"] not in ("synthetic", "movielens", "csv"):
        raise ConfigError(f"unknown data.source {cfg['data']['source']!r}")
    try:
        split_spec(cfg)
        protocol_config(cfg)
        if cfg["data"]["source"] == "synthetic":
            synthetic_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def split_spec(cfg: dict) -> SplitSpec:
    s = cfg["split"]
    holdout = s["holdout"] if s["holdout"] is not None else 2 * cfg["cometa"]["m"]
    return SplitSpec(s["n_old"], s["n_new"], s["k_fold"], holdout)


def synthetic_config(cfg: dict) -> SyntheticConfig:
    kw = dict(cfg["data"]["synthetic"])
    for key in ("old_count", "new_count"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return SyntheticConfig(**kw)


def protocol_config(cfg: dict) -> ProtocolConfig:
    m, c, w = cfg["model"], cfg["cometa"], cfg["warm"]
    seg = SegTrainConfig(eta=c["eta"], beta=c["beta"], m=c["m"], lr=c["lr"], epochs=c["epochs"],
                         first_order=c["first_order"], hidden=tuple(c["hidden"]))
    return ProtocolConfig(dim=m["dim"], hidden=tuple(m["hidden"]), lr=m["lr"],
                          batch_size=m["batch_size"], pretrain_epochs=m["pretrain_epochs"],
                          warm_epochs=w["epochs"], warm_lr=w["lr"], k=c["k"],
                          positive_only=c["positive_only"], seg=seg)


def load_data(cfg: dict) -> InteractionLog:
    data = cfg["data"]
    if data["source"] == "synthetic":
        return synthesize(synthetic_config(cfg), seed=data["seed"])
    if data["source"] == "movielens":
        ml = data["movielens"]
        for key in ("ratings", "users", "movies"):
            if not ml.get(key):
                raise ConfigError(f"data.movielens.{key} is not set")
        return load_movielens(ml["ratings"], ml["users"], ml["movies"])
    spec = data["csv"]
    if not spec.get("path"):
        raise ConfigError("data.csv.path is not set")
    return load_csv(spec["path"], spec["columns"], spec.get("multi_sep"))
