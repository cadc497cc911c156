"""Run configuration: defaults, a JSON document, then command-line overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict
from pathlib import Path

from .nnet.model import ModelConfig
from .nnet.train import TrainConfig
from .signal_pre import PreprocessConfig


class ConfigError(ValueError):
    pass


def _model_defaults() -> dict:
    d = ModelConfig().to_dict()
    d.pop("head_dim")
    d.pop("n_leads")
    return d


DEFAULTS = {
    "seed": 0,
    "paths": {
        "records": None,       # directory of record headers (or CSVs)
        "ecg_index": None,
        "discharges": None,
        "names": None,
        "outcomes": None,
        "risk_matrix": None,
        "checkpoint": None,
        "pretrained": None,
    },
    "preprocess": asdict(PreprocessConfig()),
    "csv_fs": None,
    "cohort": {"min_count": 50, "policy": "in-stay", "window_days": 1.0,
               "one_per_stay": False},
    "model": _model_defaults(),
    "train": asdict(TrainConfig()),
    "split": {"val": 0.15, "test": 0.15},
    "evaluate": {"n_resamples": 1000, "alpha": 0.05, "aggregate": "mean"},
    "survival": {"horizon_years": 10.0},
    "comorbidity": {"n_bins": 10, "mi_floor": None, "pairs": []},
    "synth": {
        "n": 400,
        "labels": ["E11", "I44", "I48"],
        "effects": {"I48": {"heart_rate": 15.0}, "I44": {"qrs_width": 0.004},
                    "E11": {"t_amp": -0.06}},
        "prevalence": {"E11": 0.2, "I44": 0.2, "I48": 0.2},
        "names": {"E11": "Type 2 diabetes mellitus", "I44": "Atrioventricular and left bundle-branch block",
                  "I48": "Atrial fibrillation and flutter", "Z00": "General examination"},
        "duration_s": 10.0,
        "fs": 500,
        "hr_per_sd": 2.0,
        "baseline_hazard": 0.02,
        "horizon_years": 10.0,
    },
}


def deep_merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(val, dict) and key not in ("effects", "prevalence", "names"):
            out[key] = deep_merge(base[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
        if isinstance(doc, dict) and "command" in doc and isinstance(doc.get("config"), dict):
            doc = doc["config"]  # a run_metadata.json re-executes its run
        if not isinstance(doc, dict):
            raise ConfigError(f"{p}: expected a JSON object")
        cfg = deep_merge(cfg, doc)
    if overrides:
        cfg = deep_merge(cfg, overrides)
    validate(cfg)
    return cfg


def validate(cfg: dict):
    try:
        PreprocessConfig(**cfg["preprocess"])
        TrainConfig(**cfg["train"])
        ModelConfig(**cfg["model"], n_leads=12, head_dim=1)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    if cfg["cohort"]["policy"] not in ("in-stay", "window"):
        raise ConfigError(f"unknown alignment policy {cfg['cohort']['policy']!r}")
    if cfg["cohort"]["min_count"] < 1:
        raise ConfigError("cohort.min_count must be >= 1")
    s = cfg["split"]
    if not (0 < s["val"] < 1 and 0 < s["test"] < 1 and s["val"] + s["test"] < 1):
        raise ConfigError("split fractions must be in (0, 1) and leave room for training")
    if cfg["evaluate"]["aggregate"] not in ("mean", "max", "latest"):
        raise ConfigError("evaluate.aggregate must be mean, max or latest")
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")


def preprocess_config(cfg) -> PreprocessConfig:
    return PreprocessConfig(**cfg["preprocess"])


def train_config(cfg) -> TrainConfig:
    return TrainConfig(**dict(cfg["train"], seed=cfg["seed"]))


def model_config(cfg, n_leads: int, head_dim: int) -> ModelConfig:
    return ModelConfig(**cfg["model"], n_leads=n_leads, head_dim=head_dim)
