"""Run configuration: YAML files with nested sections and env overrides.

Any key can be overridden through ``WEATHERSR_<SECTION>__<KEY>=value``
(``__`` separates nesting levels; values are parsed as YAML scalars).
"""
from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from datetime import date, datetime, timezone
from importlib import resources
from typing import Any

import yaml

from .denoiser import VARIANTS, DenoiserConfig
from .errors import ConfigurationError

ENV_PREFIX = "WEATHERSR_"

DEFAULTS: dict[str, Any] = {
    "variant": "resdiff",
    "seed": 0,
    "output_dir": "runs/default",
    "data": {
        "synthetic": False,
        "smoothness": 4.0,
        "n_train": 64,
        "n_validation": 8,
        "validation_offset": 100000,
        "lr_path": None,
        "hr_path": None,
        "variable": "t2m",
        "train_start": "1979-01-01",
        "train_end": "2015-02-01",
        "validation_start": "2016-01-01",
        "validation_end": "2016-02-01",
        "month": 1,
    },
    "schedule": {"T": 1000, "beta_start": 1e-6, "beta_end": 1e-2},
    "model": {
        "base_channels": 64,
        "channel_mults": [1, 2, 4, 8],
        "resnet_blocks_per_level": 2,
        "dropout": 0.2,
        "attention_levels": None,
    },
    "fd_splitter": {"limit_l": 64.0},
    "attention": {"heads": 4},
    "dwt": {"family": "haar", "guidance_channels": 1},
    "train": {
        "iterations": 200000,
        "batch_size": None,
        "validate_every": 10000,
        "learning_rate": 1e-4,
        "ema_decay": 0.9999,
        "adam_betas": [0.9, 0.999],
        "adam_eps": 1e-8,
        "log_every": 100,
    },
    "validation": {"seed": 1234, "batch_size": 4, "max_samples": None},
}

DEFAULT_BATCH = {"sr3": 16, "resdiff": 4, "resdiff_physics": 4}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            # env vars arrive lower-cased
            key = next((k for k in base if k.lower() == str(key).lower()), key)
        where = f"{path}{key}"
        if key not in base:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigurationError(f"config key {where!r} must be a mapping")
            out[key] = _merge(base[key], val, where + ".")
        else:
            out[key] = val
    return out


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        keys = [k.lower() for k in name[len(ENV_PREFIX):].split("__")]
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = yaml.safe_load(raw)
    return out


def _read_source(source: str | os.PathLike) -> dict:
    source = os.fspath(source)
    if source.startswith("preset:"):
        name = source.split(":", 1)[1]
        try:
            text = resources.files("weathersr.presets").joinpath(f"{name}.yaml").read_text()
        except FileNotFoundError:
            raise ConfigurationError(f"no bundled preset named {name!r}") from None
    else:
        try:
            with open(source) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {source}: {exc}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"invalid YAML in {source}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"config {source} must be a mapping")
    return data


def parse_date(value) -> datetime:
    if isinstance(value, datetime):
        dt = value
    elif isinstance(value, date):
        dt = datetime(value.year, value.month, value.day)
    else:
        try:
            dt = datetime.fromisoformat(str(value))
        except ValueError:
            raise ConfigurationError(f"invalid date {value!r}") from None
    return dt if dt.tzinfo else dt.replace(tzinfo=timezone.utc)


@dataclass
class RunConfig:
    raw: dict

    @property
    def variant(self) -> str:
        return self.raw["variant"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def output_dir(self) -> str:
        return self.raw["output_dir"]

    @property
    def data(self) -> dict:
        return self.raw["data"]

    @property
    def schedule(self) -> dict:
        return self.raw["schedule"]

    @property
    def train(self) -> dict:
        return self.raw["train"]

    @property
    def validation(self) -> dict:
        return self.raw["validation"]

    @property
    def batch_size(self) -> int:
        return int(self.train["batch_size"])

    def denoiser_config(self) -> DenoiserConfig:
        m = self.raw["model"]
        return DenoiserConfig(
            variant=self.variant,
            base_channels=int(m["base_channels"]),
            channel_mults=list(m["channel_mults"]),
            resnet_blocks_per_level=int(m["resnet_blocks_per_level"]),
            dropout=float(m["dropout"]),
            attention_levels=m["attention_levels"],
            heads=int(self.raw["attention"]["heads"]),
            limit_l=float(self.raw["fd_splitter"]["limit_l"]),
            guidance_channels=int(self.raw["dwt"]["guidance_channels"]),
        )

    def dump(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(self.raw, fh, sort_keys=False)


def resolve(raw: dict) -> RunConfig:
    raw = copy.deepcopy(raw)
    if raw["variant"] not in VARIANTS:
        raise ConfigurationError(f"unknown variant {raw['variant']!r}")
    tr = raw["train"]
    if tr["batch_size"] is None:
        tr["batch_size"] = DEFAULT_BATCH[raw["variant"]]
    for key in ("iterations", "batch_size", "validate_every"):
        if not isinstance(tr[key], int) or tr[key] < 1:
            raise ConfigurationError(f"train.{key} must be a positive integer")
    if tr["iterations"] % tr["validate_every"]:
        raise ConfigurationError("train.validate_every must divide train.iterations")
    if not 0.0 <= float(tr["ema_decay"]) <= 1.0:
        raise ConfigurationError("train.ema_decay must lie in [0, 1]")
    if float(tr["learning_rate"]) <= 0:
        raise ConfigurationError("train.learning_rate must be positive")
    if raw["dwt"]["family"] not in ("haar", "db1"):
        raise ConfigurationError("dwt.family must be haar")
    d = raw["data"]
    if not d["synthetic"] and (not d["lr_path"] or not d["hr_path"]):
        raise ConfigurationError("data.lr_path and data.hr_path are required unless data.synthetic is set")
    if not d["synthetic"]:
        for k in ("train_start", "train_end", "validation_start", "validation_end"):
            parse_date(d[k])
    cfg = RunConfig(raw)
    cfg.denoiser_config()
    return cfg


def load_config(source: str | os.PathLike | None = None, environ=None, **overrides) -> RunConfig:
    raw = copy.deepcopy(DEFAULTS)
    if source is not None:
        raw = _merge(raw, _read_source(source))
    raw = _merge(raw, env_overrides(environ))
    if overrides:
        raw = _merge(raw, overrides)
    return resolve(raw)
