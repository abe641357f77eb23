"""Self-describing checkpoint containers (one ``torch.save`` file each)."""
from __future__ import annotations

import os
import pickle

import torch

from .denoiser import DenoiserConfig, DenoiserModel, build_model
from .engine import TrainState, make_train_state
from .errors import ConfigurationError
from .grid import StandardizationStats
from .schedule import NoiseSchedule, make_linear_schedule

FORMAT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, state: TrainState, sched: NoiseSchedule,
                    run_config: dict | None = None, data_kind: str = "synthetic") -> None:
    model = state.model
    payload = {
        "format": FORMAT_VERSION,
        "denoiser_config": model.config.to_dict(),
        "schedule": sched.params(),
        "stats": state.stats.as_dict() if state.stats is not None else None,
        "data_kind": data_kind,
        "iteration": state.iteration,
        "ema_decay": state.ema_decay,
        "params": model.net.state_dict(),
        "ema_params": model.ema_net.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "generator_state": state.generator.get_state(),
        "torch_rng_state": torch.random.get_rng_state(),
        "run_config": run_config,
    }
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


class Checkpoint:
    """Loaded checkpoint contents."""

    def __init__(self, payload: dict):
        self.payload = payload
        self.config = DenoiserConfig(**payload["denoiser_config"])
        s = payload["schedule"]
        self.schedule = make_linear_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]))
        self.stats = StandardizationStats(**payload["stats"]) if payload["stats"] else None
        self.iteration = int(payload["iteration"])
        self.data_kind = payload.get("data_kind", "synthetic")
        self.run_config = payload.get("run_config")

    def model(self) -> DenoiserModel:
        model = build_model(self.config, seed=0)
        model.net.load_state_dict(self.payload["params"])
        model.ema_net.load_state_dict(self.payload["ema_params"])
        return model

    def train_state(self, learning_rate: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8) -> TrainState:
        state = make_train_state(self.model(), learning_rate, 0, self.payload["ema_decay"], self.stats,
                                 betas, eps)
        state.optimizer.load_state_dict(self.payload["optimizer"])
        state.generator.set_state(self.payload["generator_state"])
        state.iteration = self.iteration
        return state

    def restore_global_rng(self) -> None:
        torch.random.set_rng_state(self.payload["torch_rng_state"])


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise ConfigurationError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_VERSION:
        raise ConfigurationError(f"{path} is not a weathersr checkpoint")
    return Checkpoint(payload)
