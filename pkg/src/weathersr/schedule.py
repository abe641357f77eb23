"""Linear beta schedule and the closed-form forward noising process.

Timesteps are 1-based: ``t = 1`` is the least noisy step and ``t = T`` the
noisiest.  Arrays are stored 0-based, so step ``t`` lives at index ``t - 1``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, DomainError, ShapeError
from .grid import GridField


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @classmethod
    def from_betas(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigurationError("beta must be a non-empty 1D sequence")
        if np.any(beta < 0) or np.any(beta >= 1):
            raise ConfigurationError("beta values must lie in [0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        for arr in (beta, alpha, alpha_bar):
            arr.flags.writeable = False
        return cls(int(beta.size), beta, alpha, alpha_bar)

    def check_t(self, t) -> None:
        ts = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
        if np.any(ts < 1) or np.any(ts > self.T):
            raise DomainError(f"timestep out of range 1..{self.T}: {t}")

    def beta_at(self, t: int) -> float:
        self.check_t(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self.check_t(t)
        return float(self.alpha[t - 1])

    def alpha_bar_at(self, t: int) -> float:
        self.check_t(t)
        return float(self.alpha_bar[t - 1])

    def params(self) -> dict:
        return {"T": self.T, "beta_start": float(self.beta[0]), "beta_end": float(self.beta[-1])}


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ConfigurationError(f"T must be an integer >= 2, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    frac = np.arange(T, dtype=np.float64) / (T - 1)
    beta = beta_start + frac * (beta_end - beta_start)
    beta[-1] = beta_end
    return NoiseSchedule.from_betas(beta)


def forward_noise(y0: GridField, t: int, eps: GridField, sched: NoiseSchedule) -> GridField:
    """Draw from q(y_t | y_0) given the standard-normal draw ``eps``."""
    if y0.shape != eps.shape:
        raise ShapeError(f"eps shape {eps.shape} != y0 shape {y0.shape}")
    ab = sched.alpha_bar_at(t)
    return y0.replace(values=np.sqrt(ab) * y0.values + np.sqrt(1.0 - ab) * eps.values)


def noise_batch(y0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                sched: NoiseSchedule) -> torch.Tensor:
    """Batched forward noising; ``t`` holds one 1-based step per batch item."""
    if y0.shape != eps.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != y0 shape {tuple(y0.shape)}")
    sched.check_t(t)
    ab = torch.tensor(sched.alpha_bar, dtype=y0.dtype, device=y0.device)[t - 1]
    ab = ab.view(-1, *([1] * (y0.ndim - 1)))
    return ab.sqrt() * y0 + (1.0 - ab).sqrt() * eps
