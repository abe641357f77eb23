"""Validation metrics: MSE, MAE, PSNR and Gaussian-window SSIM."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Iterable

import numpy as np
from scipy import ndimage

from .errors import ContractError, DomainError, ShapeError
from .grid import GridField

K1, K2 = 0.01, 0.03
WINDOW = 11
WINDOW_SIGMA = 1.5


def _pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, GridField) and isinstance(ref, GridField) and pred.units != ref.units:
        raise ContractError(f"units differ: {pred.units} vs {ref.units}")
    a = np.asarray(pred.values if isinstance(pred, GridField) else pred, dtype=np.float64)
    b = np.asarray(ref.values if isinstance(ref, GridField) else ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"prediction shape {a.shape} != reference shape {b.shape}")
    return a, b


def error_metrics(pred, ref) -> tuple[float, float]:
    a, b = _pair(pred, ref)
    d = a - b
    return float(np.mean(d * d)), float(np.mean(np.abs(d)))


def psnr_from_mse(mse: float, data_range: float) -> float:
    if not data_range > 0:
        raise DomainError(f"data_range must be positive, got {data_range}")
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def psnr(pred, ref, data_range: float) -> float:
    if not data_range > 0:
        raise DomainError(f"data_range must be positive, got {data_range}")
    mse, _ = error_metrics(pred, ref)
    return psnr_from_mse(mse, data_range)


@lru_cache(maxsize=4)
def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    g /= g.sum()
    w = np.outer(g, g)
    w.flags.writeable = False
    return w


def _filter_valid(x: np.ndarray, g1: np.ndarray) -> np.ndarray:
    """Separable correlation with the 1D Gaussian, keeping only full windows."""
    r = len(g1) // 2
    out = ndimage.correlate1d(x, g1, axis=0, mode="constant")[r:x.shape[0] - r]
    return ndimage.correlate1d(out, g1, axis=1, mode="constant")[:, r:x.shape[1] - r]


def ssim_map(pred, ref, data_range: float) -> np.ndarray:
    a, b = _pair(pred, ref)
    if not data_range > 0:
        raise DomainError(f"data_range must be positive, got {data_range}")
    if min(a.shape) < WINDOW:
        raise ShapeError(f"SSIM window {WINDOW} larger than field {a.shape}")
    g = gaussian_window()
    g1 = np.sqrt(np.diag(g))
    g1 = g1 / g1.sum()
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, g1)
    mu_b = _filter_valid(b, g1)
    var_a = _filter_valid(a * a, g1) - mu_a * mu_a
    var_b = _filter_valid(b * b, g1) - mu_b * mu_b
    cov = _filter_valid(a * b, g1) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(pred, ref, data_range: float) -> float:
    """Mean SSIM over all full 11x11 Gaussian (sigma 1.5) windows."""
    a, b = _pair(pred, ref)
    if np.array_equal(a, b):
        if min(a.shape) < WINDOW:
            raise ShapeError(f"SSIM window {WINDOW} larger than field {a.shape}")
        return 1.0
    return float(np.mean(ssim_map(a, b, data_range)))


@dataclass(frozen=True)
class MetricsReport:
    mse: float
    mae: float
    psnr: float
    ssim: float
    n_samples: int
    data_range: float

    def as_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.as_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        vals = {}
        for line in text.splitlines():
            if "=" in line:
                k, _, v = line.partition("=")
                vals[k.strip()] = float(v)
        vals["n_samples"] = int(vals["n_samples"])
        return cls(**vals)


def evaluate_fields(preds: Iterable, refs: Iterable, data_range: float) -> MetricsReport:
    """Average per-field metrics; PSNR is derived from the pooled MSE."""
    mses, maes, ssims = [], [], []
    for p, r in zip(preds, refs, strict=True):
        mse, mae = error_metrics(p, r)
        mses.append(mse)
        maes.append(mae)
        ssims.append(ssim(p, r, data_range))
    if not mses:
        raise ContractError("no fields to evaluate")
    mse = float(np.mean(mses))
    return MetricsReport(mse=mse, mae=float(np.mean(maes)), psnr=psnr_from_mse(mse, data_range),
                         ssim=float(np.mean(ssims)), n_samples=len(mses), data_range=float(data_range))
