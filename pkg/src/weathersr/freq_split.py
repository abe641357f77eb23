"""Frequency-domain information splitter.

The bicubic image and the noisy state are taken to the Fourier domain.  A
residual squeeze-excitation block reads their spectra and sets the width of
a Gaussian high-pass mask, clamped to ``[l/2, l]``.  The complement of the
mask yields the low-frequency image ``x_LF``; the high-passed spectrum,
brought back to the image domain and refined by a second ResSE block,
becomes multiplicative attention weights that pick out ``x_HF`` from the
bicubic image.

FFT convention: unnormalized forward, 1/(h*w) inverse (numpy/torch
defaults).  Masks are laid out like the raw FFT output, i.e. DC at [0, 0].
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch
from torch import nn

from .errors import NumericError, ShapeError
from .grid import GridField

DEFAULT_LIMIT_L = 64.0


def sigma_from_resse(resse_out, limit_l: float) -> float:
    """Clamp rule ``min(mean|R| + l/2, l)``; always in ``[l/2, l]``."""
    if not limit_l > 0:
        raise ValueError("limit_l must be positive")
    m = float(np.mean(np.abs(np.asarray(resse_out, dtype=np.float64))))
    return min(m + limit_l / 2.0, limit_l)


def sigma_batch(resse_out: torch.Tensor, limit_l: float) -> torch.Tensor:
    """Per-item clamp over all non-batch axes; returns shape (B,)."""
    m = resse_out.abs().flatten(1).mean(dim=1)
    return torch.clamp(m + limit_l / 2.0, max=limit_l)


@lru_cache(maxsize=8)
def distance_sq(shape: tuple[int, int]) -> np.ndarray:
    """Squared distance of every FFT bin from DC, in FFT (uncentered) layout."""
    h, w = shape
    u = np.arange(h) - h // 2
    v = np.arange(w) - w // 2
    d2 = u[:, None] ** 2 + v[None, :] ** 2
    d2 = np.fft.ifftshift(d2).astype(np.float64)
    d2.flags.writeable = False
    return d2


@dataclass(frozen=True)
class FrequencyMask:
    values: np.ndarray
    sigma: float
    limit_l: float | None = None

    @property
    def complement(self) -> np.ndarray:
        return 1.0 - self.values

    def centered(self) -> np.ndarray:
        return np.fft.fftshift(self.values)


def highpass_mask(shape, sigma: float, limit_l: float | None = None) -> FrequencyMask:
    h, w = shape
    if h < 2 or w < 2:
        raise ShapeError(f"mask needs at least 2x2, got {shape}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d2 = distance_sq((int(h), int(w)))
    return FrequencyMask(-np.expm1(-d2 / (2.0 * sigma * sigma)), float(sigma), limit_l)


def highpass_parts(x: np.ndarray, mask: FrequencyMask) -> tuple[np.ndarray, np.ndarray]:
    """(high-pass image, low-pass image) of ``x`` under ``mask`` and its complement."""
    spec = np.fft.fft2(x)
    return np.fft.ifft2(mask.values * spec).real, np.fft.ifft2(mask.complement * spec).real


class ResSEBlock(nn.Module):
    """Residual squeeze-and-excitation: ``x + body(x) * excite(pool(body(x)))``."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )
        # SiLU rather than ReLU: with one or two channels the bottleneck is a
        # single unit, and a dead ReLU would freeze the excitation for good
        self.excite = nn.Sequential(
            nn.Linear(channels, hidden),
            nn.SiLU(),
            nn.Linear(hidden, channels),
            nn.Sigmoid(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        r = self.body(x)
        s = self.excite(r.mean(dim=(-2, -1)))
        return x + r * s[..., None, None]


@dataclass(frozen=True)
class FiveMaps:
    x: GridField
    y: GridField
    x_hf: GridField
    x_lf: GridField
    x_t: GridField

    def stack(self) -> np.ndarray:
        return np.stack([m.values for m in (self.x, self.y, self.x_hf, self.x_lf, self.x_t)])


class FDInfoSplitter(nn.Module):
    """Learnable splitter producing the five-channel conditioning stack.

    Channel order: [x_interp, y_noised, x_HF, x_LF, x_t].
    """

    out_channels = 5
    interp_channel = 0

    def __init__(self, limit_l: float = DEFAULT_LIMIT_L, reduction: int = 4):
        super().__init__()
        self.limit_l = float(limit_l)
        self.spectral = ResSEBlock(2, reduction)
        self.refine = ResSEBlock(1, reduction)

    def decompose(self, x_interp: torch.Tensor, y_noised: torch.Tensor,
                  limit_l: float | None = None) -> dict[str, torch.Tensor]:
        if x_interp.shape != y_noised.shape:
            raise ShapeError(f"shape mismatch {tuple(x_interp.shape)} vs {tuple(y_noised.shape)}")
        h, w = x_interp.shape[-2:]
        fx = torch.fft.fft2(x_interp)
        fy = torch.fft.fft2(y_noised)
        # magnitudes on an orthonormal scale, DC centred for the conv layers
        mags = torch.cat([fx.abs(), fy.abs()], dim=1) / float(np.sqrt(h * w))
        feats = self.spectral(torch.fft.fftshift(mags, dim=(-2, -1)))
        sigma = sigma_batch(feats, self.limit_l if limit_l is None else float(limit_l))
        d2 = torch.tensor(distance_sq((h, w)), dtype=x_interp.dtype, device=x_interp.device)
        s2 = (2.0 * sigma * sigma).view(-1, 1, 1, 1)
        hp = -torch.expm1(-d2 / s2)
        high_spec = hp * fx
        x_lf = torch.fft.ifft2((1.0 - hp) * fx).real
        high_img = torch.fft.ifft2(high_spec).real
        weights = torch.sigmoid(self.refine(high_img.abs()))
        x_hf = x_interp * weights
        out = {"sigma": sigma, "mask": hp, "high_spec": high_spec, "high_img": high_img,
               "x_lf": x_lf, "x_hf": x_hf}
        if not torch.isfinite(x_lf).all() or not torch.isfinite(x_hf).all():
            raise NumericError("non-finite frequency split output")
        return out

    def forward(self, x_interp: torch.Tensor, y_noised: torch.Tensor,
                x_t: torch.Tensor | None = None) -> torch.Tensor:
        parts = self.decompose(x_interp, y_noised)
        if x_t is None:
            x_t = x_interp + y_noised
        return torch.cat([x_interp, y_noised, parts["x_hf"], parts["x_lf"], x_t], dim=1)


def split(x_interp: GridField, y_noised: GridField, x_t: GridField,
          resse: FDInfoSplitter, limit_l: float | None = None) -> FiveMaps:
    """Run the splitter on single fields (no gradient)."""
    shapes = {x_interp.shape, y_noised.shape, x_t.shape}
    if len(shapes) != 1:
        raise ShapeError(f"split inputs disagree in shape: {shapes}")
    p = next(resse.parameters())

    def t(f):
        return torch.tensor(np.asarray(f.values), dtype=p.dtype, device=p.device)[None, None]

    with torch.no_grad():
        parts = resse.decompose(t(x_interp), t(y_noised), limit_l)
    return FiveMaps(
        x=x_interp,
        y=y_noised,
        x_hf=x_interp.replace(values=parts["x_hf"][0, 0].cpu().numpy().astype(np.float64)),
        x_lf=x_interp.replace(values=parts["x_lf"][0, 0].cpu().numpy().astype(np.float64)),
        x_t=x_t,
    )
