"""Single-level orthonormal Haar DWT and the HF-guided cross-attention block."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ShapeError
from .grid import GridField

WAVELETS = ("haar", "db1")


def haar_dwt2(x):
    """Return (ll, lh, hl, hh) over the last two axes.

    ``lh`` is low-pass along width / high-pass along height (pywt's cH),
    ``hl`` the transpose case (cV) and ``hh`` the diagonal (cD).
    """
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"Haar DWT needs even dimensions, got {(h, w)}")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = ((a + b) + (c + d)) * 0.5
    lh = ((a + b) - (c + d)) * 0.5
    hl = ((a - b) + (c - d)) * 0.5
    hh = ((a - b) - (c - d)) * 0.5
    return ll, lh, hl, hh


def haar_idwt2(ll, lh, hl, hh):
    a = ((ll + lh) + (hl + hh)) * 0.5
    b = ((ll + lh) - (hl + hh)) * 0.5
    c = ((ll - lh) + (hl - hh)) * 0.5
    d = ((ll - lh) - (hl - hh)) * 0.5
    h, w = ll.shape[-2:]
    if isinstance(ll, torch.Tensor):
        out = ll.new_empty(ll.shape[:-2] + (2 * h, 2 * w))
    else:
        out = np.empty(ll.shape[:-2] + (2 * h, 2 * w), dtype=np.result_type(ll, lh))
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return out


@dataclass(frozen=True)
class WaveletSubbands:
    ll: np.ndarray
    lh: np.ndarray
    hl: np.ndarray
    hh: np.ndarray
    wavelet: str = "haar"

    def high(self) -> np.ndarray:
        return np.stack([self.lh, self.hl, self.hh])


def _check_family(wavelet: str) -> None:
    if wavelet not in WAVELETS:
        raise ConfigurationError(f"only the Haar wavelet is supported, got {wavelet!r}")


def dwt2(f: GridField, wavelet: str = "haar") -> WaveletSubbands:
    _check_family(wavelet)
    return WaveletSubbands(*haar_dwt2(np.asarray(f.values, dtype=np.float64)), wavelet=wavelet)


def idwt2(sub: WaveletSubbands) -> np.ndarray:
    _check_family(sub.wavelet)
    return haar_idwt2(sub.ll, sub.lh, sub.hl, sub.hh)


@dataclass(frozen=True)
class HFGuidance:
    guidance: np.ndarray
    weight: np.ndarray
    bias: np.ndarray


def hf_guidance(sub: WaveletSubbands, weight, bias=None) -> HFGuidance:
    """Pointwise (1x1) projection of the stacked (lh, hl, hh) subbands.

    ``weight`` has shape (out, 3) or (3,); a single output channel is
    returned as a 2D map.
    """
    weight = np.asarray(weight, dtype=np.float64)
    squeeze = weight.ndim == 1
    weight = np.atleast_2d(weight)
    if weight.shape[1] != 3:
        raise ShapeError(f"projection must take 3 input channels, got {weight.shape[1]}")
    bias = np.zeros(weight.shape[0]) if bias is None else np.atleast_1d(np.asarray(bias, dtype=np.float64))
    out = np.einsum("oc,chw->ohw", weight, sub.high()) + bias[:, None, None]
    if squeeze or out.shape[0] == 1:
        out = out[0]
    return HFGuidance(out, weight, bias)


class HFGuidanceEncoder(nn.Module):
    """Maps the bicubic image to guidance maps at half resolution.

    With ``project=False`` the three raw HF subbands are the guidance; with
    ``project=True`` a learnable 1x1 convolution mixes them first.
    """

    def __init__(self, project: bool = False, out_channels: int = 1):
        super().__init__()
        self.proj = nn.Conv2d(3, out_channels, 1) if project else None
        self.out_channels = out_channels if project else 3

    def forward(self, x_interp: torch.Tensor) -> torch.Tensor:
        _, lh, hl, hh = haar_dwt2(x_interp[:, 0])
        high = torch.stack([lh, hl, hh], dim=1)
        return self.proj(high) if self.proj is not None else high


class HFCrossAttention(nn.Module):
    """Cross-attention: queries from features, keys/values from HF guidance.

    The output projection has no bias, so zero projection weights or zero
    values make the block an exact identity through its residual.
    """

    def __init__(self, channels: int, guidance_channels: int, heads: int = 4, groups: int = 8):
        super().__init__()
        if channels % heads:
            raise ConfigurationError(f"{channels} channels not divisible by {heads} heads")
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.q = nn.Conv2d(channels, channels, 1)
        self.k = nn.Conv2d(guidance_channels, channels, 1)
        self.v = nn.Conv2d(guidance_channels, channels, 1)
        self.out = nn.Conv2d(channels, channels, 1, bias=False)

    def forward(self, features: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        b, c, h, w = features.shape
        if guidance.ndim != 4 or guidance.shape[0] != b:
            raise ShapeError(
                f"guidance {tuple(guidance.shape)} incompatible with features {tuple(features.shape)}")
        if guidance.shape[-2:] != (h, w):
            guidance = F.interpolate(guidance, size=(h, w), mode="nearest")
        if guidance.shape[1] != self.k.in_channels:
            raise ShapeError(f"guidance has {guidance.shape[1]} channels, expected {self.k.in_channels}")
        d = c // self.heads
        q = self.q(self.norm(features)).reshape(b, self.heads, d, h * w).transpose(-1, -2)
        k = self.k(guidance).reshape(b, self.heads, d, h * w).transpose(-1, -2)
        v = self.v(guidance).reshape(b, self.heads, d, h * w).transpose(-1, -2)
        att = F.scaled_dot_product_attention(q, k, v)
        att = att.transpose(-1, -2).reshape(b, c, h, w)
        return features + self.out(att)


def cross_attend(features: torch.Tensor, guidance: torch.Tensor, block: HFCrossAttention) -> torch.Tensor:
    return block(features, guidance)
