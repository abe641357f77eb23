"""Finite-difference stencil conditioning for the physics variant.

The three 3x3 kernels are applied as cross-correlations after mirror
padding of one pixel (edge pixel not repeated).  They are evaluated with
explicit slicing rather than a generic convolution so that zero-sum
responses to constant fields are exactly zero.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ShapeError
from .grid import GridField

DX_KERNEL = np.array([[0, 0, 0], [0, -1, 1], [0, 0, 0]], dtype=np.float64)
DY_KERNEL = np.array([[0, 0, 0], [0, -1, 0], [0, 1, 0]], dtype=np.float64)
LAPLACIAN_KERNEL = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
KERNELS = np.stack([DX_KERNEL, DY_KERNEL, LAPLACIAN_KERNEL])

CHANNELS = ("dx", "dy", "lap", "y_noised", "x_interp")


def _cat(parts, axis):
    if isinstance(parts[0], torch.Tensor):
        return torch.cat(parts, dim=axis)
    return np.concatenate(parts, axis=axis)


def reflect_pad1(x):
    """Mirror-pad the last two axes by one pixel."""
    x = _cat([x[..., 1:2, :], x, x[..., -2:-1, :]], -2)
    return _cat([x[..., :, 1:2], x, x[..., :, -2:-1]], -1)


def stencil_responses(x):
    """(dx, dy, lap) responses over the last two axes of an array or tensor."""
    if x.shape[-2] < 3 or x.shape[-1] < 3:
        raise ShapeError(f"stencils need at least 3x3 input, got {tuple(x.shape[-2:])}")
    p = reflect_pad1(x)
    c = p[..., 1:-1, 1:-1]
    dx = p[..., 1:-1, 2:] - c
    dy = p[..., 2:, 1:-1] - c
    lap = (p[..., :-2, 1:-1] + p[..., 2:, 1:-1]) + (p[..., 1:-1, :-2] + p[..., 1:-1, 2:]) - 4 * c
    return dx, dy, lap


@dataclass(frozen=True)
class DerivativeMaps:
    dx: np.ndarray
    dy: np.ndarray
    lap: np.ndarray

    def stack(self) -> np.ndarray:
        return np.stack([self.dx, self.dy, self.lap])


def apply_stencils(f: GridField) -> DerivativeMaps:
    dx, dy, lap = stencil_responses(np.asarray(f.values, dtype=np.float64))
    return DerivativeMaps(dx, dy, lap)


def physics_stack(x_interp, y_noised):
    """Channel stack [dx, dy, lap, y_noised, x_interp] along axis -3.

    Accepts (B, 1, H, W) tensors or (H, W) arrays.
    """
    if tuple(x_interp.shape) != tuple(y_noised.shape):
        raise ShapeError(f"shape mismatch {tuple(x_interp.shape)} vs {tuple(y_noised.shape)}")
    if isinstance(x_interp, torch.Tensor):
        dx, dy, lap = stencil_responses(x_interp)
        return torch.cat([dx, dy, lap, y_noised, x_interp], dim=-3)
    dx, dy, lap = stencil_responses(np.asarray(x_interp, dtype=np.float64))
    return np.stack([dx, dy, lap, np.asarray(y_noised), np.asarray(x_interp)])


def physics_conditioning(x_interp: GridField, y_noised: GridField) -> np.ndarray:
    """(5, H, W) conditioning stack for one field pair."""
    return physics_stack(x_interp.values, y_noised.values)


class PhysicsConditioner(nn.Module):
    """Parameter-free conditioner; kept as a module so all variants share one interface."""

    out_channels = 5
    interp_channel = 4

    def forward(self, x_interp: torch.Tensor, y_t: torch.Tensor) -> torch.Tensor:
        return physics_stack(x_interp, y_t)
