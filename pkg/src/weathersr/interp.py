"""Separable bicubic upsampling (Catmull-Rom, a = -0.5).

Output pixel centres sit at ``(i + 0.5) / scale - 0.5`` in input coordinates
and out-of-range taps are clamped to the edge.  The operator is applied as
two small dense matrices, so it works unchanged on numpy arrays and on
batched torch tensors.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np
import torch

from .errors import ShapeError
from .grid import GridField, StandardizationStats

CUBIC_A = -0.5


def cubic_kernel(x, a: float = CUBIC_A):
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


@lru_cache(maxsize=32)
def interp_matrix(n_in: int, n_out: int, a: float = CUBIC_A) -> np.ndarray:
    """(n_out, n_in) weights mapping a 1D signal onto the finer grid."""
    if n_out % n_in:
        raise ShapeError(f"target size {n_out} is not a multiple of {n_in}")
    mat = np.zeros((n_out, n_in))
    scale = n_out // n_in
    for i in range(n_out):
        x = (i + 0.5) / scale - 0.5
        x0 = int(np.floor(x))
        taps = np.arange(x0 - 1, x0 + 3)
        w = cubic_kernel(x - taps, a)
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)
    mat.flags.writeable = False
    return mat


def upsample_array(arr, target_h: int, target_w: int):
    """Upsample the last two axes of a numpy array or torch tensor."""
    h, w = arr.shape[-2:]
    if target_h % h or target_w % w:
        raise ShapeError(f"target ({target_h}, {target_w}) is not a multiple of ({h}, {w})")
    mh, mw = interp_matrix(h, target_h), interp_matrix(w, target_w)
    if isinstance(arr, torch.Tensor):
        mh = torch.tensor(mh, dtype=arr.dtype, device=arr.device)
        mw = torch.tensor(mw, dtype=arr.dtype, device=arr.device)
        return mh @ arr @ mw.T
    return mh @ arr @ mw.T


def bicubic_upsample(lr: GridField, target_h: int, target_w: int) -> GridField:
    h, w = lr.shape
    out = upsample_array(lr.values.astype(np.float64), target_h, target_w)
    return lr.replace(values=out, grid_spacing_deg=lr.grid_spacing_deg * h / target_h)


def lr_to_hr_units(x, stats: StandardizationStats | None):
    """Re-express an LR-standardized array in HR-standardized units.

    Identity when ``stats`` is None (synthetic data shares one scale).
    """
    if stats is None:
        return x
    gain = stats.std_lr / stats.std_hr
    shift = (stats.mean_lr - stats.mean_hr) / stats.std_hr
    if gain == 1.0 and shift == 0.0:
        return x
    return x * gain + shift


def initial_prediction(lr, stats: StandardizationStats | None = None, scale: int = 4):
    """Bicubic estimate of the HR field from a standardized LR array/tensor."""
    h, w = lr.shape[-2:]
    return lr_to_hr_units(upsample_array(lr, h * scale, w * scale), stats)
