"""Training objective, EMA maintenance and ancestral sampling.

SR3 diffuses the HR field directly.  The ResDiff variants diffuse the
residual ``HR - bicubic(LR)`` and add the bicubic image back after the
reverse loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .denoiser import DenoiserModel
from .errors import ContractError, DomainError, NumericError, ShapeError
from .grid import GridField, PairedSample, StandardizationStats
from .interp import initial_prediction
from .schedule import NoiseSchedule, noise_batch


@dataclass
class TrainState:
    model: DenoiserModel
    optimizer: torch.optim.Optimizer
    iteration: int = 0
    generator: torch.Generator = field(default_factory=torch.Generator)
    ema_decay: float = 0.9999
    stats: StandardizationStats | None = None


def make_train_state(model: DenoiserModel, learning_rate: float = 1e-4, seed: int = 0,
                     ema_decay: float = 0.9999, stats: StandardizationStats | None = None,
                     betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> TrainState:
    opt = torch.optim.Adam(model.net.parameters(), lr=learning_rate, betas=tuple(betas), eps=eps)
    gen = torch.Generator().manual_seed(int(seed))
    return TrainState(model, opt, 0, gen, float(ema_decay), stats)


def collate(batch: Sequence[PairedSample], dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
    if not batch:
        raise ContractError("empty batch")
    lr = torch.as_tensor(np.stack([s.lr.values for s in batch]), dtype=dtype)[:, None]
    hr = torch.as_tensor(np.stack([s.hr.values for s in batch]), dtype=dtype)[:, None]
    return lr, hr


def diffusion_target(hr: torch.Tensor, x_interp: torch.Tensor, residual: bool) -> torch.Tensor:
    return hr - x_interp if residual else hr


def compose_output(x_interp, y0, residual: bool):
    """Final HR estimate: bicubic plus generated residual, or the sample itself."""
    return x_interp + y0 if residual else y0


def ema_update(ema: dict[str, torch.Tensor], params: dict[str, torch.Tensor],
               decay: float) -> dict[str, torch.Tensor]:
    """In place ``ema = decay * ema + (1 - decay) * params``; returns ``ema``."""
    if not 0.0 <= decay <= 1.0:
        raise DomainError(f"decay must lie in [0, 1], got {decay}")
    if ema.keys() != params.keys():
        raise ContractError("EMA and parameter collections have different names")
    with torch.no_grad():
        for name, e in ema.items():
            p = params[name]
            if e.shape != p.shape:
                raise ContractError(f"shape mismatch for {name}: {tuple(e.shape)} vs {tuple(p.shape)}")
            e.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
    return ema


def training_step(state: TrainState, batch: Sequence[PairedSample],
                  sched: NoiseSchedule) -> tuple[TrainState, float]:
    model = state.model
    net = model.net
    net.train()
    p = next(net.parameters())
    lr, hr = collate(batch, p.dtype)
    x_interp = initial_prediction(lr, state.stats)
    y0 = diffusion_target(hr, x_interp, model.config.residual)

    b = y0.shape[0]
    gen = state.generator
    t = torch.randint(1, sched.T + 1, (b,), generator=gen)
    eps = torch.randn(y0.shape, generator=gen, dtype=y0.dtype)
    y_t = noise_batch(y0, t, eps, sched)
    alpha_bar = torch.tensor(sched.alpha_bar, dtype=y0.dtype)[t - 1]

    cond = net.condition(x_interp, y_t)
    eps_hat = net(cond, alpha_bar)
    loss = F.mse_loss(eps_hat, eps)
    if not torch.isfinite(loss):
        raise NumericError(f"non-finite loss at iteration {state.iteration}", state.iteration)

    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(model.ema_parameters(), model.parameters(), state.ema_decay)
    state.iteration += 1
    return state, float(loss.detach())


def ancestral_update(y_t, eps_hat, alpha_t: float, alpha_bar_t: float, z=None):
    """One reverse step with noise scale ``sqrt(1 - alpha_t)``."""
    out = (y_t - (1.0 - alpha_t) / math.sqrt(1.0 - alpha_bar_t) * eps_hat) / math.sqrt(alpha_t)
    if z is not None:
        out = out + math.sqrt(1.0 - alpha_t) * z
    return out


def sample_step(y_t, eps_hat, t: int, sched: NoiseSchedule, z=None):
    """Map y_t to y_{t-1}.  At ``t = 1`` no noise is added regardless of ``z``.

    Accepts GridFields, numpy arrays or tensors of matching shape.
    """
    if not 1 <= int(t) <= sched.T:
        raise DomainError(f"timestep {t} outside 1..{sched.T}")
    unwrap = isinstance(y_t, GridField)
    y = y_t.values if unwrap else y_t
    e = eps_hat.values if isinstance(eps_hat, GridField) else eps_hat
    zz = z.values if isinstance(z, GridField) else z
    if tuple(y.shape) != tuple(e.shape) or (zz is not None and tuple(zz.shape) != tuple(y.shape)):
        raise ShapeError("y_t, eps_hat and z must share a shape")
    out = ancestral_update(y, e, sched.alpha_at(t), sched.alpha_bar_at(t), zz if t > 1 else None)
    return y_t.replace(values=out) if unwrap else out


@dataclass
class SampleTrace:
    final: GridField | torch.Tensor
    intermediates: list[tuple[int, torch.Tensor]] | None = None


def reverse_process(eps_fn: Callable[[torch.Tensor, int], torch.Tensor], y_T: torch.Tensor,
                    sched: NoiseSchedule, generator: torch.Generator | None = None,
                    add_noise: bool = True, keep_trace: bool = False):
    """Run t = T..1.  ``eps_fn(y_t, t)`` returns the noise estimate.

    Returns ``(y_0, trace)`` where ``trace`` lists ``(t, y_t)`` pairs in
    strictly decreasing t, or None.
    """
    y = y_T
    trace = [] if keep_trace else None
    for t in range(sched.T, 0, -1):
        if keep_trace:
            trace.append((t, y.detach().clone()))
        eps_hat = eps_fn(y, t)
        z = None
        if add_noise and t > 1:
            z = torch.randn(y.shape, generator=generator, dtype=y.dtype, device=y.device)
        y = ancestral_update(y, eps_hat, sched.alpha_at(t), sched.alpha_bar_at(t), z)
        if not torch.isfinite(y).all():
            raise NumericError(f"non-finite sample state at t={t}", t)
    return y, trace


def sample_batch(model: DenoiserModel, lr: torch.Tensor, sched: NoiseSchedule, seed: int,
                 stats: StandardizationStats | None = None, use_ema: bool = True,
                 keep_trace: bool = False) -> SampleTrace:
    """Super-resolve a standardized LR batch (B, 1, h, w); returns HR-standardized output."""
    net = model.network(use_ema)
    was_training = net.training
    net.eval()
    p = next(net.parameters())
    lr = lr.to(dtype=p.dtype, device=p.device)
    x_interp = initial_prediction(lr, stats)
    gen = torch.Generator(device=p.device).manual_seed(int(seed))
    y_T = torch.randn(x_interp.shape, generator=gen, dtype=p.dtype, device=p.device)
    expected = model.config.conditioning_channels

    def eps_fn(y, t):
        cond = net.condition(x_interp, y)
        if cond.shape[1] != expected:
            raise ShapeError(f"conditioning has {cond.shape[1]} channels, expected {expected}")
        ab = torch.full((y.shape[0],), sched.alpha_bar_at(t), dtype=y.dtype, device=y.device)
        return net(cond, ab)

    try:
        with torch.no_grad():
            y0, trace = reverse_process(eps_fn, y_T, sched, gen, keep_trace=keep_trace)
    finally:
        net.train(was_training)
    return SampleTrace(compose_output(x_interp, y0, model.config.residual), trace)


def sample(model: DenoiserModel, lr: GridField, sched: NoiseSchedule, seed: int,
           variant: str | None = None, keep_trace: bool = False,
           stats: StandardizationStats | None = None) -> SampleTrace:
    """Single-field sampling with EMA weights."""
    if variant is not None and variant != model.config.variant:
        raise ContractError(f"model variant {model.config.variant!r} != requested {variant!r}")
    lr_t = torch.tensor(np.asarray(lr.values))[None, None]
    out = sample_batch(model, lr_t, sched, seed, stats, use_ema=True, keep_trace=keep_trace)
    h, w = lr.shape
    final = GridField(out.final[0, 0].cpu().numpy().astype(np.float64), lr.units,
                      lr.grid_spacing_deg * h / out.final.shape[-2], lr.timestamp)
    return SampleTrace(final, out.intermediates)
