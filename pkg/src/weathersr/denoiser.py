"""Noise-predicting U-Net with variant-specific conditioning.

The network sees a conditioning stack assembled by a variant conditioner:

* ``sr3``: [x_interp, y_t]
* ``resdiff``: the frequency splitter's five maps
* ``resdiff_physics``: [dx, dy, lap, y_t, x_interp]

Both ResDiff variants add an HF-guided cross-attention block at the
bottleneck fed from the Haar subbands of ``x_interp``; the physics variant
passes those subbands through a learnable 1x1 convolution first.  The noise
level enters as a sinusoidal embedding of ``-log(alpha_bar)``.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .dwt import HFCrossAttention, HFGuidanceEncoder
from .errors import ConfigurationError, DomainError, ShapeError
from .freq_split import DEFAULT_LIMIT_L, FDInfoSplitter
from .physics import PhysicsConditioner

VARIANTS = ("sr3", "resdiff", "resdiff_physics")
CONDITIONING_CHANNELS = {"sr3": 2, "resdiff": 5, "resdiff_physics": 5}
EMBED_SCALE = 1000.0


@dataclass
class DenoiserConfig:
    variant: str = "sr3"
    base_channels: int = 64
    channel_mults: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    resnet_blocks_per_level: int = 2
    dropout: float = 0.2
    attention_levels: list[int] | None = None
    heads: int = 4
    limit_l: float = DEFAULT_LIMIT_L
    guidance_channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.base_channels < 1 or not self.channel_mults or min(self.channel_mults) < 1:
            raise ConfigurationError("base_channels and channel_mults must be positive")
        if self.resnet_blocks_per_level < 1:
            raise ConfigurationError("resnet_blocks_per_level must be positive")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError("dropout must lie in [0, 1)")
        n = len(self.channel_mults)
        if self.attention_levels is None:
            self.attention_levels = sorted({max(n - 2, 0), n - 1})
        self.attention_levels = sorted(int(i) for i in self.attention_levels)
        if any(i < 0 or i >= n for i in self.attention_levels):
            raise ConfigurationError(f"attention level out of range 0..{n - 1}")
        self.channel_mults = [int(m) for m in self.channel_mults]

    @property
    def conditioning_channels(self) -> int:
        return CONDITIONING_CHANNELS[self.variant]

    @property
    def residual(self) -> bool:
        """Whether the model diffuses HR minus the bicubic image."""
        return self.variant != "sr3"

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(channels: int) -> int:
    for g in (32, 16, 8, 4, 2):
        if channels % g == 0 and channels // g >= 2:
            return g
    return 1


def noise_level_embedding(alpha_bar: torch.Tensor, dim: int) -> torch.Tensor:
    pos = -torch.log(alpha_bar) * EMBED_SCALE
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=pos.dtype, device=pos.device) / half)
    args = pos[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConcatConditioner(nn.Module):
    out_channels = 2
    interp_channel = 0

    def forward(self, x_interp, y_t):
        return torch.cat([x_interp, y_t], dim=1)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.drop = nn.Dropout(dropout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(self.drop(F.silu(self.norm2(h))))
        return self.skip(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.heads = heads if channels % heads == 0 else 1
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.out = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        d = c // self.heads
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, self.heads, d, h * w).transpose(-1, -2).unbind(1)
        att = F.scaled_dot_product_attention(q, k, v)
        return x + self.out(att.transpose(-1, -2).reshape(b, c, h, w))


class Level(nn.Module):
    def __init__(self, blocks, attn):
        super().__init__()
        self.blocks = nn.ModuleList(blocks)
        self.attn = nn.ModuleList(attn)


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.base_channels
        emb_dim = 4 * c0
        chans = [c0 * m for m in cfg.channel_mults]
        n = len(chans)

        if cfg.variant == "sr3":
            self.conditioner = ConcatConditioner()
        elif cfg.variant == "resdiff":
            self.conditioner = FDInfoSplitter(cfg.limit_l)
        else:
            self.conditioner = PhysicsConditioner()

        self.time_mlp = nn.Sequential(nn.Linear(c0, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.inc = nn.Conv2d(cfg.conditioning_channels, c0, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsamplers = nn.ModuleList()
        skips = [c0]
        cur = c0
        for i, ch in enumerate(chans):
            blocks, attn = [], []
            for _ in range(cfg.resnet_blocks_per_level):
                blocks.append(ResBlock(cur, ch, emb_dim, cfg.dropout))
                attn.append(SelfAttention(ch, cfg.heads) if i in cfg.attention_levels else nn.Identity())
                cur = ch
                skips.append(cur)
            self.down.append(Level(blocks, attn))
            if i < n - 1:
                self.downsamplers.append(nn.Conv2d(cur, cur, 3, stride=2, padding=1))
                skips.append(cur)

        self.mid1 = ResBlock(cur, cur, emb_dim, cfg.dropout)
        self.mid_attn = SelfAttention(cur, cfg.heads)
        if cfg.variant == "sr3":
            self.guidance = None
            self.cross = None
        else:
            self.guidance = HFGuidanceEncoder(project=cfg.variant == "resdiff_physics",
                                              out_channels=cfg.guidance_channels)
            self.cross = HFCrossAttention(cur, self.guidance.out_channels, cfg.heads, _groups(cur))
        self.mid2 = ResBlock(cur, cur, emb_dim, cfg.dropout)

        self.up = nn.ModuleList()
        self.upsamplers = nn.ModuleList()
        for i in reversed(range(n)):
            ch = chans[i]
            blocks, attn = [], []
            for _ in range(cfg.resnet_blocks_per_level + 1):
                blocks.append(ResBlock(cur + skips.pop(), ch, emb_dim, cfg.dropout))
                attn.append(SelfAttention(ch, cfg.heads) if i in cfg.attention_levels else nn.Identity())
                cur = ch
            self.up.append(Level(blocks, attn))
            if i > 0:
                self.upsamplers.append(nn.Conv2d(cur, cur, 3, padding=1))

        self.out_norm = nn.GroupNorm(_groups(cur), cur)
        self.out = nn.Conv2d(cur, 1, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @property
    def interp_channel(self) -> int:
        return self.conditioner.interp_channel

    def condition(self, x_interp: torch.Tensor, y_t: torch.Tensor) -> torch.Tensor:
        """Assemble the variant's conditioning stack from (B, 1, H, W) inputs."""
        cond = self.conditioner(x_interp, y_t)
        if cond.shape[1] != self.cfg.conditioning_channels:
            raise ShapeError(f"conditioner built {cond.shape[1]} channels, "
                             f"expected {self.cfg.conditioning_channels}")
        return cond

    def forward(self, cond: torch.Tensor, alpha_bar: torch.Tensor) -> torch.Tensor:
        if cond.ndim != 4 or cond.shape[1] != self.cfg.conditioning_channels:
            raise ShapeError(f"expected (B, {self.cfg.conditioning_channels}, H, W) conditioning, "
                             f"got {tuple(cond.shape)}")
        factor = 2 ** (len(self.cfg.channel_mults) - 1)
        if cond.shape[-2] % factor or cond.shape[-1] % factor:
            raise ShapeError(f"spatial size {tuple(cond.shape[-2:])} not divisible by {factor}")
        alpha_bar = torch.as_tensor(alpha_bar, dtype=cond.dtype, device=cond.device).reshape(-1)
        if alpha_bar.numel() == 1 and cond.shape[0] > 1:
            alpha_bar = alpha_bar.expand(cond.shape[0])
        if not bool(((alpha_bar > 0) & (alpha_bar < 1)).all()):
            raise DomainError("alpha_bar must lie strictly inside (0, 1)")

        emb = self.time_mlp(noise_level_embedding(alpha_bar, self.cfg.base_channels))
        h = self.inc(cond)
        hs = [h]
        for i, level in enumerate(self.down):
            for block, attn in zip(level.blocks, level.attn):
                h = attn(block(h, emb))
                hs.append(h)
            if i < len(self.downsamplers):
                h = self.downsamplers[i](h)
                hs.append(h)

        h = self.mid_attn(self.mid1(h, emb))
        if self.cross is not None:
            x_interp = cond[:, self.interp_channel:self.interp_channel + 1]
            h = self.cross(h, self.guidance(x_interp))
        h = self.mid2(h, emb)

        for j, level in enumerate(self.up):
            for block, attn in zip(level.blocks, level.attn):
                h = attn(block(torch.cat([h, hs.pop()], dim=1), emb))
            if j < len(self.upsamplers):
                h = self.upsamplers[j](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))


class DenoiserModel:
    """Trainable network plus its EMA shadow copy."""

    def __init__(self, config: DenoiserConfig, net: UNet, ema_net: UNet):
        self.config = config
        self.net = net
        self.ema_net = ema_net

    def parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.net.named_parameters())

    def ema_parameters(self) -> dict[str, torch.Tensor]:
        return dict(self.ema_net.named_parameters())

    def network(self, use_ema: bool) -> UNet:
        return self.ema_net if use_ema else self.net

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def build_model(cfg: DenoiserConfig, seed: int = 0) -> DenoiserModel:
    if not isinstance(cfg, DenoiserConfig):
        raise ConfigurationError("build_model expects a DenoiserConfig")
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(seed)
        net = UNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    ema = copy.deepcopy(net)
    ema.eval()
    for p in ema.parameters():
        p.requires_grad_(False)
    return DenoiserModel(cfg, net, ema)


def predict_noise(model: DenoiserModel, conditioning, alpha_bar_t: float, use_ema: bool = True):
    """Noise estimate for one conditioning stack (C, H, W) or a batch (B, C, H, W).

    Runs in evaluation mode without gradient tracking.
    """
    net = model.network(use_ema)
    p = next(net.parameters())
    cond = torch.as_tensor(conditioning, dtype=p.dtype, device=p.device)
    single = cond.ndim == 3
    if single:
        cond = cond[None]
    if not 0 < float(alpha_bar_t) < 1:
        raise DomainError(f"alpha_bar_t must lie in (0, 1), got {alpha_bar_t}")
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            out = net(cond, torch.full((cond.shape[0],), float(alpha_bar_t), dtype=p.dtype, device=p.device))
    finally:
        net.train(was_training)
    return out[0, 0] if single else out
