"""Noise-prediction network over the latent grid.

A small convolutional U-Net: residual blocks with an additive timestep
embedding, skip connections between matching resolutions, and an optional
conditioning map concatenated either at the input only or at the input of
every resolution block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError

COND_MODES = ("input", "blocks")


@dataclass
class DenoiserConfig:
    latent_channels: int = 16
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 1
    cond_channels: int = 0
    cond_injection: str = "input"
    norm_groups: int = 8

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)
        if self.cond_injection not in COND_MODES:
            raise InvalidArgumentError(f"cond_injection must be one of {COND_MODES}")
        if self.base_channels % self.norm_groups:
            raise InvalidArgumentError("base_channels must be divisible by norm_groups")


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class TimeResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(math.gcd(groups, c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm2 = nn.GroupNorm(math.gcd(groups, c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class UNetDenoiser(nn.Module):
    """``eps_theta(z_t, t, cond)``; output has the shape of ``z_t``."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.base_channels
        t_dim = ch * 4
        self.t_mlp = nn.Sequential(nn.Linear(ch, t_dim), nn.SiLU(), nn.Linear(t_dim, t_dim))
        cc = cfg.cond_channels
        per_block_cond = cc if cfg.cond_injection == "blocks" else 0
        self.conv_in = nn.Conv2d(cfg.latent_channels + cc, ch, 3, padding=1)

        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = [ch]
        cur = ch
        widths = [ch * m for m in cfg.channel_mults]
        for i, w in enumerate(widths):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                blocks.append(TimeResBlock(cur + per_block_cond, w, t_dim, cfg.norm_groups))
                cur = w
                skips.append(cur)
            self.down.append(blocks)
            last = i == len(widths) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(cur, cur, 3, stride=2, padding=1))
            if not last:
                skips.append(cur)

        self.mid = nn.ModuleList([TimeResBlock(cur, cur, t_dim, cfg.norm_groups) for _ in range(2)])

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level + 1):
                blocks.append(TimeResBlock(cur + skips.pop() + per_block_cond, w, t_dim, cfg.norm_groups))
                cur = w
            self.up.append(blocks)
            self.upsample.append(nn.Identity() if i == 0 else nn.Conv2d(cur, cur, 3, padding=1))

        self.norm_out = nn.GroupNorm(math.gcd(cfg.norm_groups, cur), cur)
        self.conv_out = nn.Conv2d(cur, cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def _with_cond(self, h, cond):
        if self.cfg.cond_injection != "blocks" or cond is None:
            return h
        c = cond if cond.shape[-2:] == h.shape[-2:] else F.adaptive_avg_pool2d(cond, h.shape[-2:])
        return torch.cat([h, c], dim=1)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor | None = None) -> torch.Tensor:
        cc = self.cfg.cond_channels
        if cc:
            if cond is None or cond.shape[1] != cc or cond.shape[-2:] != z_t.shape[-2:]:
                raise InvalidArgumentError(
                    f"expected conditioning of shape (B, {cc}, {tuple(z_t.shape[-2:])}); got "
                    f"{None if cond is None else tuple(cond.shape)}"
                )
            x = torch.cat([z_t, cond], dim=1)
        else:
            x = z_t
        temb = self.t_mlp(timestep_embedding(t.to(z_t.device), self.cfg.base_channels).to(z_t.dtype))
        h = self.conv_in(x)
        hs = [h]
        for blocks, down in zip(self.down, self.downsample):
            for block in blocks:
                h = block(self._with_cond(h, cond), temb)
                hs.append(h)
            if not isinstance(down, nn.Identity):
                h = down(h)
                hs.append(h)
        for block in self.mid:
            h = block(h, temb)
        for blocks, up in zip(self.up, self.upsample):
            for block in blocks:
                h = block(self._with_cond(torch.cat([h, hs.pop()], dim=1), cond), temb)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, size=hs[-1].shape[-2:], mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))
