"""Convolutional encoder and the symmetric feature decoder (no upsampling).

The encoder reduces spatial size by ``2 ** downsample_log2`` into a latent of
``latent_channels``. The feature decoder mirrors it block for block but keeps
the latent's spatial size, expanding channels into a feature map that the
implicit decoder queries.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import data as dp
from .errors import InvalidArgumentError, NumericError, TrainingDivergence
from .implicit import ImplicitDecoder, MlpConfig
from .optim import OptimConfig, adam, clip, state_copy


@dataclass
class AutoEncoderConfig:
    downsample_log2: int = 2
    latent_channels: int = 16
    feature_channels: int = 64
    hidden_channels: int = 64
    n_resblocks: int = 4
    norm_groups: int = 8
    use_feature_decoder: bool = True

    def __post_init__(self):
        for name in ("downsample_log2", "latent_channels", "feature_channels", "hidden_channels", "n_resblocks", "norm_groups"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be positive")
        if self.hidden_channels % self.norm_groups:
            raise InvalidArgumentError("hidden_channels must be divisible by norm_groups")

    @property
    def factor(self) -> int:
        return 2 ** self.downsample_log2

    @property
    def decoder_channels(self) -> int:
        """Channel count of the map the MLP reads."""
        return self.feature_channels if self.use_feature_decoder else self.latent_channels


class ResBlock(nn.Module):
    """(GroupNorm -> SiLU -> Conv) x 2 with an identity skip."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Encoder(nn.Module):
    def __init__(self, cfg: AutoEncoderConfig):
        super().__init__()
        self.cfg = cfg
        ch, g = cfg.hidden_channels, cfg.norm_groups
        self.conv_in = nn.Conv2d(3, ch, 3, padding=1)
        down = []
        for _ in range(cfg.downsample_log2):
            down += [ResBlock(ch, g), nn.Conv2d(ch, ch, 3, stride=2, padding=1)]
        self.down = nn.Sequential(*down)
        self.mid = nn.Sequential(*[ResBlock(ch, g) for _ in range(cfg.n_resblocks)])
        self.norm_out = nn.GroupNorm(g, ch)
        self.conv_out = nn.Conv2d(ch, cfg.latent_channels, 3, padding=1)

    def forward(self, x):
        f = self.cfg.factor
        if x.shape[1] != 3 or x.shape[-2] % f or x.shape[-1] % f:
            raise InvalidArgumentError(
                f"expected (B, 3, H, W) with H, W divisible by {f}; got {tuple(x.shape)}"
            )
        h = self.mid(self.down(self.conv_in(x)))
        return self.conv_out(F.silu(self.norm_out(h)))


class FeatureDecoder(nn.Module):
    """Mirror of :class:`Encoder` with every upsampling layer removed."""

    def __init__(self, cfg: AutoEncoderConfig):
        super().__init__()
        self.cfg = cfg
        ch, g = cfg.hidden_channels, cfg.norm_groups
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch, 3, padding=1)
        self.mid = nn.Sequential(*[ResBlock(ch, g) for _ in range(cfg.n_resblocks)])
        self.up = nn.Sequential(*[ResBlock(ch, g) for _ in range(cfg.downsample_log2)])
        self.norm_out = nn.GroupNorm(g, ch)
        self.conv_out = nn.Conv2d(ch, cfg.feature_channels, 3, padding=1)

    def forward(self, z):
        if z.ndim != 4 or z.shape[1] != self.cfg.latent_channels:
            raise InvalidArgumentError(
                f"expected latent with {self.cfg.latent_channels} channels; got {tuple(z.shape)}"
            )
        h = self.up(self.mid(self.conv_in(z)))
        return self.conv_out(F.silu(self.norm_out(h)))


def encode(image: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    squeeze = image.ndim == 3
    z = encoder(image.unsqueeze(0) if squeeze else image)
    return z[0] if squeeze else z


def decode_features(latent: torch.Tensor, decoder: FeatureDecoder) -> torch.Tensor:
    squeeze = latent.ndim == 3
    f = decoder(latent.unsqueeze(0) if squeeze else latent)
    return f[0] if squeeze else f


def build_stage1(cfg: AutoEncoderConfig, mlp_cfg: MlpConfig | None = None) -> tuple[Encoder, ImplicitDecoder]:
    encoder = Encoder(cfg)
    fdec = FeatureDecoder(cfg) if cfg.use_feature_decoder else None
    return encoder, ImplicitDecoder(fdec, cfg.decoder_channels, mlp_cfg)


@dataclass
class Stage1Config:
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(lr=5e-5, steps=2000, batch_size=8))
    n_coord_samples: int = 1024
    native_prob: float = 0.25  # fraction of images supervised at the crop's own resolution


@dataclass
class Stage1Result:
    encoder: Encoder
    decoder: ImplicitDecoder
    latent_scale: float
    log: list = field(default_factory=list)


def render_size(latent_side: int, crop_size: int, scale: float) -> int:
    """Supervision resolution for a sampled scale: ``latent_side * scale`` capped at the crop."""
    return int(min(crop_size, max(latent_side, math.floor(latent_side * scale))))


def estimate_latent_scale(encoder: Encoder, images: torch.Tensor, batch: int = 32) -> float:
    with torch.no_grad():
        zs = torch.cat([encoder(images[i : i + batch]) for i in range(0, len(images), batch)])
    return float(zs.double().std())


def train_stage1(
    dataset: dp.ImageFolder,
    ae_cfg: AutoEncoderConfig,
    decoder: ImplicitDecoder | None = None,
    cfg: Stage1Config | None = None,
    seed: int = 0,
    encoder: Encoder | None = None,
    on_log=None,
    mlp_cfg: MlpConfig | None = None,
) -> Stage1Result:
    """Jointly fit encoder, feature decoder and MLP with an L1 pixel loss.

    Each image in a batch is supervised at a random resolution between the
    latent side and the crop side (see :func:`render_size`), using a random
    subset of its pixels.
    """
    cfg = cfg or Stage1Config()
    if len(dataset) == 0:
        raise InvalidArgumentError("stage-1 training needs a non-empty dataset")
    crop_size = dataset.spec.crop_size
    if crop_size % ae_cfg.factor:
        raise InvalidArgumentError(f"crop_size {crop_size} not divisible by {ae_cfg.factor}")
    torch.manual_seed(seed)
    if encoder is None or decoder is None:
        enc, dec = build_stage1(ae_cfg, mlp_cfg)
        encoder = enc if encoder is None else encoder
        decoder = dec if decoder is None else decoder
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = adam(params, cfg.optim)
    rng = dp.worker_rng(seed)
    latent_side = crop_size // ae_cfg.factor
    log = []
    last_good = (state_copy(encoder), state_copy(decoder))
    for step in range(1, cfg.optim.steps + 1):
        crops = dataset.crops(rng, cfg.optim.batch_size)
        coords, cells, targets = [], [], []
        for img in crops:
            if rng.random() < cfg.native_prob:
                m = crop_size
            else:
                m = render_size(latent_side, crop_size, dp.sample_scale(rng, dataset.spec.scale_range))
            gt = dp.resize(img, m, m)
            _, c, ce, rgb = dp.sample_pixels(gt, cfg.n_coord_samples, rng)
            coords.append(c)
            cells.append(ce)
            targets.append(rgb)
        n = min(len(c) for c in coords)
        coords = torch.stack([c[:n] for c in coords])
        cells = torch.stack([c[:n] for c in cells])
        targets = torch.stack([t[:n] for t in targets])

        try:
            pred = decoder(encoder(crops), coords, cells)
        except NumericError as exc:
            raise TrainingDivergence(f"non-finite features at step {step}", step, last_good) from exc
        loss = F.l1_loss(pred, targets)
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"non-finite stage-1 loss at step {step}", step, last_good)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        clip(params, cfg.optim)
        opt.step()
        if step % cfg.optim.log_every == 0 or step == cfg.optim.steps:
            last_good = (state_copy(encoder), state_copy(decoder))
            rec = {"step": step, "loss": loss.item()}
            log.append(rec)
            if on_log:
                on_log(rec)
    encoder.eval()
    decoder.eval()
    scale = estimate_latent_scale(encoder, dataset.center_crops())
    return Stage1Result(encoder, decoder, scale, log)


def reconstruct(encoder: Encoder, decoder: ImplicitDecoder, images: torch.Tensor, size: int | None = None, query_batch: int = 65536) -> torch.Tensor:
    """Encode then render ``images`` at ``size`` (default: native resolution)."""
    size = size or images.shape[-1]
    with torch.no_grad():
        return decoder.render(encoder(images), size, size, query_batch)
