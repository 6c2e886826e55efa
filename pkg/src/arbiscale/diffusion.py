"""Latent diffusion: noise schedule, forward process, losses and samplers.

Timesteps are 1-based (``1 <= t <= T``); ``t = 0`` denotes clean data and has
``alpha_bar = 1``. Schedules are held in float64; tensors are cast to the
dtype of the latent they act on.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, NumericError

ALPHA_BAR_FLOOR = 1e-12


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"


class NoiseSchedule:
    """Per-step beta, alpha = 1 - beta and alpha_bar = cumprod(alpha).

    The public arrays have length ``T`` (index ``t - 1``); :meth:`abar` accepts
    ``t`` in ``0..T`` with ``abar(0) == 1``.
    """

    def __init__(self, beta: torch.Tensor):
        beta = torch.as_tensor(beta, dtype=torch.float64)
        if beta.ndim != 1 or len(beta) < 1 or not ((beta > 0) & (beta < 1)).all():
            raise InvalidArgumentError("betas must be a non-empty vector in (0, 1)")
        self.T = len(beta)
        self.beta = beta
        self.alpha = 1.0 - beta
        self.alpha_bar = torch.cumprod(self.alpha, dim=0)
        self._abar0 = torch.cat([torch.ones(1, dtype=torch.float64), self.alpha_bar])
        if not (self._abar0[1:] > 0).all() or not (self._abar0[1:] < self._abar0[:-1]).all():
            raise InvalidArgumentError(
                "alpha_bar must stay positive and strictly decreasing in float64; "
                "this schedule underflows or has betas too small to register"
            )

    def config(self) -> dict:
        return {"T": self.T, "beta": self.beta.tolist()}

    def check_t(self, t, allow_zero: bool = False) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.long)
        lo = 0 if allow_zero else 1
        if t.numel() == 0 or (t < lo).any() or (t > self.T).any():
            raise InvalidArgumentError(f"timestep out of range [{lo}, {self.T}]: {t.tolist()}")
        return t

    def _at(self, table: torch.Tensor, t, like: torch.Tensor) -> torch.Tensor:
        v = table[t].to(dtype=like.dtype, device=like.device)
        if v.ndim == 1:
            v = v.view(-1, *([1] * (like.ndim - 1)))
        return v

    def abar(self, t, like: torch.Tensor) -> torch.Tensor:
        """alpha_bar at ``t`` (scalar or per-sample), broadcastable against ``like``."""
        return self._at(self._abar0, self.check_t(t, allow_zero=True), like)

    def beta_at(self, t, like):
        return self._at(self.beta, self.check_t(t) - 1, like)

    def alpha_at(self, t, like):
        return self._at(self.alpha, self.check_t(t) - 1, like)

    def snr(self, t) -> torch.Tensor:
        """``alpha_bar_t / (1 - alpha_bar_t)``, float64, one value per ``t``."""
        ab = self._abar0[self.check_t(t)]
        return ab / (1.0 - ab)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise InvalidArgumentError(f"unsupported schedule kind {kind!r}")
    if int(T) != T or T < 1 or not (0 < beta_start <= beta_end < 1):
        raise InvalidArgumentError(f"invalid schedule T={T}, beta=[{beta_start}, {beta_end}]")
    return NoiseSchedule(torch.linspace(beta_start, beta_end, int(T), dtype=torch.float64))


def schedule_from_config(cfg: ScheduleConfig) -> NoiseSchedule:
    return make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.kind)


def q_sample(z0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``."""
    if eps.shape != z0.shape:
        raise InvalidArgumentError("eps must match z0's shape")
    schedule.check_t(t)
    ab = schedule.abar(t, z0)
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def predict_z0(z_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Invert the forward process given a noise estimate."""
    schedule.check_t(t)
    ab = schedule.abar(t, z_t)
    return (z_t - (1.0 - ab).sqrt() * eps_hat) / ab.clamp(min=ALPHA_BAR_FLOOR).sqrt()


def implied_eps(z_t: torch.Tensor, t, z0: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """The noise that carries ``z0`` to ``z_t`` under the forward process."""
    ab = schedule.abar(schedule.check_t(t), z_t)
    return (z_t - ab.sqrt() * z0) / (1.0 - ab).sqrt()


def _t_batch(t, n: int, device=None) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long, device=device)
    return t.expand(n) if t.ndim == 0 else t


def denoising_loss(denoiser, z0: torch.Tensor, t, eps: torch.Tensor, cond=None, schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Mean squared error between ``eps`` and the denoiser's estimate at ``z_t``."""
    z_t = q_sample(z0, t, eps, schedule)
    eps_hat = denoiser(z_t, _t_batch(t, z0.shape[0], z0.device), cond)
    loss = F.mse_loss(eps_hat, eps)
    if not torch.isfinite(loss):
        raise NumericError("non-finite denoising loss", t=torch.as_tensor(t).tolist())
    return loss


def posterior_step_ddpm(z_t, t: int, eps_hat, schedule: NoiseSchedule, noise=None) -> torch.Tensor:
    """Ancestral step to ``t - 1`` with variance ``beta_t``; no noise when ``t == 1``."""
    t = int(schedule.check_t(t))
    alpha = schedule.alpha_at(t, z_t)
    beta = schedule.beta_at(t, z_t)
    ab = schedule.abar(t, z_t)
    mean = (z_t - beta / (1.0 - ab).sqrt() * eps_hat) / alpha.sqrt()
    if t == 1:
        return mean
    if noise is None:
        raise InvalidArgumentError("noise is required for t > 1")
    return mean + beta.sqrt() * noise


def ddim_step(z_t, t: int, t_prev: int, eps_hat, schedule: NoiseSchedule, eta: float = 0.0, noise=None) -> torch.Tensor:
    """DDIM update from ``t`` to ``t_prev`` (``t_prev = 0`` lands on the clean estimate)."""
    t = int(schedule.check_t(t))
    t_prev = int(schedule.check_t(t_prev, allow_zero=True))
    if t_prev >= t:
        raise InvalidArgumentError(f"t_prev ({t_prev}) must be < t ({t})")
    if not 0.0 <= eta <= 1.0:
        raise InvalidArgumentError("eta must lie in [0, 1]")
    ab = schedule.abar(t, z_t)
    ab_prev = schedule.abar(t_prev, z_t)
    z0_hat = predict_z0(z_t, t, eps_hat, schedule)
    sigma = eta * ((1 - ab_prev) / (1 - ab) * (1 - ab / ab_prev)).sqrt()
    direction = (1 - ab_prev - sigma**2).clamp(min=0).sqrt() * eps_hat
    out = ab_prev.sqrt() * z0_hat + direction
    if eta > 0 and t_prev > 0:
        if noise is None:
            raise InvalidArgumentError("noise is required when eta > 0")
        out = out + sigma * noise
    return out


def timestep_sequence(T: int, steps: int) -> list[int]:
    """Uniform descending subsequence of ``steps`` timesteps starting at ``T``."""
    if steps < 1 or steps > T:
        raise InvalidArgumentError(f"steps must lie in [1, {T}], got {steps}")
    ts = np.unique(np.round(np.linspace(T, 1, steps)).astype(int))[::-1]
    return [int(t) for t in ts]


def chain_seed(seed: int, chain: int) -> int:
    return int(np.random.SeedSequence([seed, chain]).generate_state(1)[0])


class ChainNoise:
    """One independent random stream per chain, derived from ``(seed, chain)``."""

    def __init__(self, seed: int, n_chains: int, chain_offset: int = 0):
        self.gens = [torch.Generator().manual_seed(chain_seed(seed, chain_offset + i)) for i in range(n_chains)]

    def draw(self, shape, dtype=torch.float32) -> torch.Tensor:
        return torch.stack([torch.randn(tuple(shape), generator=g, dtype=dtype) for g in self.gens])


@torch.no_grad()
def sample(
    denoiser,
    shape,
    cond=None,
    schedule: NoiseSchedule | None = None,
    steps: int = 50,
    eta: float = 0.0,
    seed: int = 0,
    sampler: str = "ddim",
    latent_scale: float = 1.0,
    chain_offset: int = 0,
) -> torch.Tensor:
    """Draw latents ``(B, c, h, w)`` by reverse diffusion from ``N(0, I)``.

    Chain ``i`` of the batch uses the stream ``(seed, chain_offset + i)``, so a
    chain's result does not depend on the batch it was drawn in. The returned
    latent is multiplied by ``latent_scale`` (ready for decoding).
    """
    b, *rest = shape
    noise = ChainNoise(seed, b, chain_offset)
    z = noise.draw(rest)
    if cond is not None:
        z = z.to(cond.device)
    if sampler == "ddpm":
        if steps != schedule.T:
            raise InvalidArgumentError("the ddpm sampler visits every timestep; set steps = T")
        for t in range(schedule.T, 0, -1):
            eps_hat = denoiser(z, _t_batch(t, b, z.device), cond)
            z = posterior_step_ddpm(z, t, eps_hat, schedule, noise.draw(rest) if t > 1 else None)
    elif sampler == "ddim":
        ts = timestep_sequence(schedule.T, steps)
        for t, t_prev in zip(ts, ts[1:] + [0]):
            eps_hat = denoiser(z, _t_batch(t, b, z.device), cond)
            extra = noise.draw(rest) if eta > 0 and t_prev > 0 else None
            z = ddim_step(z, t, t_prev, eps_hat, schedule, eta, extra)
    else:
        raise InvalidArgumentError(f"unknown sampler {sampler!r}")
    if not torch.isfinite(z).all():
        raise NumericError("sampler produced non-finite latents")
    return z * latent_scale


def make_sr_condition(lr_image: torch.Tensor, encoder, latent_hw, downsample_log2: int, latent_scale: float = 1.0) -> torch.Tensor:
    """Encode the LR image, bilinearly resized to the target latent's pixel size.

    Returns ``(B, c, h, w)`` divided by ``latent_scale`` so it lives in the same
    normalized space as the diffusion latents.
    """
    h, w = latent_hw
    f = 2**downsample_log2
    x = lr_image.unsqueeze(0) if lr_image.ndim == 3 else lr_image
    antialias = x.shape[-2] > h * f or x.shape[-1] > w * f
    x = F.interpolate(x, size=(h * f, w * f), mode="bilinear", align_corners=False, antialias=antialias)
    with torch.no_grad():
        cond = encoder(x)
    return cond / latent_scale
