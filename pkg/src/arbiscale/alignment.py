"""Alignment fine-tuning of the denoiser through the frozen implicit decoder.

The objective mixes the latent denoising loss (in its clean-latent form) with
an image-space reconstruction loss on the decoded estimate. Both terms share
the ``alpha_bar_t / (1 - alpha_bar_t)`` weight, computed by :func:`snr_weight`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import torch

from . import coords as cg
from . import diffusion as dm
from .errors import InvalidArgumentError, NumericError, TrainingDivergence
from .implicit import ImplicitDecoder
from .optim import clip, state_copy

MODES = ("random_t", "trajectory")


@dataclass
class AlignConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    mode: str = "random_t"
    recon_render_size: tuple[int, int] = (64, 64)
    finetune_lr: float = 1e-6
    ddim_steps: int = 10
    steps: int = 100
    batch_size: int = 8
    n_coord_samples: int = 1024
    grad_clip: float | None = 1.0
    log_every: int = 10

    def __post_init__(self):
        self.recon_render_size = tuple(self.recon_render_size)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidArgumentError("loss weights must be non-negative")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")
        if self.finetune_lr <= 0 or self.ddim_steps < 1 or self.steps < 1:
            raise InvalidArgumentError(f"invalid alignment config {self}")


def snr_weight(t, schedule: dm.NoiseSchedule) -> torch.Tensor:
    """Per-sample ``alpha_bar_t / (1 - alpha_bar_t)`` (float64)."""
    return schedule.snr(t)


def _weighted_mse(a: torch.Tensor, b: torch.Tensor, t, schedule) -> torch.Tensor:
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    w = snr_weight(t, schedule).to(a.dtype)
    per_sample = (a - b).pow(2).reshape(a.shape[0], -1).mean(dim=1)
    return (w * per_sample).mean()


def recon_loss(x0: torch.Tensor, x0_hat: torch.Tensor, t, schedule: dm.NoiseSchedule) -> torch.Tensor:
    """Image-space loss ``w_t * mean (x0 - x0_hat)^2`` (batch-averaged)."""
    return _weighted_mse(x0, x0_hat, t, schedule)


def dm_loss_z0(z0: torch.Tensor, z0_hat: torch.Tensor, t, schedule: dm.NoiseSchedule) -> torch.Tensor:
    """Denoising loss written on clean latents; equals the noise-space MSE."""
    return _weighted_mse(z0, z0_hat, t, schedule)


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, v in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: torch.nn.Module) -> torch.nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


def align_loss(
    denoiser,
    x0_rgb: torch.Tensor,
    z0: torch.Tensor,
    t,
    eps: torch.Tensor,
    cond,
    decoder: ImplicitDecoder,
    schedule: dm.NoiseSchedule,
    cfg: AlignConfig,
    coords: torch.Tensor,
    cells: torch.Tensor,
    latent_scale: float = 1.0,
):
    """``lambda1 * L_dm + lambda2 * L_recon`` for one batch.

    ``z0`` is the normalized clean latent, ``x0_rgb`` the ground-truth colors
    ``(B, N, 3)`` at ``coords``/``cells``. The decoder must be frozen; gradients
    reach only the denoiser. Returns ``(loss, parts)`` where ``parts`` holds the
    detached term values.
    """
    if any(p.requires_grad for p in decoder.parameters()):
        raise InvalidArgumentError("decoder parameters must be frozen before alignment")
    t_vec = dm._t_batch(t, z0.shape[0], z0.device)
    z_t = dm.q_sample(z0, t_vec, eps, schedule)
    eps_hat = denoiser(z_t, t_vec, cond)
    z0_hat = dm.predict_z0(z_t, t_vec, eps_hat, schedule)
    l_dm = dm_loss_z0(z0, z0_hat, t_vec, schedule)
    if cfg.lambda2 > 0:
        x0_hat = decoder(z0_hat * latent_scale, coords, cells)
        l_rec = recon_loss(x0_rgb, x0_hat, t_vec, schedule)
    else:
        l_rec = torch.zeros((), dtype=l_dm.dtype)
    loss = cfg.lambda1 * l_dm + cfg.lambda2 * l_rec
    if not torch.isfinite(loss):
        raise NumericError("non-finite alignment loss", t=t_vec.tolist())
    return loss, {"L_dm": l_dm.item(), "L_recon": l_rec.item(), "L_align": loss.item()}


def finetune(
    denoiser,
    decoder: ImplicitDecoder,
    batch_fn,
    cfg: AlignConfig,
    schedule: dm.NoiseSchedule,
    seed: int = 0,
    latent_scale: float = 1.0,
    on_log=None,
):
    """Fine-tune ``denoiser`` with the alignment loss; returns the loss log.

    ``batch_fn(rng) -> (x0_image, z0, cond)`` supplies ground-truth images at
    ``cfg.recon_render_size``, their normalized latents and conditioning
    (``None`` for unconditional models).

    ``random_t`` draws one timestep per sample. ``trajectory`` starts from
    noise and walks a reverse DDIM chain of ``cfg.ddim_steps`` steps, taking an
    optimizer step at every visited timestep; the state is detached between
    steps. The decoder is verified unchanged on exit.
    """
    freeze(decoder)
    before = params_digest(decoder)
    denoiser.train()
    params = [p for p in denoiser.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.finetune_lr)
    rng = np.random.default_rng([seed, 1])
    gen = torch.Generator().manual_seed(dm.chain_seed(seed, 1))
    h, w = cfg.recon_render_size
    log = []
    last_good = state_copy(denoiser)

    def update(step, x0, z0, t, eps, cond, idx):
        coords, cells, rgb = _pixels(x0, idx, h, w)
        loss, parts = align_loss(denoiser, rgb, z0, t, eps, cond, decoder, schedule, cfg, coords, cells, latent_scale)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        grads_ok = all(torch.isfinite(p.grad).all() for p in params if p.grad is not None)
        if not grads_ok:
            raise TrainingDivergence(f"non-finite gradient at step {step}", step, last_good)
        clip(params, cfg)
        opt.step()
        t_val = int(torch.as_tensor(t).reshape(-1)[0])
        rec = {"step": step, "t": t_val, **parts}
        if step % cfg.log_every == 0 or step == cfg.steps:
            log.append(rec)
            if on_log:
                on_log(rec)
        return rec

    step = 0
    try:
        while step < cfg.steps:
            x0, z0, cond = batch_fn(rng)
            b = z0.shape[0]
            idx = torch.from_numpy(rng.choice(h * w, size=min(cfg.n_coord_samples, h * w), replace=False))
            if cfg.mode == "random_t":
                t = torch.from_numpy(rng.integers(1, schedule.T + 1, size=b)).long()
                eps = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
                step += 1
                update(step, x0, z0, t, eps, cond, idx)
            else:
                ts = dm.timestep_sequence(schedule.T, cfg.ddim_steps)
                z_t = torch.randn(z0.shape, generator=gen, dtype=z0.dtype)
                for t, t_prev in zip(ts, ts[1:] + [0]):
                    if step >= cfg.steps:
                        break
                    eps = dm.implied_eps(z_t, t, z0, schedule)
                    step += 1
                    update(step, x0, z0, t, eps, cond, idx)
                    with torch.no_grad():
                        eps_hat = denoiser(z_t, dm._t_batch(t, b), cond)
                        z_t = dm.ddim_step(z_t, t, t_prev, eps_hat, schedule, 0.0)
            last_good = state_copy(denoiser)
    except NumericError as exc:
        raise TrainingDivergence(str(exc), step, last_good) from exc
    denoiser.eval()
    if params_digest(decoder) != before:
        raise RuntimeError("frozen decoder parameters changed during alignment")
    return log


def _pixels(x0: torch.Tensor, idx: torch.Tensor, h: int, w: int):
    if x0.shape[-2:] != (h, w):
        raise InvalidArgumentError(f"ground truth must be rendered at {(h, w)}, got {tuple(x0.shape[-2:])}")
    coords = cg.make_coord_grid(h, w, dtype=x0.dtype)[idx]
    cells = cg.make_cell(h, w, len(idx), dtype=x0.dtype)
    rgb = x0.reshape(x0.shape[0], 3, -1)[:, :, idx].transpose(1, 2)
    return coords, cells, rgb
