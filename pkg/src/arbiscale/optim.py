from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidArgumentError


@dataclass
class OptimConfig:
    lr: float = 5e-5
    steps: int = 1000
    batch_size: int = 8
    grad_clip: float | None = 1.0
    log_every: int = 50

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 1 or self.batch_size < 1 or self.log_every < 1:
            raise InvalidArgumentError(f"invalid optimizer config {self}")


def adam(params, cfg: OptimConfig) -> torch.optim.Adam:
    return torch.optim.Adam([p for p in params if p.requires_grad], lr=cfg.lr)


def clip(params, cfg: OptimConfig):
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_([p for p in params if p.grad is not None], cfg.grad_clip)


def state_copy(module: torch.nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}
