"""Image quality and consistency metrics, timing harness, gradient oracle."""
from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import torch
import torch.nn.functional as F

from .errors import InvalidArgumentError, NumericError

SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
PIXEL_RANGE = 2.0  # images live in [-1, 1]

# Reported end-to-end throughput of the reference system at 8x on its own
# hardware. Kept for context in benchmark tables; never asserted.
REFERENCE_FPS_8X = 0.2568


@dataclass
class MetricReport:
    name: str
    value: float
    units: str = ""
    context: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(self.value):
            d["value"] = "inf" if self.value > 0 else "-inf"
        return json.dumps(d, sort_keys=True)


def _check_same(a, b):
    if a.shape != b.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: torch.Tensor, b: torch.Tensor, peak: float = PIXEL_RANGE) -> float:
    """``10 log10(peak^2 / MSE)`` in dB; identical inputs give ``inf``."""
    _check_same(a, b)
    mse = float((a.double() - b.double()).pow(2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def _gaussian_window(size: int, sigma: float, dtype) -> torch.Tensor:
    x = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window: int = SSIM_WINDOW,
    k1: float = SSIM_K1,
    k2: float = SSIM_K2,
    data_range: float = PIXEL_RANGE,
    sigma: float = SSIM_SIGMA,
) -> float:
    """Gaussian-windowed SSIM averaged over channels, valid positions and batch.

    Accepts ``(C, H, W)`` or ``(B, C, H, W)``.
    """
    _check_same(a, b)
    if window % 2 == 0:
        raise InvalidArgumentError("SSIM window must be odd")
    if min(a.shape[-2:]) < window:
        raise InvalidArgumentError(f"image {tuple(a.shape[-2:])} smaller than SSIM window {window}")
    x = a.double().reshape(-1, 1, *a.shape[-2:])
    y = b.double().reshape(-1, 1, *b.shape[-2:])
    w = _gaussian_window(window, sigma, torch.float64)[None, None]
    mu_x, mu_y = F.conv2d(x, w), F.conv2d(y, w)
    sxx = F.conv2d(x * x, w) - mu_x**2
    syy = F.conv2d(y * y, w) - mu_y**2
    sxy = F.conv2d(x * y, w) - mu_x * mu_y
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float((num / den).mean())


def self_ssim(img_a: torch.Tensor, img_b: torch.Tensor, size: int | tuple[int, int] | None = None, **kw) -> float:
    """SSIM after bicubic-downsampling both renders to a common resolution.

    The common size defaults to the smaller of the two.
    """
    from .data import resize

    if size is None:
        size = min(img_a.shape[-2:], img_b.shape[-2:], key=lambda s: s[0] * s[1])
    elif isinstance(size, int):
        size = (size, size)
    ra = resize(img_a.float(), *size)
    rb = resize(img_b.float(), *size)
    return ssim(ra, rb, **kw)


class FeatureExtractor(Protocol):
    """Plug-in for learned-feature metrics (FID, precision/recall, LPIPS).

    No network ships with this package; callers pass their own extractor.
    """

    def __call__(self, images: torch.Tensor) -> torch.Tensor: ...


def frechet_distance(real: torch.Tensor, fake: torch.Tensor, extractor: FeatureExtractor) -> float:
    """Frechet distance between Gaussian fits of extracted features."""
    import numpy as np
    from scipy import linalg

    fr = extractor(real).double().cpu().numpy()
    ff = extractor(fake).double().cpu().numpy()
    mu1, mu2 = fr.mean(0), ff.mean(0)
    s1, s2 = np.cov(fr, rowvar=False), np.cov(ff, rowvar=False)
    covmean = linalg.sqrtm(s1 @ s2)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(((mu1 - mu2) ** 2).sum() + np.trace(s1 + s2 - 2 * covmean))


# --- timing -----------------------------------------------------------------


def _timed(fn: Callable[[], object]) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def fps_benchmark(
    pipeline, scales: Sequence[float], repeats: int = 3, warmup: int = 1, seed: int = 0, sample_draws: int = 5
) -> list[MetricReport]:
    """Time end-to-end inference per output scale, split into sampling and rendering.

    ``pipeline`` needs ``sample_latent(seed)`` and ``render(z, size)`` plus a
    ``base_side`` attribute (the side that ``scale`` multiplies). Each timing
    is the minimum over ``repeats`` runs after ``warmup`` discarded runs; the
    minimum is the least noise-sensitive estimate on a shared machine. Repeats
    cycle through all scales so slow drift in machine load is spread evenly
    over the scales instead of landing on one of them. Sampling is cheap next
    to rendering, so each cycle times it ``sample_draws`` times, after one
    untimed run so that no timed run starts right after a large render.
    """
    if not scales:
        raise InvalidArgumentError("fps_benchmark needs at least one scale")
    if repeats < 1 or sample_draws < 1:
        raise InvalidArgumentError(f"repeats and sample_draws must be at least 1, got {repeats}, {sample_draws}")
    sides = [int(math.floor(pipeline.base_side * scale)) for scale in scales]
    best = [[math.inf, math.inf] for _ in scales]
    reports = []
    with torch.inference_mode():
        z = pipeline.sample_latent(seed)
        for _ in range(warmup):
            for side in sides:
                pipeline.sample_latent(seed)
                pipeline.render(z, side)
        for _ in range(repeats):
            for i, side in enumerate(sides):
                pipeline.sample_latent(seed)
                for _ in range(sample_draws):
                    best[i][0] = min(best[i][0], _timed(lambda: pipeline.sample_latent(seed)))
                best[i][1] = min(best[i][1], _timed(lambda: pipeline.render(z, side)))
        for scale, side, (t_sample, t_render) in zip(scales, sides, best):
            ctx = {"scale": scale, "side": side, "pixels": side * side}
            reports += [
                MetricReport("sample_seconds", t_sample, "s", dict(ctx)),
                MetricReport("render_seconds", t_render, "s", dict(ctx)),
                MetricReport("fps", 1.0 / (t_sample + t_render), "frames/s", dict(ctx)),
            ]
    return reports


def decoupling_check(reports: list[MetricReport], max_sample_spread: float = 0.05, max_render_factor: float = 2.0) -> dict:
    """Check that sampling time ignores the output scale and rendering tracks pixels.

    Sampling spread is ``(max - min) / median`` over scales. For each pair of
    consecutive scales the render-time ratio must lie within a factor
    ``max_render_factor`` of the pixel-count ratio.
    """
    samp = [r.value for r in reports if r.name == "sample_seconds"]
    rend = sorted((r.context["pixels"], r.value) for r in reports if r.name == "render_seconds")
    spread = (max(samp) - min(samp)) / statistics.median(samp)
    ratios = []
    for (p0, t0), (p1, t1) in zip(rend, rend[1:]):
        ratios.append((t1 / t0) / (p1 / p0))
    render_ok = all(1 / max_render_factor <= r <= max_render_factor for r in ratios)
    return {
        "sample_spread": spread,
        "sample_ok": spread < max_sample_spread,
        "render_ratio_over_pixel_ratio": ratios,
        "render_ok": render_ok,
        "passed": spread < max_sample_spread and render_ok,
    }


# --- gradient oracle --------------------------------------------------------


def grad_check(loss_fn: Callable[[torch.Tensor], torch.Tensor], params: torch.Tensor, h: float = 1e-5) -> float:
    """Max relative error between autograd and central finite differences.

    ``loss_fn`` maps a flat float64 parameter vector to a scalar. The error per
    coordinate is ``|g_fd - g| / max(|g_fd|, |g|, 1e-8)``.
    """
    p = params.detach().double().clone().requires_grad_(True)
    loss = loss_fn(p)
    if not torch.isfinite(loss):
        raise NumericError("non-finite loss at the check point")
    (g,) = torch.autograd.grad(loss, p)
    g = g.detach()
    fd = torch.empty_like(g)
    with torch.no_grad():
        base = p.detach().clone()
        for i in range(base.numel()):
            e = torch.zeros_like(base)
            e[i] = h
            lp = loss_fn(base + e)
            lm = loss_fn(base - e)
            if not (torch.isfinite(lp) and torch.isfinite(lm)):
                raise NumericError("non-finite loss during finite differencing", coordinate=i)
            fd[i] = (lp - lm) / (2 * h)
    denom = torch.maximum(torch.maximum(fd.abs(), g.abs()), torch.full_like(g, 1e-8))
    return float(((fd - g).abs() / denom).max())


def module_loss_fn(module: torch.nn.Module, loss_of_module: Callable[[], torch.Tensor]):
    """Wrap a module's parameters as a flat vector for :func:`grad_check`.

    Returns ``(loss_fn, flat_params)``; ``loss_fn(vec)`` evaluates
    ``loss_of_module()`` with the module's trainable parameters temporarily
    replaced by views into ``vec``.
    """
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    owners = []
    for name, _ in named:
        *path, leaf = name.split(".")
        owners.append((module.get_submodule(".".join(path)), leaf))
    shapes = [p.shape for _, p in named]
    sizes = [math.prod(s) for s in shapes]
    flat = torch.cat([p.detach().reshape(-1) for _, p in named])

    def loss_fn(vec):
        saved = [owner._parameters[leaf] for owner, leaf in owners]
        try:
            for (owner, leaf), part, shape in zip(owners, torch.split(vec, sizes), shapes):
                owner._parameters[leaf] = part.view(shape)
            return loss_of_module()
        finally:
            for (owner, leaf), p in zip(owners, saved):
                owner._parameters[leaf] = p

    return loss_fn, flat


def summary_table(reports: list[MetricReport]) -> str:
    keys = sorted({k for r in reports for k in r.context})
    header = ["metric", "value", "units"] + keys
    rows = [header]
    for r in reports:
        rows.append([r.name, f"{r.value:.6g}", r.units] + [str(r.context.get(k, "")) for k in keys])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows)
