"""Task orchestration behind the command line.

Each ``run_*`` function takes a validated :class:`RunConfig`, does one task
end to end and writes its artifacts (checkpoint bundles, PNGs, JSON-lines
records) into an output directory. :class:`Pipeline` is the inference handle
built from a checkpoint bundle.
"""
from __future__ import annotations

import json
import math
import warnings
from pathlib import Path

import numpy as np
import torch

from . import autoencoder as ae
from . import config as cfgmod
from . import data as dp
from . import diffusion as dm
from .alignment import finetune, freeze, params_digest
from .checkpoint import Bundle, load_bundle
from .denoiser import UNetDenoiser
from .errors import InvalidArgumentError, NumericError, TrainingDivergence
from .implicit import ImplicitDecoder
from .metrics import MetricReport, decoupling_check, fps_benchmark, psnr, self_ssim, ssim, summary_table
from .optim import adam, clip, state_copy

STAGE1_PARTS = ("encoder", "decoder", "mlp")


class JsonlWriter:
    """Append-only JSON-lines sink (one record per line, flushed eagerly)."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def set_determinism(enabled: bool, seed: int) -> None:
    torch.manual_seed(seed)
    if enabled:
        torch.use_deterministic_algorithms(True)


def out_side(side: int, scale: float) -> int:
    """Output pixels for ``side`` input pixels at ``scale`` (floor rounding)."""
    if not scale > 0:
        raise InvalidArgumentError(f"scale must be positive, got {scale}")
    # the tolerance keeps products like 10 * 1.1 = 11.000000000000002's
    # mirror image (10.999999999999998) from losing a pixel
    return int(math.floor(side * scale + 1e-9))


# --- bundle <-> modules -------------------------------------------------------


def stage1_to_bundle(bundle: Bundle, encoder, decoder: ImplicitDecoder) -> None:
    bundle.set_state("encoder", encoder.state_dict())
    bundle.set_state("mlp", decoder.mlp.state_dict())
    if decoder.feature_decoder is not None:
        bundle.set_state("decoder", decoder.feature_decoder.state_dict())


def stage1_from_bundle(bundle: Bundle, cfg: cfgmod.RunConfig):
    encoder, decoder = ae.build_stage1(cfg.autoencoder, cfg.mlp)
    encoder.load_state_dict(bundle.state("encoder"))
    decoder.mlp.load_state_dict(bundle.state("mlp"))
    if decoder.feature_decoder is not None:
        decoder.feature_decoder.load_state_dict(bundle.state("decoder"))
    return freeze(encoder), freeze(decoder)


def bundle_config(bundle: Bundle) -> cfgmod.RunConfig:
    return cfgmod.from_dict(bundle.config)


def check_compatible(saved: cfgmod.RunConfig, cfg: cfgmod.RunConfig, sections) -> None:
    """Refuse a run config whose model sections disagree with a checkpoint's."""
    for section in sections:
        a, b = getattr(saved, section), getattr(cfg, section)
        if section == "diffusion":
            lc = cfg.autoencoder.latent_channels
            a, b = (a.mode, a.schedule, a.denoiser(lc)), (b.mode, b.schedule, b.denoiser(lc))
        if a != b:
            raise cfgmod.ConfigError(f"{section} differs from the checkpoint it builds on", section)


class Pipeline:
    """Inference handle: frozen stage-1 models plus an optional denoiser."""

    def __init__(self, cfg: cfgmod.RunConfig, encoder, decoder, latent_scale: float, denoiser=None, query_batch: int | None = None):
        self.cfg = cfg
        self.encoder = encoder
        self.decoder = decoder
        self.denoiser = denoiser
        self.latent_scale = float(latent_scale)
        self.schedule = dm.schedule_from_config(cfg.diffusion.schedule)
        self.query_batch = query_batch or cfg.metrics.query_batch
        self.cond = None

    @classmethod
    def from_bundle(cls, bundle, query_batch: int | None = None) -> "Pipeline":
        if not isinstance(bundle, Bundle):
            bundle = load_bundle(bundle)
        cfg = bundle_config(bundle)
        encoder, decoder = stage1_from_bundle(bundle, cfg)
        denoiser = None
        if "denoiser" in bundle.blobs:
            denoiser = UNetDenoiser(cfg.diffusion.denoiser(cfg.autoencoder.latent_channels))
            denoiser.load_state_dict(bundle.state("denoiser"))
            denoiser.eval()
        return cls(cfg, encoder, decoder, bundle.latent_scale, denoiser, query_batch)

    @property
    def latent_side(self) -> int:
        return self.cfg.latent_side

    @property
    def mode(self) -> str:
        return self.cfg.diffusion.mode

    @property
    def base_side(self) -> int:
        """Side that output scales multiply: the LR side for SR, the latent side otherwise."""
        return self.cfg.data.lr_side if self.mode == "sr" else self.latent_side

    def _need_denoiser(self):
        if self.denoiser is None:
            raise InvalidArgumentError("checkpoint has no denoiser; run train-ldm first")

    def latent_hw_for_lr(self, lr_h: int, lr_w: int) -> tuple[int, int]:
        ratio = self.cfg.data.crop_size / self.cfg.data.lr_side
        f = self.cfg.autoencoder.factor
        h, w = lr_h * ratio / f, lr_w * ratio / f
        if h != int(h) or w != int(w):
            raise InvalidArgumentError(f"LR size {(lr_h, lr_w)} does not map to an integer latent size")
        return int(h), int(w)

    def condition(self, lr: torch.Tensor) -> torch.Tensor:
        lr = lr.unsqueeze(0) if lr.ndim == 3 else lr
        hw = self.latent_hw_for_lr(*lr.shape[-2:])
        return dm.make_sr_condition(lr, self.encoder, hw, self.cfg.autoencoder.downsample_log2, self.latent_scale)

    @torch.no_grad()
    def sample_latent(self, seed: int = 0, n: int = 1, cond: torch.Tensor | None = None, chain_offset: int = 0) -> torch.Tensor:
        """Latents ready for decoding (already multiplied by ``latent_scale``)."""
        self._need_denoiser()
        d = self.cfg.diffusion
        cond = self.cond if cond is None else cond
        if self.mode == "sr" and cond is None:
            raise InvalidArgumentError("SR checkpoint needs an LR condition")
        if cond is not None:
            h, w = cond.shape[-2:]
            if cond.shape[0] != n:
                cond = cond.expand(n, *cond.shape[1:])
        else:
            h = w = self.latent_side
        shape = (n, self.cfg.autoencoder.latent_channels, h, w)
        return dm.sample(
            self.denoiser, shape, cond, self.schedule, d.sample_steps, d.eta, seed, d.sampler, self.latent_scale, chain_offset
        )

    @torch.no_grad()
    def render(self, z: torch.Tensor, size) -> torch.Tensor:
        h, w = (size, size) if isinstance(size, int) else size
        return self.decoder.render(z, h, w, self.query_batch)

    def super_resolve(self, lr: torch.Tensor, scale: float, seed: int = 0, samples: int = 1) -> list[torch.Tensor]:
        """One output per sample; sample ``i`` uses chain ``i`` of ``seed``."""
        if not scale > 1:
            raise InvalidArgumentError(f"scale must be > 1, got {scale}")
        cond = self.condition(lr)
        h, w = out_side(lr.shape[-2], scale), out_side(lr.shape[-1], scale)
        outs = []
        for i in range(samples):
            z = self.sample_latent(seed, 1, cond, chain_offset=i)
            outs.append(self.render(z, (h, w))[0])
        return outs

    def generate(self, resolution, seed: int = 0, samples: int = 1) -> list[torch.Tensor]:
        if self.mode != "generate":
            raise InvalidArgumentError("checkpoint was trained for super-resolution; use the sr task")
        z = self.sample_latent(seed, samples)
        return list(self.render(z, resolution))


# --- datasets -------------------------------------------------------------------


def _dataset_spec(cfg: cfgmod.RunConfig, split="train") -> dp.DatasetSpec:
    root = dp.resolve_root(cfg.data.root if split == "train" else (cfg.data.val_root or cfg.data.root))
    if not Path(root).is_dir():
        raise InvalidArgumentError(f"dataset directory {root} does not exist")
    return dp.DatasetSpec(
        root=root,
        crop_size=cfg.data.crop_size,
        scale_range=cfg.data.scale_range or (1.0, 4.0),
        n_coord_samples=cfg.data.n_coord_samples,
        split=split,
        seed=cfg.seed,
    )


def train_set(cfg: cfgmod.RunConfig) -> dp.ImageFolder:
    return dp.ImageFolder(_dataset_spec(cfg), cfg.data.limit)


def val_images(cfg: cfgmod.RunConfig) -> list[torch.Tensor]:
    """Full-size validation images, center-cropped to squares, in a fixed order."""
    spec = _dataset_spec(cfg, "val")
    out = []
    for img in dp.load_images(spec):
        s = min(img.shape[-2:])
        out.append(dp.crop(img, s, None, "val"))
        if cfg.data.val_limit is not None and len(out) >= cfg.data.val_limit:
            break
    return out


# --- stage 1 ----------------------------------------------------------------


def run_train_stage1(cfg: cfgmod.RunConfig, out_dir, log=None) -> Path:
    out_dir = Path(out_dir)
    dataset = train_set(cfg)
    res = ae.train_stage1(dataset, cfg.autoencoder, cfg=cfg.stage1, seed=cfg.seed, on_log=log, mlp_cfg=cfg.mlp)
    bundle = Bundle(config=cfg.to_dict(), latent_scale=res.latent_scale, step=cfg.stage1.optim.steps)
    stage1_to_bundle(bundle, res.encoder, res.decoder)
    bundle.extra["stage"] = "stage1"
    return bundle.save(out_dir / "stage1.ckpt")


# --- latent diffusion -----------------------------------------------------------


def sr_condition_batch(pipe: Pipeline, hr: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Conditioning for a batch of HR crops, one random scale per crop."""
    crop = hr.shape[-1]
    hw = (pipe.latent_side, pipe.latent_side)
    conds = []
    for img in hr:
        s = dp.sample_scale(rng, pipe.cfg.data.scale_range)
        side = max(1, round(crop / s))
        lr = dp.resize(img, side, side)
        conds.append(dm.make_sr_condition(lr, pipe.encoder, hw, pipe.cfg.autoencoder.downsample_log2, pipe.latent_scale))
    return torch.cat(conds)


def latent_batch(pipe: Pipeline, dataset: dp.ImageFolder, rng, batch: int):
    hr = dataset.crops(rng, batch)
    with torch.no_grad():
        z0 = pipe.encoder(hr) / pipe.latent_scale
        cond = sr_condition_batch(pipe, hr, rng) if pipe.mode == "sr" else None
    return hr, z0, cond


def train_denoiser(pipe: Pipeline, dataset, optim_cfg, seed: int, on_step=None):
    """Fit the denoiser with the noise-prediction loss on normalized latents.

    ``on_step`` receives a record for every optimizer step.
    """
    den = pipe.denoiser
    den.train()
    params = list(den.parameters())
    opt = adam(params, optim_cfg)
    rng = dp.worker_rng(seed, 2)
    gen = torch.Generator().manual_seed(dm.chain_seed(seed, 2))
    last_good = state_copy(den)
    losses = []
    for step in range(1, optim_cfg.steps + 1):
        _, z0, cond = latent_batch(pipe, dataset, rng, optim_cfg.batch_size)
        t = torch.from_numpy(rng.integers(1, pipe.schedule.T + 1, size=z0.shape[0])).long()
        eps = torch.randn(z0.shape, generator=gen)
        try:
            loss = dm.denoising_loss(den, z0, t, eps, cond, pipe.schedule)
        except NumericError as exc:
            raise TrainingDivergence(str(exc), step, last_good) from exc
        opt.zero_grad(set_to_none=True)
        loss.backward()
        clip(params, optim_cfg)
        opt.step()
        losses.append(loss.item())
        if on_step:
            on_step({"step": step, "loss": losses[-1]})
        if step % optim_cfg.log_every == 0:
            last_good = state_copy(den)
    den.eval()
    return losses


def run_train_ldm(cfg: cfgmod.RunConfig, checkpoint, out_dir, log=None) -> Path:
    if cfg.diffusion.mode == "sr" and cfg.data.scale_range is None:
        raise cfgmod.ConfigError("SR mode needs a scale_range", "data/scale_range")
    src = load_bundle(checkpoint)
    check_compatible(bundle_config(src), cfg, ("autoencoder", "mlp"))
    encoder, decoder = stage1_from_bundle(src, cfg)
    digests = {k: params_digest(m) for k, m in (("encoder", encoder), ("decoder", decoder))}
    pipe = Pipeline(cfg, encoder, decoder, src.latent_scale)
    torch.manual_seed(cfg.seed)
    pipe.denoiser = UNetDenoiser(cfg.diffusion.denoiser(cfg.autoencoder.latent_channels))
    dataset = train_set(cfg)
    train_denoiser(pipe, dataset, cfg.ldm, cfg.seed, log)
    if {k: params_digest(m) for k, m in (("encoder", encoder), ("decoder", decoder))} != digests:
        raise RuntimeError("stage-1 parameters changed while training the denoiser")
    bundle = Bundle(
        config=cfg.to_dict(),
        blobs={k: v for k, v in src.blobs.items() if k in STAGE1_PARTS},
        latent_scale=src.latent_scale,
        schedule=pipe.schedule.config(),
        step=cfg.ldm.steps,
        extra={"stage": "ldm"},
    )
    bundle.set_state("denoiser", pipe.denoiser.state_dict())
    return bundle.save(Path(out_dir) / "ldm.ckpt")


# --- evaluation -------------------------------------------------------------------


def sr_eval(pipe: Pipeline, images: list[torch.Tensor], scales, seeds=(0,)) -> list[MetricReport]:
    """PSNR / SSIM / MSE per scale against ground truth resized from each HR image.

    Every image gets one latent per seed (sampled once, from the LR version of
    the image at ``lr_side``); the same latent is rendered at every scale, so
    the comparison across scales isolates the decoder.
    """
    lr_side = pipe.cfg.data.lr_side
    scales = [float(s) for s in scales]
    acc = {s: {"psnr": [], "ssim": [], "mse": []} for s in scales}
    for i, hr in enumerate(images):
        lr = dp.resize(hr, lr_side, lr_side)
        cond = pipe.condition(lr)
        for seed in seeds:
            z = pipe.sample_latent(seed, 1, cond, chain_offset=i)
            for s in scales:
                side = out_side(lr_side, s)
                if side > hr.shape[-1]:
                    warnings.warn(f"validation image too small for scale {s}; skipped")
                    continue
                gt = dp.resize(hr, side, side)
                pred = pipe.render(z, side)[0].clamp(-1, 1)
                acc[s]["psnr"].append(psnr(pred, gt))
                acc[s]["mse"].append(float((pred.double() - gt.double()).pow(2).mean()))
                if side >= 11:
                    acc[s]["ssim"].append(ssim(pred, gt))
    reports = []
    for s in scales:
        ctx = {"scale": s, "side": out_side(lr_side, s), "n": len(acc[s]["psnr"]), "in_range": s <= pipe.cfg.data.scale_range[1]}
        for name, units in (("psnr", "dB"), ("mse", ""), ("ssim", "")):
            if acc[s][name]:
                reports.append(MetricReport(name, float(np.mean(acc[s][name])), units, dict(ctx)))
    return reports


def self_ssim_eval(pipe: Pipeline, latents: torch.Tensor, scales) -> list[MetricReport]:
    """SelfSSIM of each render against the render at the smallest scale."""
    base = min(scales)
    base_side = out_side(pipe.base_side, base)
    ref = pipe.render(latents, base_side)
    reports = []
    for s in scales:
        side = out_side(pipe.base_side, s)
        img = pipe.render(latents, side)
        vals = [self_ssim(img[i], ref[i], base_side) for i in range(len(latents))]
        reports.append(MetricReport("self_ssim", float(np.mean(vals)), "", {"scale": float(s), "side": side, "reference_scale": float(base)}))
    return reports


# --- alignment --------------------------------------------------------------------


def align_scales(cfg: cfgmod.RunConfig) -> list[float]:
    """Evaluation grid for the before/after report."""
    s_max = cfg.data.scale_range[1] if cfg.data.scale_range else 4.0
    grid = {float(s) for s in cfg.metrics.eval_scales}
    grid |= {float(s_max)}
    grid |= {5.3, 7.0, 10.0, 12.0}
    return sorted(grid)


def run_align(cfg: cfgmod.RunConfig, checkpoint, out_dir, log=None, metrics_log=None) -> tuple[Path, dict]:
    src = load_bundle(checkpoint)
    check_compatible(bundle_config(src), cfg, ("autoencoder", "mlp", "diffusion"))
    pipe = Pipeline.from_bundle(src)
    pipe.cfg = cfg
    pipe._need_denoiser()
    if pipe.mode == "sr" and cfg.data.scale_range is None:
        raise cfgmod.ConfigError("SR mode needs a scale_range", "data/scale_range")
    dataset = train_set(cfg)
    h, w = cfg.align.recon_render_size
    if min(h, w) < pipe.latent_side:
        raise cfgmod.ConfigError("recon_render_size must be at least the latent size", "align/recon_render_size")
    digests = {"encoder": params_digest(pipe.encoder), "decoder": params_digest(pipe.decoder)}

    images = val_images(cfg) if pipe.mode == "sr" else []
    scales = [s for s in align_scales(cfg) if not images or out_side(cfg.data.lr_side, s) <= min(im.shape[-1] for im in images)]
    seeds = tuple(cfg.metrics.eval_seeds)

    def evaluate():
        if pipe.mode == "sr":
            return sr_eval(pipe, images, scales, seeds)
        z = pipe.sample_latent(seeds[0], 8)
        return self_ssim_eval(pipe, z, scales)

    before = evaluate()

    def batch_fn(rng):
        hr, z0, cond = latent_batch(pipe, dataset, rng, cfg.align.batch_size)
        if hr.shape[-2:] != (h, w):
            hr = dp.resize(hr, h, w)
        return hr, z0, cond

    finetune(pipe.denoiser, pipe.decoder, batch_fn, cfg.align, pipe.schedule, cfg.seed, pipe.latent_scale, log)
    after = evaluate()
    if {"encoder": params_digest(pipe.encoder), "decoder": params_digest(pipe.decoder)} != digests:
        raise RuntimeError("frozen parameters changed during alignment")

    report = {"before": [asdict_report(r) for r in before], "after": [asdict_report(r) for r in after]}
    if metrics_log:
        for phase, reps in (("before", before), ("after", after)):
            for r in reps:
                metrics_log({**asdict_report(r), "phase": phase})
    bundle = Bundle(
        config=cfg.to_dict(),
        blobs={k: v for k, v in src.blobs.items() if k in STAGE1_PARTS},
        latent_scale=src.latent_scale,
        schedule=pipe.schedule.config(),
        step=src.step + cfg.align.steps,
        extra={"stage": "align", "report": report},
    )
    bundle.set_state("denoiser", pipe.denoiser.state_dict())
    path = bundle.save(Path(out_dir) / "align.ckpt")
    Path(out_dir, "align_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    return path, report


def asdict_report(r: MetricReport) -> dict:
    return json.loads(r.to_json())


# --- inference tasks --------------------------------------------------------------


def _fmt_scale(s: float) -> str:
    return f"{s:g}".replace(".", "p")


def run_sr(checkpoint, input_path, scale: float, out_dir, seed: int = 0, samples: int = 1, query_batch=None) -> list[Path]:
    if not scale > 1:
        raise InvalidArgumentError(f"scale must be > 1, got {scale}")
    if samples < 1:
        raise InvalidArgumentError("samples must be >= 1")
    pipe = Pipeline.from_bundle(checkpoint, query_batch)
    if pipe.mode != "sr":
        raise InvalidArgumentError("checkpoint was trained for generation; use the generate task")
    lr = dp.read_image(input_path)
    outs = pipe.super_resolve(lr, scale, seed, samples)
    stem = Path(input_path).stem
    paths = []
    for i, img in enumerate(outs):
        p = Path(out_dir) / f"{stem}_x{_fmt_scale(scale)}_seed{seed}_{i}.png"
        p.parent.mkdir(parents=True, exist_ok=True)
        dp.save_png(img, p)
        paths.append(p)
    return paths


def run_generate(checkpoint, resolution, out_dir, seed: int = 0, samples: int = 1, query_batch=None, metrics_log=None) -> list[Path]:
    if samples < 1:
        raise InvalidArgumentError("samples must be >= 1")
    pipe = Pipeline.from_bundle(checkpoint, query_batch)
    if pipe.mode != "generate":
        raise InvalidArgumentError("checkpoint was trained for super-resolution; use the sr task")
    h, w = resolution
    z = pipe.sample_latent(seed, samples)
    imgs = pipe.render(z, (h, w))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    a, b = pipe.cfg.metrics.selfssim_sizes
    ra, rb = pipe.render(z, a), pipe.render(z, b)
    sidecar = []
    for i in range(samples):
        p = out_dir / f"gen_seed{seed}_{i}_{h}x{w}.png"
        dp.save_png(imgs[i], p)
        paths.append(p)
        rec = {"file": p.name, "seed": seed, "index": i, "self_ssim": self_ssim(ra[i], rb[i]), "self_ssim_sizes": [a, b]}
        sidecar.append(rec)
        if metrics_log:
            metrics_log(rec)
    (out_dir / f"gen_seed{seed}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return paths


def run_eval(cfg: cfgmod.RunConfig, checkpoint, out_dir, scales=None, query_batch=None, metrics_log=None) -> list[MetricReport]:
    scales = list(cfg.metrics.eval_scales if scales is None else scales)
    if not scales:
        raise InvalidArgumentError("eval needs at least one scale")
    pipe = Pipeline.from_bundle(checkpoint, query_batch)
    pipe._need_denoiser()
    seeds = tuple(cfg.metrics.eval_seeds)
    if pipe.mode == "sr":
        if not (cfg.data.val_root or cfg.data.root):
            raise InvalidArgumentError("eval needs a validation set")
        pipe.cfg.data = cfg.data
        images = val_images(cfg)
        reports = sr_eval(pipe, images, scales, seeds)
        lr = dp.resize(images[0], cfg.data.lr_side, cfg.data.lr_side)
        z = pipe.sample_latent(seeds[0], 1, pipe.condition(lr))
    else:
        reports = []
        z = pipe.sample_latent(seeds[0], 4)
    reports += self_ssim_eval(pipe, z, scales)
    _write_reports(reports, out_dir, "eval", metrics_log)
    return reports


def run_bench(cfg: cfgmod.RunConfig, checkpoint, out_dir, scales=None, query_batch=None, metrics_log=None) -> tuple[list[MetricReport], dict]:
    scales = list(cfg.metrics.bench_scales if scales is None else scales)
    if not scales:
        raise InvalidArgumentError("bench needs at least one scale")
    pipe = Pipeline.from_bundle(checkpoint, query_batch)
    pipe._need_denoiser()
    if pipe.mode == "sr":
        s = pipe.cfg.data.lr_side
        pipe.cond = pipe.condition(torch.zeros(3, s, s))
    reports = fps_benchmark(pipe, scales, cfg.metrics.repeats, cfg.metrics.warmup, cfg.seed)
    check = decoupling_check(reports) if len(scales) > 1 else {"passed": True}
    _write_reports(reports, out_dir, "bench", metrics_log)
    Path(out_dir, "bench_check.json").write_text(json.dumps(check, indent=1, sort_keys=True) + "\n")
    if not check["passed"]:
        warnings.warn(f"sampling/rendering decoupling check failed: {check}")
    return reports, check


def _write_reports(reports, out_dir, name, metrics_log=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{name}.jsonl", "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(r.to_json() + "\n")
            if metrics_log:
                metrics_log(asdict_report(r))
    (out_dir / f"{name}.txt").write_text(summary_table(reports) + "\n")
