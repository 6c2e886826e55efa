"""``arbiscale`` command line.

Exit codes: 0 success, 2 bad config / arguments / data / checkpoint,
3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from . import pipeline as pl
from .checkpoint import CheckpointError
from .errors import InvalidArgumentError, RenderResourceError, TrainingDivergence

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3

log = logging.getLogger("arbiscale")


def _scales(text: str) -> list[float]:
    items = [t for t in text.split(",") if t.strip()]
    try:
        return [float(t) for t in items]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad scale list {text!r}") from exc


def _resolution(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use N or HxW") from exc
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"bad resolution {text!r}; use N or HxW")
    return dims[0], dims[1]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="arbiscale", description="Arbitrary-scale latent diffusion toolkit.")
    p.add_argument("task", choices=cfgmod.TASKS)
    p.add_argument("--config", help="run config (JSON); required except for sr and generate")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--checkpoint", help="input checkpoint bundle")
    p.add_argument("--input", help="LR image for the sr task")
    p.add_argument("--scale", type=float, help="magnification for the sr task")
    p.add_argument("--samples", type=int, default=1, help="number of samples (distinct chains)")
    p.add_argument("--query-batch", type=int, help="pixels decoded per chunk while rendering")
    p.add_argument("--resolution", type=_resolution, help="output size for generate: N or HxW")
    p.add_argument("--scales", type=_scales, help="comma-separated scale list for eval / bench")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _need(args, *names):
    missing = [n for n in names if getattr(args, n.replace("-", "_")) is None]
    if missing:
        raise InvalidArgumentError(f"{args.task} needs " + ", ".join(f"--{n}" for n in missing))


def _load_config(args) -> cfgmod.RunConfig | None:
    if args.config is None:
        if args.task in ("sr", "generate"):
            return None
        raise InvalidArgumentError(f"{args.task} needs --config")
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.deterministic:
        cfg.deterministic = True
    if args.out:
        cfg.output_dir = args.out
    return cfg


def _emit(stream, kind):
    def emit(record):
        rec = {"kind": kind, **record}
        stream(rec)
        print(json.dumps(rec, sort_keys=True), flush=True)

    return emit


def run(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out or (cfg.output_dir if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else 0)
    pl.set_determinism(args.deterministic or bool(cfg and cfg.deterministic), seed)
    if cfg is not None and cfg.task != args.task:
        log.info("config task %s overridden by command line task %s", cfg.task, args.task)

    with pl.JsonlWriter(out / "losses.jsonl") as losses, pl.JsonlWriter(out / "metrics.jsonl") as metrics:
        loss_log, metric_log = _emit(losses, "loss"), _emit(metrics, "metric")
        task = args.task
        if task == "train-stage1":
            path = pl.run_train_stage1(cfg, out, loss_log)
        elif task == "train-ldm":
            _need(args, "checkpoint")
            path = pl.run_train_ldm(cfg, args.checkpoint, out, loss_log)
        elif task == "align":
            _need(args, "checkpoint")
            path, _ = pl.run_align(cfg, args.checkpoint, out, loss_log, metric_log)
        elif task == "sr":
            _need(args, "checkpoint", "input", "scale")
            paths = pl.run_sr(args.checkpoint, args.input, args.scale, out, seed, args.samples, args.query_batch)
            path = paths[0].parent
            for p in paths:
                metric_log({"file": p.name, "scale": args.scale, "seed": seed})
        elif task == "generate":
            _need(args, "checkpoint", "resolution")
            paths = pl.run_generate(args.checkpoint, args.resolution, out, seed, args.samples, args.query_batch, metric_log)
            path = paths[0].parent
        elif task == "eval":
            _need(args, "checkpoint")
            pl.run_eval(cfg, args.checkpoint, out, args.scales, args.query_batch, metric_log)
            path = out / "eval.txt"
        else:
            _need(args, "checkpoint")
            _, check = pl.run_bench(cfg, args.checkpoint, out, args.scales, args.query_batch, metric_log)
            metric_log({"name": "decoupling_check", **check})
            path = out / "bench.txt"
    log.info("wrote %s", path)
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except cfgmod.ConfigError as exc:
        print(f"config error at {exc.path or '<root>'}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidArgumentError, CheckpointError, RenderResourceError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
