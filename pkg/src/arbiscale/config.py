"""Run configuration: schema, validation and typed sections.

A run config is one JSON document. It is validated against
:data:`RUN_CONFIG_SCHEMA` before anything else happens; unknown keys are
rejected at every level so typos fail loudly.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema

from .alignment import AlignConfig
from .autoencoder import AutoEncoderConfig, Stage1Config
from .denoiser import DenoiserConfig
from .diffusion import ScheduleConfig
from .errors import InvalidArgumentError
from .implicit import MlpConfig
from .optim import OptimConfig

TASKS = ("train-stage1", "train-ldm", "align", "sr", "generate", "eval", "bench")


class ConfigError(InvalidArgumentError):
    def __init__(self, message, path: str = ""):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


def _obj(props: dict, required=()) -> dict:
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}
_POS_NUM = {"type": "number", "exclusiveMinimum": 0}
_BOOL = {"type": "boolean"}
_STR = {"type": "string"}
_OPT_NUM = {"type": ["number", "null"]}

_OPTIM = {
    "lr": _POS_NUM,
    "steps": _POS_INT,
    "batch_size": _POS_INT,
    "grad_clip": _OPT_NUM,
    "log_every": _POS_INT,
}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "arbiscale run config",
    **_obj(
        {
            "task": {"enum": list(TASKS)},
            "seed": _INT,
            "output_dir": _STR,
            "device": {"enum": ["cpu", "cuda"]},
            "deterministic": _BOOL,
            "data": _obj(
                {
                    "root": _STR,
                    "val_root": {"type": ["string", "null"]},
                    "crop_size": _POS_INT,
                    "scale_range": {
                        "type": "array",
                        "items": _NUM,
                        "minItems": 2,
                        "maxItems": 2,
                    },
                    "n_coord_samples": _POS_INT,
                    "limit": {"type": ["integer", "null"], "minimum": 1},
                    "val_limit": {"type": ["integer", "null"], "minimum": 1},
                    "lr_side": _POS_INT,
                },
                required=["root"],
            ),
            "autoencoder": _obj(
                {
                    "downsample_log2": _POS_INT,
                    "latent_channels": _POS_INT,
                    "feature_channels": _POS_INT,
                    "hidden_channels": _POS_INT,
                    "n_resblocks": _POS_INT,
                    "norm_groups": _POS_INT,
                    "use_feature_decoder": _BOOL,
                }
            ),
            "mlp": _obj(
                {
                    "hidden_layers": _POS_INT,
                    "hidden_units": _POS_INT,
                    "feat_unfold": _BOOL,
                    "cell_decode": _BOOL,
                    "local_ensemble": _BOOL,
                    "min_cell": _OPT_NUM,
                }
            ),
            "stage1": _obj({**_OPTIM, "native_prob": {"type": "number", "minimum": 0, "maximum": 1}}),
            "diffusion": _obj(
                {
                    "mode": {"enum": ["generate", "sr"]},
                    "T": _POS_INT,
                    "beta_start": _POS_NUM,
                    "beta_end": _POS_NUM,
                    "kind": {"enum": ["linear"]},
                    "base_channels": _POS_INT,
                    "channel_mults": {"type": "array", "items": _POS_INT, "minItems": 1},
                    "blocks_per_level": _POS_INT,
                    "cond_injection": {"enum": ["input", "blocks"]},
                    "norm_groups": _POS_INT,
                    "sample_steps": _POS_INT,
                    "eta": {"type": "number", "minimum": 0, "maximum": 1},
                    "sampler": {"enum": ["ddim", "ddpm"]},
                }
            ),
            "ldm": _obj(_OPTIM),
            "align": _obj(
                {
                    "lambda1": {"type": "number", "minimum": 0},
                    "lambda2": {"type": "number", "minimum": 0},
                    "mode": {"enum": ["random_t", "trajectory"]},
                    "recon_render_size": {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2},
                    "finetune_lr": _POS_NUM,
                    "ddim_steps": _POS_INT,
                    "steps": _POS_INT,
                    "batch_size": _POS_INT,
                    "n_coord_samples": _POS_INT,
                    "grad_clip": _OPT_NUM,
                    "log_every": _POS_INT,
                }
            ),
            "metrics": _obj(
                {
                    "eval_scales": {"type": "array", "items": _POS_NUM},
                    "bench_scales": {"type": "array", "items": _POS_NUM},
                    "repeats": _POS_INT,
                    "warmup": {"type": "integer", "minimum": 0},
                    "query_batch": _POS_INT,
                    "selfssim_sizes": {"type": "array", "items": _POS_INT, "minItems": 2, "maxItems": 2},
                    "eval_seeds": {"type": "array", "items": _INT, "minItems": 1},
                }
            ),
        },
        required=["task", "data"],
    ),
}


@dataclass
class DataConfig:
    root: str
    val_root: str | None = None
    crop_size: int = 64
    scale_range: tuple[float, float] | None = None
    n_coord_samples: int = 1024
    limit: int | None = None
    val_limit: int | None = None
    lr_side: int = 16


@dataclass
class DiffusionSection:
    mode: str = "generate"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"
    base_channels: int = 64
    channel_mults: tuple[int, ...] = (1, 2, 2)
    blocks_per_level: int = 1
    cond_injection: str = "input"
    norm_groups: int = 8
    sample_steps: int = 50
    eta: float = 0.0
    sampler: str = "ddim"

    def __post_init__(self):
        self.channel_mults = tuple(self.channel_mults)

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.T, self.beta_start, self.beta_end, self.kind)

    def denoiser(self, latent_channels: int) -> DenoiserConfig:
        return DenoiserConfig(
            latent_channels=latent_channels,
            base_channels=self.base_channels,
            channel_mults=tuple(self.channel_mults),
            blocks_per_level=self.blocks_per_level,
            cond_channels=latent_channels if self.mode == "sr" else 0,
            cond_injection=self.cond_injection,
            norm_groups=self.norm_groups,
        )


@dataclass
class MetricsSection:
    eval_scales: tuple[float, ...] = (4.0, 5.3, 7.0, 10.0, 12.0)
    bench_scales: tuple[float, ...] = (4.0, 8.0, 16.0)
    repeats: int = 3
    warmup: int = 1
    query_batch: int = 65536
    selfssim_sizes: tuple[int, int] = (128, 192)
    eval_seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        for name in ("eval_scales", "bench_scales", "selfssim_sizes", "eval_seeds"):
            setattr(self, name, tuple(getattr(self, name)))


@dataclass
class RunConfig:
    task: str
    data: DataConfig
    seed: int = 0
    output_dir: str = "runs/default"
    device: str = "cpu"
    deterministic: bool = False
    autoencoder: AutoEncoderConfig = field(default_factory=AutoEncoderConfig)
    mlp: MlpConfig = field(default_factory=MlpConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    ldm: OptimConfig = field(default_factory=lambda: OptimConfig(lr=1e-4, steps=2000, batch_size=16))
    align: AlignConfig = field(default_factory=AlignConfig)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    raw: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        """Canonical JSON-compatible snapshot (all defaults filled in)."""
        d = asdict(self)
        d.pop("raw")
        s1 = d.pop("stage1")
        d["stage1"] = {**s1["optim"], "native_prob": s1["native_prob"]}
        d["data"]["n_coord_samples"] = self.data.n_coord_samples
        return json.loads(json.dumps(d))

    @property
    def latent_side(self) -> int:
        return self.data.crop_size // self.autoencoder.factor


def validate(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        raise ConfigError(err.message, path)


def from_dict(doc: dict) -> RunConfig:
    validate(doc)
    d = copy.deepcopy(doc)
    try:
        data = DataConfig(**d["data"])
        if data.scale_range is not None:
            data.scale_range = tuple(data.scale_range)
            if data.scale_range[0] != 1.0 or data.scale_range[1] <= 1.0:
                raise ConfigError("scale_range must be [1, s_max] with s_max > 1 (interval is (1, s_max])", "data/scale_range")
        s1 = d.get("stage1", {})
        native = s1.pop("native_prob", Stage1Config().native_prob)
        stage1 = Stage1Config(
            optim=OptimConfig(**{**asdict(Stage1Config().optim), **s1}),
            n_coord_samples=data.n_coord_samples,
            native_prob=native,
        )
        cfg = RunConfig(
            task=d["task"],
            data=data,
            seed=d.get("seed", 0),
            output_dir=d.get("output_dir", "runs/default"),
            device=d.get("device", "cpu"),
            deterministic=d.get("deterministic", False),
            autoencoder=AutoEncoderConfig(**d.get("autoencoder", {})),
            mlp=MlpConfig(**d.get("mlp", {})),
            stage1=stage1,
            diffusion=DiffusionSection(**d.get("diffusion", {})),
            ldm=OptimConfig(**{**asdict(RunConfig.__dataclass_fields__["ldm"].default_factory()), **d.get("ldm", {})}),
            align=AlignConfig(**d.get("align", {})),
            metrics=MetricsSection(**d.get("metrics", {})),
            raw=doc,
        )
    except ConfigError:
        raise
    except InvalidArgumentError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.data.crop_size % cfg.autoencoder.factor:
        raise ConfigError(f"crop_size must be divisible by {cfg.autoencoder.factor}", "data/crop_size")
    if cfg.diffusion.beta_start > cfg.diffusion.beta_end or cfg.diffusion.beta_end >= 1:
        raise ConfigError("need 0 < beta_start <= beta_end < 1", "diffusion/beta_end")
    return cfg


def load(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(doc)


def write_schema(path) -> None:
    Path(path).write_text(json.dumps(RUN_CONFIG_SCHEMA, indent=2, sort_keys=True) + "\n")
