"""Image ingestion, LR/HR pair synthesis and coordinate-RGB sampling.

Images are float tensors ``(3, H, W)`` in [-1, 1]; batches add a leading dim.
"""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from . import coords as cg
from .errors import InvalidArgumentError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
MIN_LR_SIDE = 8


@dataclass
class DatasetSpec:
    root: str
    crop_size: int = 64
    scale_range: tuple[float, float] = (1.0, 4.0)
    n_coord_samples: int = 1024
    split: str = "train"
    seed: int = 0

    def __post_init__(self):
        self.scale_range = tuple(float(s) for s in self.scale_range)
        lo, hi = self.scale_range
        if lo != 1.0 or hi <= 1.0:
            raise InvalidArgumentError(f"scale_range must be (1, s_max] with s_max > 1, got {self.scale_range}")
        if self.split not in ("train", "val"):
            raise InvalidArgumentError(f"unknown split {self.split!r}")
        if self.crop_size < 1 or self.n_coord_samples < 1:
            raise InvalidArgumentError("crop_size and n_coord_samples must be positive")


@dataclass
class TrainSample:
    lr_image: torch.Tensor
    gt_coords: torch.Tensor
    gt_cells: torch.Tensor
    gt_rgb: torch.Tensor
    scale: float
    gt_index: torch.Tensor = field(default=None, repr=False)


def to_tensor(img: Image.Image) -> torch.Tensor:
    arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr).permute(2, 0, 1) / 127.5 - 1.0


def to_uint8(image: torch.Tensor) -> np.ndarray:
    """Map [-1, 1] to 8-bit by ``(v + 1) * 127.5``, rounding half away from zero."""
    v = (image.detach().double().clamp(-1, 1) + 1.0) * 127.5
    v = torch.floor(v + 0.5)  # values are non-negative, so this is half-away-from-zero
    return v.clamp(0, 255).to(torch.uint8).permute(1, 2, 0).cpu().numpy()


def save_png(image: torch.Tensor, path) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_image(path) -> torch.Tensor:
    with Image.open(path) as img:
        return to_tensor(img)


def list_images(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise InvalidArgumentError(f"dataset root {root} does not exist")
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def load_images(spec: DatasetSpec) -> Iterator[torch.Tensor]:
    """Decode every readable image under ``spec.root`` in a seed-determined order.

    Unreadable files are skipped with a warning; a dataset with no readable
    image raises :class:`InvalidArgumentError`.
    """
    paths = list_images(spec.root)
    order = np.random.default_rng(spec.seed).permutation(len(paths))
    yielded = 0
    for i in order:
        try:
            img = read_image(paths[i])
        except Exception as exc:  # PIL raises a zoo of types for corrupt data
            warnings.warn(f"skipping unreadable image {paths[i]}: {exc}")
            continue
        yielded += 1
        yield img
    if yielded == 0:
        raise InvalidArgumentError(f"no readable images under {spec.root}")


def resize(image: torch.Tensor, height: int, width: int, mode: str = "bicubic") -> torch.Tensor:
    """Antialiased resize of ``(3, H, W)`` or ``(B, 3, H, W)``."""
    squeeze = image.ndim == 3
    x = image.unsqueeze(0) if squeeze else image
    if x.shape[-2:] == (height, width):
        out = x
    else:
        antialias = height < x.shape[-2] or width < x.shape[-1]
        out = F.interpolate(x, size=(height, width), mode=mode, align_corners=False, antialias=antialias)
    return out[0] if squeeze else out


def sample_scale(rng: np.random.Generator, scale_range) -> float:
    """Uniform draw from the half-open interval (1, s_max]."""
    s_max = float(scale_range[1])
    return float(s_max - rng.random() * (s_max - 1.0))


def crop(image: torch.Tensor, size: int, rng: np.random.Generator | None, split: str = "train") -> torch.Tensor:
    _, h, w = image.shape
    if h < size or w < size:
        image = resize(image, max(size, h), max(size, w))
        _, h, w = image.shape
    if split == "train" and rng is not None:
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
    else:
        top, left = (h - size) // 2, (w - size) // 2
    return image[:, top : top + size, left : left + size]


def sample_pixels(image: torch.Tensor, n: int, rng: np.random.Generator):
    """Gather ``n`` random pixels: returns (flat index, coords, cells, rgb)."""
    _, h, w = image.shape
    n = min(n, h * w)
    idx = torch.from_numpy(rng.choice(h * w, size=n, replace=False)).long()
    coords = cg.make_coord_grid(h, w)[idx]
    cells = cg.make_cell(h, w, n)
    rgb = image.reshape(3, -1)[:, idx].t().contiguous()
    return idx, coords, cells, rgb


def make_pair(
    hr_crop: torch.Tensor,
    scale: float,
    n_coord_samples: int,
    rng: np.random.Generator,
    s_max: float | None = None,
) -> TrainSample:
    """Bicubic-downsample ``hr_crop`` by ``scale`` and sample GT pixels from it."""
    if not scale > 1.0 or (s_max is not None and scale > s_max):
        raise InvalidArgumentError(f"scale {scale} outside (1, {s_max}]")
    _, h, w = hr_crop.shape
    lr_h, lr_w = round(h / scale), round(w / scale)
    if min(lr_h, lr_w) < MIN_LR_SIDE:
        raise InvalidArgumentError(f"LR side {min(lr_h, lr_w)} < {MIN_LR_SIDE} for scale {scale}")
    lr = resize(hr_crop, lr_h, lr_w)
    idx, coords, cells, rgb = sample_pixels(hr_crop, n_coord_samples, rng)
    return TrainSample(lr, coords, cells, rgb, float(scale), idx)


class ImageFolder:
    """In-memory image set with deterministic crop / pair streams."""

    def __init__(self, spec: DatasetSpec, limit: int | None = None):
        self.spec = spec
        self.images = []
        for img in load_images(spec):
            self.images.append(img)
            if limit is not None and len(self.images) >= limit:
                break

    def __len__(self):
        return len(self.images)

    def crops(self, rng: np.random.Generator, batch: int) -> torch.Tensor:
        idx = rng.integers(0, len(self.images), size=batch)
        return torch.stack([crop(self.images[i], self.spec.crop_size, rng, self.spec.split) for i in idx])

    def center_crops(self) -> torch.Tensor:
        return torch.stack([crop(img, self.spec.crop_size, None, "val") for img in self.images])


def worker_rng(seed: int, worker: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, worker])


# --- procedural toy images -------------------------------------------------


TOY_VERSION = 2
TOY_SUPERSAMPLE = 4


def _toy_params(rng: np.random.Generator) -> dict:
    blobs = []
    for _ in range(int(rng.integers(1, 4))):
        blobs.append(
            {
                "center": rng.uniform(-0.6, 0.6, size=2),
                "radii": rng.uniform(0.15, 0.45, size=2),
                "rot": rng.uniform(0, math.pi),
                "color": rng.uniform(-1, 1, size=3),
                # striped texture: amplitude 0 for flat shapes
                "stripe_amp": rng.uniform(0.2, 0.4) if rng.random() < 0.5 else 0.0,
                "stripe_freq": rng.uniform(2.0, 5.0),
                "stripe_dir": rng.uniform(0, math.pi),
                "stripe_phase": rng.uniform(0, 2 * math.pi),
            }
        )
    return {"bg": rng.uniform(-0.8, 0.8, size=(2, 3)), "angle": rng.uniform(0, 2 * math.pi), "blobs": blobs}


def _toy_field(params: dict, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Evaluate the procedural image at continuous positions ``(y, x)``."""
    bg = torch.tensor(params["bg"], dtype=torch.float64)
    a = params["angle"]
    u = (math.cos(a) * x + math.sin(a) * y + 1.5) / 3.0
    img = bg[0].view(3, 1, 1) * (1 - u) + bg[1].view(3, 1, 1) * u
    for b in params["blobs"]:
        (cy, cx), (rx, ry), rot = b["center"], b["radii"], b["rot"]
        dx, dy = x - cx, y - cy
        xr = math.cos(rot) * dx + math.sin(rot) * dy
        yr = -math.sin(rot) * dx + math.cos(rot) * dy
        inside = ((xr / rx) ** 2 + (yr / ry) ** 2 <= 1.0).to(torch.float64)
        color = torch.tensor(b["color"], dtype=torch.float64).view(3, 1, 1)
        if b["stripe_amp"]:
            w = math.cos(b["stripe_dir"]) * x + math.sin(b["stripe_dir"]) * y
            color = color + b["stripe_amp"] * torch.sin(2 * math.pi * b["stripe_freq"] * w + b["stripe_phase"])
        img = img * (1 - inside) + color * inside
    return img


def toy_image(params: dict, size: int) -> torch.Tensor:
    """Render a procedural image (gradient background, hard-edged ellipses,
    some with stripes) at ``size``.

    Each pixel is the box average of ``TOY_SUPERSAMPLE**2`` point samples of a
    continuous field, so renders at different sizes are consistent with each
    other up to the box filter.
    """
    ss = TOY_SUPERSAMPLE
    c = cg.axis_centers(size * ss).double()
    y, x = torch.meshgrid(c, c, indexing="ij")
    img = _toy_field(params, y, x)
    img = F.avg_pool2d(img[None], ss)[0]
    return img.clamp(-1, 1).float()


def write_toy_dataset(root, n: int, size: int, seed: int = 0) -> list[Path]:
    """Write ``n`` procedural PNGs of side ``size`` under ``root``; returns paths."""
    root = Path(root)
    os.makedirs(root, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        p = root / f"toy_{i:05d}.png"
        params = _toy_params(rng)
        if not p.exists():
            tmp = p.with_name(f".{p.name}.{os.getpid()}.tmp")
            Image.fromarray(to_uint8(toy_image(params, size))).save(tmp, format="PNG")
            os.replace(tmp, p)  # concurrent writers produce identical bytes
        paths.append(p)
    return paths


TOY_SCHEME = "toy:"


def cache_dir() -> Path:
    """Dataset cache root: ``$ARBISCALE_CACHE`` or ``~/.cache/arbiscale``."""
    return Path(os.environ.get("ARBISCALE_CACHE", Path.home() / ".cache" / "arbiscale"))


def resolve_root(root: str) -> str:
    """Map a dataset root to a directory, materializing procedural sets.

    ``toy:n=500,size=64,seed=0`` names a procedural set that is written once
    under :func:`cache_dir` and reused afterwards. Other roots pass through.
    """
    if not root.startswith(TOY_SCHEME):
        return root
    opts = {"n": 100, "size": 64, "seed": 0}
    body = root[len(TOY_SCHEME) :]
    for item in filter(None, body.split(",")):
        key, sep, val = item.partition("=")
        if not sep or key not in opts:
            raise InvalidArgumentError(f"bad toy dataset option {item!r} in {root!r}")
        try:
            opts[key] = int(val)
        except ValueError as exc:
            raise InvalidArgumentError(f"toy dataset option {key} must be an integer") from exc
    if opts["n"] < 1 or opts["size"] < MIN_LR_SIDE:
        raise InvalidArgumentError(f"toy dataset needs n >= 1 and size >= {MIN_LR_SIDE}")
    path = cache_dir() / f"toy{TOY_VERSION}_n{opts['n']}_size{opts['size']}_seed{opts['seed']}"
    write_toy_dataset(path, opts["n"], opts["size"], opts["seed"])
    return str(path)

