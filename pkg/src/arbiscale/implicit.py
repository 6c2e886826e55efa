"""Implicit neural decoder: a coordinate MLP over decoded latent features.

The decoder renders a latent at any resolution by querying an MLP with the
local (unfolded) feature vector, the query's offset from that feature's
center, and the target pixel's cell size, then blending the four surrounding
feature predictions by bilinear-area weights.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import coords as cg
from .errors import InvalidArgumentError, NumericError, RenderResourceError


MIN_MLP_ROWS = 64


@dataclass
class MlpConfig:
    hidden_layers: int = 4
    hidden_units: int = 256
    feat_unfold: bool = True
    cell_decode: bool = True
    local_ensemble: bool = True
    # smallest cell (in target-pixel units of [-1, 1]) seen during training;
    # smaller cells are clamped up to it when extrapolating. None disables.
    min_cell: float | None = None

    def __post_init__(self):
        if self.hidden_layers < 1 or self.hidden_units < 1:
            raise InvalidArgumentError("MLP dimensions must be positive")

    def in_dim(self, feat_channels: int) -> int:
        d = feat_channels * (9 if self.feat_unfold else 1) + 2
        return d + 2 if self.cell_decode else d


class CoordMLP(nn.Module):
    def __init__(self, in_dim: int, hidden_units: int = 256, hidden_layers: int = 4, out_dim: int = 3):
        super().__init__()
        layers = []
        last = in_dim
        for _ in range(hidden_layers):
            layers += [nn.Linear(last, hidden_units), nn.ReLU()]
            last = hidden_units
        layers.append(nn.Linear(last, out_dim))
        self.layers = nn.Sequential(*layers)

    def forward(self, x):
        return self.layers(x)


def unfold_features(fmap: torch.Tensor) -> torch.Tensor:
    """Concatenate each location's 3x3 neighborhood (replicate-padded).

    ``(B, C, H, W) -> (B, 9C, H, W)``; channel ``c * 9 + k`` holds channel ``c``
    of neighbor ``k`` in row-major order over the 3x3 window.
    """
    b, c, h, w = fmap.shape
    padded = F.pad(fmap, (1, 1, 1, 1), mode="replicate")
    return F.unfold(padded, kernel_size=3).view(b, c * 9, h, w)


def _gather(fmap: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    # fmap (B, C, H, W), index (B, N, 2) -> (B, N, C)
    b, c, h, w = fmap.shape
    flat = (index[..., 0] * w + index[..., 1]).unsqueeze(1).expand(b, c, -1)
    return torch.gather(fmap.reshape(b, c, h * w), 2, flat).transpose(1, 2)


def ensemble_weights(query: torch.Tensor, feat_h: int, feat_w: int) -> torch.Tensor:
    """Local-ensemble weights ``(N, 4)`` in :func:`coords.ensemble_neighbors` order."""
    nbrs = cg.ensemble_neighbors(query, feat_h, feat_w)
    q = query.double()
    areas = []
    for k in range(4):
        opposite = nbrs[3 - k][2]
        d = (q - opposite).abs()
        areas.append(d[:, 0] * feat_h * d[:, 1] * feat_w)
    areas = torch.stack(areas, dim=-1)
    return areas / areas.sum(dim=-1, keepdim=True)


def query_rgb(
    fmap: torch.Tensor,
    coords: torch.Tensor,
    cells: torch.Tensor | None,
    mlp: nn.Module,
    config: MlpConfig | None = None,
    unfolded: bool = False,
) -> torch.Tensor:
    """Predict RGB at continuous ``coords`` from a feature map.

    fmap: ``(B, C, h, w)``; coords, cells: ``(N, 2)`` shared by the batch or
    ``(B, N, 2)``. Returns ``(B, N, 3)``. Pass ``unfolded=True`` if ``fmap`` has
    already been through :func:`unfold_features`.
    """
    config = config or MlpConfig()
    if not torch.isfinite(fmap).all():
        raise NumericError("feature map contains non-finite values")
    if config.feat_unfold and not unfolded:
        fmap = unfold_features(fmap)
    b, _, fh, fw = fmap.shape
    if coords.ndim == 2:
        coords = coords.unsqueeze(0).expand(b, -1, -1)
    if cells is not None and cells.ndim == 2:
        cells = cells.unsqueeze(0).expand(b, -1, -1)
    if cells is not None and cells.shape[:2] != coords.shape[:2]:
        raise InvalidArgumentError("coords and cells must have the same number of queries")
    n = coords.shape[1]
    q = coords.reshape(-1, 2)
    scale = torch.tensor([fh, fw], dtype=fmap.dtype, device=fmap.device)

    cell_in = None
    if config.cell_decode:
        if cells is None:
            raise InvalidArgumentError("cell decoding is enabled but no cells were given")
        c = cells.reshape(-1, 2).to(fmap.dtype)
        if config.min_cell is not None:
            c = c.clamp(min=config.min_cell)
        cell_in = c * scale

    if config.local_ensemble:
        nbrs = cg.ensemble_neighbors(q, fh, fw)
        weights = ensemble_weights(q, fh, fw).to(fmap.dtype)
    else:
        idx, center = cg.nearest_feature_index(q, fh, fw)
        nbrs = [(idx, center, None)]
        weights = torch.ones(q.shape[0], 1, dtype=fmap.dtype, device=fmap.device)

    out = 0
    for k, (idx, center, _) in enumerate(nbrs):
        feat = _gather(fmap, idx.view(b, n, 2)).reshape(b * n, -1)
        rel = cg.relative_coord(q.to(fmap.dtype), center.to(fmap.dtype), fh, fw)
        parts = [feat, rel] if cell_in is None else [feat, rel, cell_in]
        pred = mlp(torch.cat(parts, dim=-1))
        out = out + pred * weights[:, k : k + 1]
    return out.view(b, n, -1)


class ImplicitDecoder(nn.Module):
    """``ND(z, c) = f(D(z), c)``: feature decoder followed by the coordinate MLP.

    ``feature_decoder`` may be ``None`` for the MLP-only ablation, in which case
    the MLP reads the latent directly.
    """

    def __init__(self, feature_decoder: nn.Module | None, feat_channels: int, config: MlpConfig | None = None):
        super().__init__()
        self.config = config or MlpConfig()
        self.feature_decoder = feature_decoder
        self.mlp = CoordMLP(
            self.config.in_dim(feat_channels), self.config.hidden_units, self.config.hidden_layers
        )

    def features(self, z: torch.Tensor) -> torch.Tensor:
        f = z if self.feature_decoder is None else self.feature_decoder(z)
        return unfold_features(f) if self.config.feat_unfold else f

    def query(self, feats: torch.Tensor, coords: torch.Tensor, cells: torch.Tensor | None) -> torch.Tensor:
        return query_rgb(feats, coords, cells, self.mlp, self.config, unfolded=True)

    def forward(self, z, coords, cells):
        return self.query(self.features(z), coords, cells)

    def render(self, z: torch.Tensor, out_h: int, out_w: int, query_batch: int = 65536) -> torch.Tensor:
        """Render latents ``(B, c, h, w)`` to images ``(B, 3, out_h, out_w)``.

        Queries are evaluated in chunks of ``query_batch`` pixels; the result
        does not depend on the chunk size.
        """
        if query_batch < 1:
            raise InvalidArgumentError("query_batch must be >= 1")
        grid = cg.make_coord_grid(out_h, out_w, dtype=z.dtype).to(z.device)
        cell = cg.make_cell(out_h, out_w, 1, dtype=z.dtype).to(z.device)
        try:
            feats = self.features(z)
            chunks = []
            for start in range(0, grid.shape[0], query_batch):
                g = grid[start : start + query_batch]
                n = g.shape[0]
                # BLAS picks different kernels for very short matrices, which
                # changes the last bits; padding short chunks keeps the output
                # independent of query_batch
                pad = max(0, -(-MIN_MLP_ROWS // z.shape[0]) - n)
                if pad:
                    g = torch.cat([g, g[-1:].expand(pad, 2)])
                chunks.append(self.query(feats, g, cell.expand(g.shape[0], 2))[:, :n])
            rgb = torch.cat(chunks, dim=1)
        except (MemoryError, RuntimeError) as exc:
            if isinstance(exc, MemoryError) or "out of memory" in str(exc).lower():
                raise RenderResourceError(query_batch) from exc
            raise
        return rgb.transpose(1, 2).reshape(z.shape[0], -1, out_h, out_w)
