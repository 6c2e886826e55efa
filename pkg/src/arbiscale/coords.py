"""Coordinate grids, cell sizes and relative coordinates for implicit decoding.

All coordinates live in [-1, 1] and refer to pixel (or feature) cell centers:
on an axis with ``n`` cells, cell ``i`` is centered at ``-1 + (2i + 1) / n``.
Pairs are ordered (row, col).
"""
from __future__ import annotations

from typing import Sequence

import torch

from .errors import InvalidArgumentError


def _check_dims(*dims: int) -> None:
    for d in dims:
        if int(d) != d or d < 1:
            raise InvalidArgumentError(f"dimensions must be positive integers, got {dims}")


def axis_centers(n: int, dtype=torch.float64) -> torch.Tensor:
    _check_dims(n)
    return -1.0 + (2.0 * torch.arange(n, dtype=dtype) + 1.0) / n


def make_coord_grid(height: int, width: int, dtype=torch.float32) -> torch.Tensor:
    """Return the ``(height * width, 2)`` cell-center grid, row-major over (row, col)."""
    _check_dims(height, width)
    rows = axis_centers(height, torch.float64)
    cols = axis_centers(width, torch.float64)
    grid = torch.stack(torch.meshgrid(rows, cols, indexing="ij"), dim=-1)
    return grid.reshape(-1, 2).to(dtype)


def make_cell(height: int, width: int, n_queries: int, dtype=torch.float32) -> torch.Tensor:
    """Per-query cell size ``(2 / height, 2 / width)`` of the target resolution."""
    _check_dims(height, width, n_queries)
    cell = torch.tensor([2.0 / height, 2.0 / width], dtype=torch.float64)
    return cell.expand(n_queries, 2).to(dtype).clone()


def _nearest_axis(q: torch.Tensor, n: int) -> torch.Tensor:
    # ceil(..) - 1 resolves exact midpoints between two centers to the lower index
    return torch.ceil((q.double() + 1.0) * n / 2.0).long() - 1


def nearest_feature_index(
    query: torch.Tensor,
    feat_h: int,
    feat_w: int,
    shift: Sequence[int] | torch.Tensor = (0, 0),
) -> tuple[torch.Tensor, torch.Tensor]:
    """Index of the nearest feature-cell center, offset by ``shift`` cells.

    ``shift`` is a (row, col) pair or an ``(N, 2)`` integer tensor of per-query
    shifts. Indices are clamped to the grid. Returns ``(index, center)`` where
    ``index`` is ``(N, 2)`` long and ``center`` has the query's dtype.
    """
    _check_dims(feat_h, feat_w)
    shift = torch.as_tensor(shift, dtype=torch.long)
    i = _nearest_axis(query[:, 0], feat_h) + shift[..., 0]
    j = _nearest_axis(query[:, 1], feat_w) + shift[..., 1]
    i = i.clamp(0, feat_h - 1)
    j = j.clamp(0, feat_w - 1)
    index = torch.stack([i, j], dim=-1)
    return index, index_to_center(index, feat_h, feat_w).to(query.dtype)


def index_to_center(index: torch.Tensor, feat_h: int, feat_w: int) -> torch.Tensor:
    """Center coordinates of (possibly out-of-grid) integer cell indices, float64."""
    idx = index.double()
    return torch.stack(
        [-1.0 + (2.0 * idx[:, 0] + 1.0) / feat_h, -1.0 + (2.0 * idx[:, 1] + 1.0) / feat_w],
        dim=-1,
    )


def relative_coord(query: torch.Tensor, center: torch.Tensor, feat_h: int, feat_w: int) -> torch.Tensor:
    """Offset from ``center`` to ``query`` measured in half feature cells.

    A query sitting on a cell boundary gets offset +-1 along that axis.
    """
    if query.shape != center.shape or query.ndim != 2 or query.shape[-1] != 2:
        raise InvalidArgumentError(
            f"query and center must both be (N, 2); got {tuple(query.shape)} and {tuple(center.shape)}"
        )
    _check_dims(feat_h, feat_w)
    rel = query - center
    scale = torch.tensor([feat_h, feat_w], dtype=rel.dtype, device=rel.device)
    return rel * scale


def ensemble_neighbors(query: torch.Tensor, feat_h: int, feat_w: int):
    """The four feature centers surrounding each query, for local ensembling.

    Per axis the pair is (last center at or below the query, next center).
    Yields ``(index, center, raw_center)`` for the four (row, col) combinations
    in order (lo, lo), (lo, hi), (hi, lo), (hi, hi). ``index``/``center`` are
    clamped to the grid; ``raw_center`` is the unclamped center in float64,
    which is what the ensemble weights are computed from.
    """
    nearest, _ = nearest_feature_index(query, feat_h, feat_w)
    near_c = index_to_center(nearest, feat_h, feat_w)
    lo_shift = torch.where(query.double() >= near_c, 0, -1).long()
    out = []
    for di in (0, 1):
        for dj in (0, 1):
            raw = torch.stack(
                [
                    _nearest_axis(query[:, 0], feat_h) + lo_shift[:, 0] + di,
                    _nearest_axis(query[:, 1], feat_w) + lo_shift[:, 1] + dj,
                ],
                dim=-1,
            )
            clamped = torch.stack(
                [raw[:, 0].clamp(0, feat_h - 1), raw[:, 1].clamp(0, feat_w - 1)], dim=-1
            )
            out.append(
                (
                    clamped,
                    index_to_center(clamped, feat_h, feat_w).to(query.dtype),
                    index_to_center(raw, feat_h, feat_w),
                )
            )
    return out
