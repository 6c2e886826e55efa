"""Independent reference implementations shared by the unit and acceptance tests."""
import numpy as np
import torch

from arbiscale import diffusion as dm
from arbiscale.implicit import MlpConfig


class OracleDenoiser(torch.nn.Module):
    """Returns the noise implied by a known clean latent."""

    def __init__(self, z0, schedule):
        super().__init__()
        self.z0, self.schedule = z0, schedule

    def forward(self, z_t, t, cond=None):
        return dm.implied_eps(z_t, int(t[0]), self.z0, self.schedule)


def _center(i, n):
    return -1.0 + (2 * i + 1) / n


def oracle_query(fmap: np.ndarray, q, cell, mlp, cfg: MlpConfig):
    """Straight-line reference for one query on one (C, H, W) feature map."""
    c, h, w = fmap.shape
    if cfg.feat_unfold:
        padded = np.pad(fmap, ((0, 0), (1, 1), (1, 1)), mode="edge")
        unf = np.zeros((c * 9, h, w))
        for ch in range(c):
            for k in range(9):
                di, dj = divmod(k, 3)
                unf[ch * 9 + k] = padded[ch, di : di + h, dj : dj + w]
        fmap = unf

    def lo_index(x, n):
        # largest (possibly -1) index whose center is at or below x
        best = -1
        for i in range(-1, n + 1):
            if _center(i, n) <= x:
                best = i
        return best

    if cfg.local_ensemble:
        li, lj = lo_index(q[0], h), lo_index(q[1], w)
        corners = [(li + a, lj + b) for a in (0, 1) for b in (0, 1)]
    else:
        dists = [((q[0] - _center(i, h)) ** 2 + (q[1] - _center(j, w)) ** 2, i, j) for i in range(h) for j in range(w)]
        _, i0, j0 = min(dists)
        corners = [(i0, j0)]
    preds, areas = [], []
    for ri, rj in corners:
        ci, cj = min(max(ri, 0), h - 1), min(max(rj, 0), w - 1)
        rel = [(q[0] - _center(ci, h)) * h, (q[1] - _center(cj, w)) * w]
        x = list(fmap[:, ci, cj]) + rel
        if cfg.cell_decode:
            x += [cell[0] * h, cell[1] * w]
        with torch.no_grad():
            preds.append(mlp(torch.tensor(x, dtype=torch.float64)).numpy())
    if not cfg.local_ensemble:
        return preds[0]
    for k, (ri, rj) in enumerate(corners):
        oi, oj = corners[3 - k]
        areas.append(abs(q[0] - _center(oi, h)) * h * abs(q[1] - _center(oj, w)) * w)
    total = sum(areas)
    return sum(p * a / total for p, a in zip(preds, areas))
