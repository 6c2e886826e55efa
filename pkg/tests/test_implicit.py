
import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from arbiscale import coords as cg
from arbiscale.errors import InvalidArgumentError, NumericError
from arbiscale.implicit import CoordMLP, ImplicitDecoder, MlpConfig, ensemble_weights, query_rgb, unfold_features
from oracles import oracle_query


@pytest.mark.parametrize(
    "flags",
    [
        dict(feat_unfold=True, cell_decode=True, local_ensemble=True),
        dict(feat_unfold=False, cell_decode=True, local_ensemble=True),
        dict(feat_unfold=True, cell_decode=False, local_ensemble=False),
    ],
)
def test_query_rgb_matches_brute_force(flags):
    g = torch.Generator().manual_seed(1)
    for fh, fw in [(1, 1), (2, 3), (5, 4), (8, 8)]:
        cfg = MlpConfig(hidden_layers=2, hidden_units=16, **flags)
        c = 3
        mlp = CoordMLP(cfg.in_dim(c), 16, 2).double()
        fmap = torch.randn(1, c, fh, fw, generator=g, dtype=torch.float64)
        q = torch.rand(25, 2, generator=g, dtype=torch.float64) * 1.998 - 0.999
        cells = torch.rand(25, 2, generator=g, dtype=torch.float64) * 0.3 + 0.01
        got = query_rgb(fmap, q, cells, mlp, cfg)[0]
        for k in range(25):
            ref = oracle_query(fmap[0].numpy(), q[k].tolist(), cells[k].tolist(), mlp, cfg)
            assert np.allclose(got[k].detach().numpy(), ref, atol=1e-6, rtol=0)


def test_unfold_shapes_and_padding():
    f = torch.randn(2, 64, 5, 6)
    assert unfold_features(f).shape == (2, 576, 5, 6)
    const = torch.full((1, 4, 3, 3), 0.7)
    assert torch.all(unfold_features(const) == 0.7)
    one = torch.randn(1, 5, 1, 1)
    u = unfold_features(one).view(5, 9)
    assert torch.all(u == one.view(5, 1))


@given(
    st.integers(1, 8),
    st.integers(1, 8),
    st.lists(st.tuples(st.floats(-1.0, 1.0), st.floats(-1.0, 1.0)), min_size=1, max_size=30),
)
def test_ensemble_weights_partition_of_unity(fh, fw, pts):
    w = ensemble_weights(torch.tensor(pts, dtype=torch.float64), fh, fw)
    assert torch.all(w >= 0)
    assert torch.allclose(w.sum(-1), torch.ones(len(pts), dtype=torch.float64), atol=1e-6)


class _IgnoreCoords(torch.nn.Module):
    def __init__(self, c):
        super().__init__()
        self.c = c

    def forward(self, x):
        return x[:, : self.c].sum(-1, keepdim=True).expand(-1, 3)


def test_constant_fmap_coordinate_blind_mlp_is_constant():
    cfg = MlpConfig()
    fmap = torch.full((1, 2, 4, 4), 0.3)
    q = torch.rand(50, 2) * 2 - 1
    out = query_rgb(fmap, q, torch.full((50, 2), 0.1), _IgnoreCoords(18), cfg)
    assert torch.allclose(out, out[:, :1].expand_as(out), atol=1e-6)


def test_non_finite_fmap_raises():
    fmap = torch.zeros(1, 2, 3, 3)
    fmap[0, 0, 1, 1] = float("nan")
    mlp = CoordMLP(MlpConfig().in_dim(2), 8, 1)
    with pytest.raises(NumericError):
        query_rgb(fmap, torch.zeros(1, 2), torch.ones(1, 2), mlp, MlpConfig())


def test_cell_count_mismatch_raises():
    mlp = CoordMLP(MlpConfig().in_dim(2), 8, 1)
    with pytest.raises(InvalidArgumentError):
        query_rgb(torch.zeros(1, 2, 3, 3), torch.zeros(4, 2), torch.ones(3, 2), mlp, MlpConfig())


def test_min_cell_clamps_small_cells():
    cfg = MlpConfig(hidden_layers=1, hidden_units=8, min_cell=0.1)
    mlp = CoordMLP(cfg.in_dim(2), 8, 1)
    fmap = torch.randn(1, 2, 4, 4)
    q = torch.rand(10, 2) * 2 - 1
    a = query_rgb(fmap, q, torch.full((10, 2), 0.01), mlp, cfg)
    b = query_rgb(fmap, q, torch.full((10, 2), 0.1), mlp, cfg)
    assert torch.equal(a, b)


def test_render_chunking_invariance():
    dec = ImplicitDecoder(None, 4, MlpConfig(hidden_units=32, hidden_layers=2))
    z = torch.randn(2, 4, 6, 6)
    with torch.no_grad():
        a = dec.render(z, 37, 29, query_batch=1024)
        b = dec.render(z, 37, 29, query_batch=65536)
        c = dec.render(z, 37, 29, query_batch=7)
    assert a.shape == (2, 3, 37, 29)
    assert torch.equal(a, b) and torch.equal(a, c)


def test_render_equals_query_over_grid():
    dec = ImplicitDecoder(None, 3, MlpConfig(hidden_units=16, hidden_layers=2))
    z = torch.randn(1, 3, 5, 5)
    with torch.no_grad():
        img = dec.render(z, 9, 11)
        grid = cg.make_coord_grid(9, 11)
        q = dec(z, grid, cg.make_cell(9, 11, grid.shape[0]))
    assert torch.allclose(img, q.transpose(1, 2).reshape(1, 3, 9, 11), atol=0)


def test_render_rejects_bad_query_batch():
    dec = ImplicitDecoder(None, 3, MlpConfig(hidden_units=8, hidden_layers=1))
    with pytest.raises(InvalidArgumentError):
        dec.render(torch.zeros(1, 3, 2, 2), 4, 4, query_batch=0)


def test_translation_consistency_on_periodic_features():
    # a feature map that is periodic with period one cell along columns:
    # shifting interior queries by one feature cell must not change the output
    cfg = MlpConfig(hidden_units=16, hidden_layers=2)
    mlp = CoordMLP(cfg.in_dim(2), 16, 2).double()
    col = torch.randn(2, 6, 1, dtype=torch.float64)
    fmap = col.expand(2, 6, 8).unsqueeze(0).contiguous()
    q = torch.stack([torch.rand(40, dtype=torch.float64) * 0.5 - 0.25, torch.rand(40, dtype=torch.float64) * 0.5 - 0.25], -1)
    shifted = q + torch.tensor([0.0, 2.0 / 8], dtype=torch.float64)
    cells = torch.full((40, 2), 0.05, dtype=torch.float64)
    a = query_rgb(fmap, q, cells, mlp, cfg)
    b = query_rgb(fmap, shifted, cells, mlp, cfg)
    assert torch.allclose(a, b, atol=1e-12)


def test_mlp_defaults():
    cfg = MlpConfig()
    assert (cfg.hidden_layers, cfg.hidden_units) == (4, 256)
    assert cfg.in_dim(64) == 64 * 9 + 4
    mlp = CoordMLP(cfg.in_dim(64))
    linears = [m for m in mlp.modules() if isinstance(m, torch.nn.Linear)]
    assert len(linears) == 5 and all(l.out_features == 256 for l in linears[:-1])
    assert linears[-1].out_features == 3
    assert torch.isfinite(linears[0].weight.detach()).all()
