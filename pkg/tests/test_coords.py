import itertools

import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from arbiscale import coords as cg
from arbiscale.errors import InvalidArgumentError


def test_grid_2x2():
    g = cg.make_coord_grid(2, 2, dtype=torch.float64)
    assert g.tolist() == [[-0.5, -0.5], [-0.5, 0.5], [0.5, -0.5], [0.5, 0.5]]


def test_grid_1x1_is_origin():
    assert cg.make_coord_grid(1, 1).tolist() == [[0.0, 0.0]]


def test_grid_4x2_rows():
    g = cg.make_coord_grid(4, 2, dtype=torch.float64)
    assert sorted(set(g[:, 0].tolist())) == [-0.75, -0.25, 0.25, 0.75]
    assert sorted(set(g[:, 1].tolist())) == [-0.5, 0.5]


@pytest.mark.parametrize("h,w", [(0, 3), (3, 0), (-1, 2)])
def test_grid_rejects_bad_dims(h, w):
    with pytest.raises(InvalidArgumentError):
        cg.make_coord_grid(h, w)
    with pytest.raises(InvalidArgumentError):
        cg.make_cell(h, w, 1)


@given(st.integers(1, 40), st.integers(1, 40))
def test_grid_properties(h, w):
    g = cg.make_coord_grid(h, w, dtype=torch.float64).view(h, w, 2)
    rows, cols = g[:, 0, 0], g[0, :, 1]
    for axis, n in ((rows, h), (cols, w)):
        assert torch.all(axis.abs() < 1)
        assert torch.allclose(axis, -axis.flip(0), atol=1e-15)
        if n > 1:
            assert torch.allclose(axis[1:] - axis[:-1], torch.full((n - 1,), 2.0 / n, dtype=torch.float64))
        i = torch.arange(n, dtype=torch.float64)
        assert torch.allclose(axis, -1 + (2 * i + 1) / n, atol=0, rtol=0)


def test_cell_examples():
    assert torch.all(cg.make_cell(128, 128, 7) == 0.015625)
    assert cg.make_cell(2, 4, 3).tolist() == [[1.0, 0.5]] * 3
    assert cg.make_cell(1, 1, 1).tolist() == [[2.0, 2.0]]


@given(st.integers(1, 300), st.integers(1, 300))
def test_cell_times_dims_is_two(h, w):
    # 2/n is not exactly representable for every n (e.g. 49), so "exactly"
    # means within one ulp of 2
    c = cg.make_cell(h, w, 2, dtype=torch.float64)
    ulp = 2 * torch.finfo(torch.float64).eps
    assert torch.all((c[:, 0] * h - 2.0).abs() <= ulp) and torch.all((c[:, 1] * w - 2.0).abs() <= ulp)
    assert c[0, 0].item() == 2.0 / h


def test_nearest_tie_breaks_to_lower_index():
    idx, center = cg.nearest_feature_index(torch.tensor([[0.0, 0.0]]), 2, 2)
    assert idx.tolist() == [[0, 0]]
    assert center.tolist() == [[-0.5, -0.5]]


def test_nearest_examples_and_clamp():
    q = torch.tensor([[-0.9, -0.9]])
    idx, center = cg.nearest_feature_index(q, 2, 2)
    assert idx.tolist() == [[0, 0]] and center.tolist() == [[-0.5, -0.5]]
    idx, _ = cg.nearest_feature_index(q, 2, 2, shift=(-1, -1))
    assert idx.tolist() == [[0, 0]]
    idx, _ = cg.nearest_feature_index(torch.tensor([[0.9, 0.9]]), 2, 2, shift=(1, 1))
    assert idx.tolist() == [[1, 1]]


@given(
    st.integers(1, 8),
    st.integers(1, 8),
    st.lists(st.tuples(st.floats(-0.999, 0.999), st.floats(-0.999, 0.999)), min_size=1, max_size=20),
)
def test_nearest_minimizes_distance_brute_force(fh, fw, pts):
    q = torch.tensor(pts, dtype=torch.float64)
    idx, center = cg.nearest_feature_index(q, fh, fw)
    for k, (r, c) in enumerate(pts):
        best = min(
            (((r - (-1 + (2 * i + 1) / fh)) ** 2 + (c - (-1 + (2 * j + 1) / fw)) ** 2), i, j)
            for i, j in itertools.product(range(fh), range(fw))
        )
        got = (r - center[k, 0].item()) ** 2 + (c - center[k, 1].item()) ** 2
        assert got <= best[0] + 1e-12


def test_relative_coord_examples():
    q = torch.tensor([[0.3, -0.2]])
    assert cg.relative_coord(q, q.clone(), 5, 7).tolist() == [[0.0, 0.0]]
    center = torch.tensor([[0.0, 0.0]], dtype=torch.float64)
    q = torch.tensor([[0.0, 2.0 / 16]], dtype=torch.float64)
    assert cg.relative_coord(q, center, 8, 8).tolist() == [[0.0, 1.0]]
    q = torch.tensor([[1 / 8, -1 / 8]], dtype=torch.float64)
    assert cg.relative_coord(q, center, 4, 4).tolist() == [[0.5, -0.5]]


def test_relative_coord_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        cg.relative_coord(torch.zeros(3, 2), torch.zeros(2, 2), 4, 4)


@given(st.integers(1, 64), st.integers(1, 64), st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_relative_coord_resolution_invariant(fh, fw, fr, fc):
    # a query at a fixed fractional position inside cell (0, 0) has the same
    # scaled offset whatever the grid resolution
    q = torch.tensor([[-1 + 2 * fr / fh, -1 + 2 * fc / fw]], dtype=torch.float64)
    idx, center = cg.nearest_feature_index(q, fh, fw)
    rel = cg.relative_coord(q, center, fh, fw)
    expect = torch.tensor([[2 * fr - 1, 2 * fc - 1]], dtype=torch.float64)
    assert torch.allclose(rel, expect, atol=1e-9)


@given(
    st.integers(1, 8),
    st.integers(1, 8),
    st.lists(st.tuples(st.floats(-0.999, 0.999), st.floats(-0.999, 0.999)), min_size=1, max_size=16),
)
def test_ensemble_relative_coords_bounded(fh, fw, pts):
    q = torch.tensor(pts, dtype=torch.float64)
    for idx, center, raw in cg.ensemble_neighbors(q, fh, fw):
        rel = cg.relative_coord(q, center, fh, fw)
        assert torch.all(rel.abs() <= 2 + 1e-9)
        assert torch.all((idx[:, 0] >= 0) & (idx[:, 0] < fh) & (idx[:, 1] >= 0) & (idx[:, 1] < fw))
