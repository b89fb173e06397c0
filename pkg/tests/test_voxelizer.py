import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvaf import voxelizer as V
from mvaf.autodiff import Tensor
from mvaf.autodiff.gradcheck import check_gradients


def random_cloud(rng, n):
    return np.column_stack([
        rng.uniform(-5, 75, n), rng.uniform(-45, 45, n), rng.uniform(-2, 4, n), rng.uniform(0, 1, n),
    ])


def test_full_grid_dims():
    assert V.bev_spec().dims == (400, 352)
    assert V.rv_spec().dims == (80, 1280)


def test_crop_examples():
    spec = V.bev_spec()
    idx, kept = V.crop_points(np.array([[35.0, 0, 0, 0], [-1.0, 0, 0, 0], [35.0, 0, 5.0, 0]]), spec)
    assert idx.tolist() == [0] and kept.tolist() == [[35.0, 0, 0, 0]]
    idx, _ = V.crop_points(np.array([[-3.0, 0, 0, 0], [100.0, 0, 0, 0]]), spec)
    assert len(idx) == 0


def test_crop_half_open_and_order():
    spec = V.bev_spec()
    pts = np.array([[70.4, 0, 0, 0], [0.0, -40.0, -1.0, 0], [10.0, 40.0, 0, 0], [5.0, 1.0, 2.9, 0]])
    idx, kept = V.crop_points(pts, spec)
    assert idx.tolist() == [1, 3]
    assert np.array_equal(kept, pts[[1, 3]])


def test_rv_crop_uses_phi_and_z():
    spec = V.rv_spec()
    pts = np.array([[1.0, 0, 0, 0], [-1.0, 0.0, 0, 0], [0.0, 1.0, 0, 0], [1.0, 0, 3.5, 0]])
    idx, _ = V.crop_points(pts, spec)
    # (-1, 0) sits at phi = pi, outside; (0, 1) at phi = pi/2 is the open upper edge
    assert idx.tolist() == [0]


def test_assign_examples():
    spec = V.VoxelGridSpec("bev", (0.0, 4.0), (0.0, 4.0), (1.0, 1.0))
    a = V.assign_pillars(np.array([[0.2, 0.3, 0], [0.7, 0.9, 0]]), spec)
    assert a.n_pillars == 1 and a.point_pillar.tolist() == [0, 0]
    # x = 2 exactly is an interior boundary: floor puts it in col 2
    a = V.assign_pillars(np.array([[2.0, 0.5, 0]]), spec)
    assert a.occupied_cells.tolist() == [[0, 0, 2]]


def test_assign_matches_histogram_oracle():
    rng = np.random.default_rng(0)
    spec = V.bev_spec()
    _, pts = V.crop_points(random_cloud(rng, 10_000), spec)
    a = V.assign_pillars(pts, spec)
    hist, _, _ = np.histogram2d(pts[:, 1], pts[:, 0], bins=spec.dims,
                                range=[(-40.0, 40.0), (0.0, 70.4)])
    dense = np.zeros(spec.dims)
    dense[a.occupied_cells[:, 1], a.occupied_cells[:, 2]] = a.counts()
    assert np.array_equal(dense, hist)
    assert a.counts().sum() == len(pts)
    assert len(np.unique(a.occupied_cells, axis=0)) == a.n_pillars


def test_rv_assign_matches_histogram_oracle():
    rng = np.random.default_rng(1)
    spec = V.rv_spec()
    _, pts = V.crop_points(random_cloud(rng, 10_000), spec)
    a = V.assign_pillars(pts, spec)
    phi = np.arctan2(pts[:, 1], pts[:, 0])
    rows, cols = spec.dims
    hist, _, _ = np.histogram2d(pts[:, 2], phi, bins=spec.dims,
                                range=[(-1.0, -1.0 + rows * 0.05), (-math.pi / 2, -math.pi / 2 + cols * 0.002454)])
    dense = np.zeros(spec.dims)
    dense[a.occupied_cells[:, 1], a.occupied_cells[:, 2]] = a.counts()
    # histogram2d bins are floating edges; allow the rare point that
    # lands on an edge to move one bin, but totals must agree
    assert dense.sum() == hist.sum() == len(pts)
    assert np.abs(dense - hist).sum() <= 4


def test_batched_assignment_keeps_frames_apart():
    spec = V.VoxelGridSpec("bev", (0.0, 2.0), (0.0, 2.0), (1.0, 1.0))
    pts = np.array([[0.5, 0.5, 0], [0.5, 0.5, 0]])
    a = V.assign_pillars(pts, spec, batch=np.array([0, 1]))
    assert a.n_pillars == 2 and a.batch_size == 2
    assert a.occupied_cells.tolist() == [[0, 0, 0], [1, 0, 0]]


def test_max_pool_examples():
    spec = V.VoxelGridSpec("bev", (0.0, 4.0), (0.0, 4.0), (1.0, 1.0))
    a = V.assign_pillars(np.array([[0.1, 0.1, 0], [0.2, 0.2, 0]]), spec)
    out = V.pillar_max_pool(Tensor(np.array([[1.0, 5.0], [3.0, 2.0]])), a)
    assert out.data.tolist() == [[3.0, 5.0]]
    pts = np.array([[0.5, 0.5, 0], [1.5, 0.5, 0], [2.5, 3.5, 0]])
    feats = np.arange(6.0).reshape(3, 2)
    assert np.array_equal(V.pillar_max_pool(Tensor(feats), V.assign_pillars(pts, spec)).data, feats)


def test_max_pool_matches_loop_oracle():
    rng = np.random.default_rng(2)
    spec = V.VoxelGridSpec("bev", (0.0, 8.0), (0.0, 8.0), (1.0, 1.0))
    pts = np.column_stack([rng.uniform(0, 8, (500, 2)), np.zeros(500)])
    feats = rng.normal(size=(500, 6))
    a = V.assign_pillars(pts, spec)
    out = V.pillar_max_pool(Tensor(feats), a).data
    for p in range(a.n_pillars):
        assert np.array_equal(out[p], feats[a.point_pillar == p].max(axis=0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    spec = V.bev_spec(cell=1.6)
    _, pts = V.crop_points(random_cloud(rng, 2000), spec)
    feats = rng.normal(size=(len(pts), 5))
    perm = rng.permutation(len(pts))
    a, b = V.assign_pillars(pts, spec), V.assign_pillars(pts[perm], spec)
    assert np.array_equal(a.occupied_cells, b.occupied_cells)
    pa = V.pillar_max_pool(Tensor(feats), a).data
    pb = V.pillar_max_pool(Tensor(feats[perm]), b).data
    assert np.array_equal(pa, pb)


def test_max_pool_gradient_routes_to_argmax():
    rng = np.random.default_rng(3)
    spec = V.VoxelGridSpec("bev", (0.0, 3.0), (0.0, 3.0), (1.0, 1.0))
    pts = np.column_stack([rng.uniform(0, 3, (40, 2)), np.zeros(40)])
    a = V.assign_pillars(pts, spec)
    x = Tensor(rng.normal(size=(40, 3)), requires_grad=True)
    V.pillar_max_pool(x, a).sum().backward()
    assert x.grad.sum() == a.n_pillars * 3
    errs = check_gradients(lambda: V.pillar_max_pool(x, a).sum(), [x], eps=1e-6)
    assert max(errs.values()) <= 1e-5


def test_scatter_examples():
    spec = V.VoxelGridSpec("bev", (0.0, 4.0), (0.0, 6.0), (1.0, 1.0))
    a = V.assign_pillars(np.array([[2.5, 1.5, 0]]), spec)
    img = V.scatter_to_pseudo_image(Tensor(np.array([[1.0, -2.0, 3.0]])), a).data
    assert img.shape == (1, 3, 4, 6)
    nz = np.argwhere(img.any(axis=1))
    assert nz.tolist() == [[0, 1, 2]]
    empty = V.assign_pillars(np.zeros((0, 3)), spec)
    assert np.array_equal(V.scatter_to_pseudo_image(Tensor(np.zeros((0, 3))), empty).data, np.zeros((1, 3, 4, 6)))


def test_scatter_conserves_sum_and_zeros_elsewhere():
    rng = np.random.default_rng(4)
    spec = V.bev_spec(cell=0.8)
    _, pts = V.crop_points(random_cloud(rng, 3000), spec)
    a = V.assign_pillars(pts, spec)
    feats = rng.normal(size=(a.n_pillars, 4))
    img = V.scatter_to_pseudo_image(Tensor(feats), a).data
    assert img.sum() == pytest.approx(feats.sum(), abs=1e-9)
    mask = np.zeros(spec.dims, dtype=bool)
    mask[a.occupied_cells[:, 1], a.occupied_cells[:, 2]] = True
    assert np.all(img[0][:, ~mask] == 0.0)


def test_spec_validation():
    with pytest.raises(ValueError):
        V.VoxelGridSpec("bev", (0.0, 1.0), (1.0, 0.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        V.VoxelGridSpec("xyz", (0.0, 1.0), (0.0, 1.0), (1.0, 1.0))
