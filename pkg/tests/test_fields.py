import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trifield.errors import ContractError, InputDomainError
from trifield.fields import (
    FEATURES,
    TriPlane,
    VoxelGrid,
    matching_triplane_resolution,
    param_count,
    triplane_params,
    triplane_query,
    triplane_query_backward,
    voxel_params,
    voxel_query,
    voxel_query_backward,
)
from trifield.tape import GradientTape

from conftest import numerical_grad, rel_err


def node_coord(i, n, side=2.0):
    return (-1.0 + 2.0 * i / (n - 1)) * side / 2


def test_zero_planes_give_zero_feature():
    tp = TriPlane.zeros(4, 3, dtype=np.float64)
    x = np.random.default_rng(0).uniform(-1.5, 1.5, (20, 3))
    assert np.all(triplane_query(tp, x).feature == 0)


def test_node_query_sums_three_stored_features():
    rng = np.random.default_rng(1)
    tp = TriPlane.random(5, 4, side=3.0, rng=rng, dtype=np.float64)
    i, j, k = 1, 4, 2
    x = np.array([node_coord(i, 5, 3.0), node_coord(j, 5, 3.0), node_coord(k, 5, 3.0)])
    expected = tp.planes[0, i, j] + tp.planes[1, i, k] + tp.planes[2, j, k]
    np.testing.assert_allclose(triplane_query(tp, x).feature, expected, rtol=0, atol=1e-14)


def test_center_of_two_node_plane_is_mean():
    tp = TriPlane.zeros(2, 1, dtype=np.float64)
    tp.planes[0, :, :, 0] = [[0.0, 1.0], [2.0, 3.0]]
    fs = triplane_query(tp, np.zeros(3))
    assert fs.feature[0] == pytest.approx(1.5, abs=1e-15)
    np.testing.assert_allclose(fs.parts[:, 0], [1.5, 0.0, 0.0])


def test_feature_is_sum_of_parts():
    rng = np.random.default_rng(2)
    tp = TriPlane.random(6, 3, rng=rng, dtype=np.float64)
    fs = triplane_query(tp, rng.uniform(-1, 1, (50, 3)))
    np.testing.assert_allclose(fs.feature, fs.parts.sum(0), atol=1e-14)


def test_outside_points_clamp_to_cube_surface():
    rng = np.random.default_rng(3)
    tp = TriPlane.random(4, 2, rng=rng, dtype=np.float64)
    inside = triplane_query(tp, np.array([1.0, -1.0, 0.3])).feature
    outside = triplane_query(tp, np.array([7.0, -3.5, 0.3])).feature
    np.testing.assert_allclose(outside, inside, atol=1e-14)


def test_non_finite_point_is_rejected():
    tp = TriPlane.zeros(3, 1)
    with pytest.raises(InputDomainError):
        triplane_query(tp, np.array([0.0, np.nan, 0.0]))
    with pytest.raises(InputDomainError):
        voxel_query(VoxelGrid.zeros(3, 1), np.array([np.inf, 0.0, 0.0]))


def test_invalid_planes_rejected():
    with pytest.raises(ContractError):
        TriPlane(np.zeros((3, 4, 5, 2)))
    with pytest.raises(ContractError):
        TriPlane(np.full((3, 2, 2, 1), np.nan))


def test_backward_zero_upstream_leaves_tape_untouched():
    tp = TriPlane.random(4, 3, rng=0, dtype=np.float64)
    tape = GradientTape.like(tp.params())
    triplane_query_backward(tp, np.array([0.1, 0.2, -0.3]), np.zeros(3), tape)
    assert not np.any(tape[FEATURES])


def test_backward_at_node_touches_three_entries_per_channel():
    tp = TriPlane.random(5, 2, rng=0, dtype=np.float64)
    x = np.array([node_coord(1, 5), node_coord(3, 5), node_coord(0, 5)])
    up = np.array([0.7, -1.3])
    tape = GradientTape.like(tp.params())
    triplane_query_backward(tp, x, up, tape)
    g = tape[FEATURES]
    for c in range(2):
        nz = np.argwhere(g[..., c] != 0)
        assert len(nz) == 3
        np.testing.assert_array_equal(g[..., c][g[..., c] != 0], up[c])
    assert g[0, 1, 3, 0] == up[0] and g[1, 1, 0, 0] == up[0] and g[2, 3, 0, 0] == up[0]


def test_backward_tape_shape_mismatch():
    tp = TriPlane.random(4, 2, rng=0, dtype=np.float64)
    wrong = GradientTape({FEATURES: np.zeros((3, 5, 5, 2))})
    with pytest.raises(ContractError):
        triplane_query_backward(tp, np.zeros(3), np.ones(2), wrong)


@pytest.mark.parametrize("trial", range(100))
def test_triplane_backward_matches_finite_differences(trial):
    rng = np.random.default_rng(1000 + trial)
    n, c = rng.integers(2, 5), rng.integers(1, 3)
    tp = TriPlane.random(n, c, side=rng.uniform(1, 3), scale=1.0, rng=rng, dtype=np.float64)
    x = rng.uniform(-0.6, 0.6, 3) * tp.side
    up = rng.normal(size=c)
    tape = GradientTape.like(tp.params())
    triplane_query_backward(tp, x, up, tape)
    fd = numerical_grad(lambda: float(triplane_query(tp, x).feature @ up), tp.planes, h=1e-4)
    assert rel_err(tape[FEATURES], fd) <= 1e-4


def test_voxel_constant_grid_returns_constant():
    vg = VoxelGrid(np.full((4, 4, 4, 2), 0.37))
    x = np.random.default_rng(4).uniform(-2, 2, (30, 3))
    np.testing.assert_allclose(voxel_query(vg, x), 0.37, atol=1e-15)


def test_voxel_node_query_exact():
    vg = VoxelGrid.random(5, 3, rng=5, dtype=np.float64)
    x = np.array([node_coord(2, 5), node_coord(0, 5), node_coord(4, 5)])
    np.testing.assert_array_equal(voxel_query(vg, x), vg.grid[2, 0, 4])


@pytest.mark.parametrize("trial", range(100))
def test_voxel_backward_matches_finite_differences(trial):
    rng = np.random.default_rng(2000 + trial)
    m, c = rng.integers(2, 4), rng.integers(1, 3)
    vg = VoxelGrid.random(m, c, scale=1.0, rng=rng, dtype=np.float64)
    x = rng.uniform(-1.2, 1.2, 3)
    up = rng.normal(size=c)
    tape = GradientTape.like(vg.params())
    voxel_query_backward(vg, x, up, tape)
    fd = numerical_grad(lambda: float(voxel_query(vg, x) @ up), vg.grid)
    assert rel_err(tape[FEATURES], fd) <= 1e-4


def test_param_counts():
    assert triplane_params(512, 48) == 37_748_736
    assert voxel_params(128, 18) == 37_748_736
    assert param_count(TriPlane.zeros(1, 1)) == 3
    assert param_count(TriPlane.zeros(8, 5)) == 3 * 64 * 5
    assert param_count(VoxelGrid.zeros(6, 2)) == 432


def test_equal_budget_side_length():
    # 3 N^2 C = M^3 C_v
    n = matching_triplane_resolution(128, 18, 48)
    assert n == pytest.approx(512.0)
    assert triplane_params(round(n), 48) == voxel_params(128, 18)


def test_constant_planes_give_three_times_constant():
    tp = TriPlane(np.full((3, 5, 5, 2), 0.25))
    x = np.random.default_rng(6).uniform(-1.3, 1.3, (40, 3))
    np.testing.assert_allclose(triplane_query(tp, x).feature, 0.75, atol=1e-15)


coords = st.floats(-1.5, 1.5, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3), st.tuples(coords, coords, coords))
def test_query_is_linear_in_features(seed, a, b, x):
    rng = np.random.default_rng(seed)
    t1 = TriPlane.random(4, 3, rng=rng, dtype=np.float64)
    t2 = TriPlane.random(4, 3, rng=rng, dtype=np.float64)
    mix = TriPlane(a * t1.planes + b * t2.planes)
    x = np.array(x)
    lhs = triplane_query(mix, x).feature
    rhs = a * triplane_query(t1, x).feature + b * triplane_query(t2, x).feature
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_continuity_across_cell_boundary():
    tp = TriPlane.random(5, 2, rng=7, dtype=np.float64)
    edge = np.array([node_coord(2, 5), 0.13, -0.41])
    jumps = []
    for d in [1e-1, 1e-2, 1e-3, 1e-4, 1e-6]:
        lo = triplane_query(tp, edge - [d, 0, 0]).feature
        hi = triplane_query(tp, edge + [d, 0, 0]).feature
        jumps.append(np.abs(hi - lo).max())
    assert all(a > b for a, b in zip(jumps, jumps[1:]))
    assert jumps[-1] < 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.tuples(coords, coords, coords))
def test_cyclic_permutation_symmetry(seed, x):
    # p' = (y, z, x): xy' sees (y, z) -> old yz, xz' sees (y, x) -> old xy^T, yz' sees (z, x) -> old xz^T
    tp = TriPlane.random(4, 2, rng=seed, dtype=np.float64)
    xy, xz, yz = tp.planes
    permuted = TriPlane(np.stack([yz, xy.transpose(1, 0, 2), xz.transpose(1, 0, 2)]))
    x = np.array(x)
    orig = triplane_query(tp, x)
    perm = triplane_query(permuted, x[[1, 2, 0]])
    np.testing.assert_allclose(perm.feature, orig.feature, atol=1e-12)
    np.testing.assert_allclose(perm.parts, orig.parts[[2, 0, 1]], atol=1e-12)


def test_batch_query_matches_single_queries():
    tp = TriPlane.random(6, 3, rng=8, dtype=np.float64)
    x = np.random.default_rng(9).uniform(-1, 1, (10, 3))
    feats, _ = tp.query(x)
    for i in range(10):
        np.testing.assert_allclose(feats[i], triplane_query(tp, x[i]).feature, atol=1e-14)
