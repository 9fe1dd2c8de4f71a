import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from trifield.errors import ContractError, InputDomainError
from trifield.renderer import (
    Camera,
    RenderConfig,
    coarse_bin_edges,
    composite,
    composite_backward,
    counter_uniform,
    generate_rays,
    merge_depths,
    render_image,
    sample_coarse,
    sample_importance,
)
from trifield.scenes import AnalyticSphere, EmptyField

from conftest import numerical_grad, rel_err


def front_camera(res=16, near=1.0, far=4.0):
    return Camera.look_at([0.0, -2.5, 0.0], [0.0, 0.0, 0.0], 1.5 * res, 1.5 * res, res / 2, res / 2,
                          res, res, near, far)


def test_look_at_axes_and_central_ray():
    cam = front_camera()
    rot = cam.rotation
    np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-12)
    assert np.linalg.det(rot) == pytest.approx(1.0)
    np.testing.assert_allclose(rot[:, 2], [0, 1, 0], atol=1e-12)   # forward toward target
    np.testing.assert_allclose(rot[:, 1], [0, 0, -1], atol=1e-12)  # image y points down in world
    # the four pixels around the principal point are symmetric about the optical axis
    rays = generate_rays(cam, [[7, 7], [8, 8]])
    np.testing.assert_allclose(np.cross(rays.directions.sum(0), [0, 1, 0]), 0, atol=1e-12)


def test_rays_are_unit_length_and_share_origin():
    rays = generate_rays(front_camera(8))
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(rays.origins, np.tile([0, -2.5, 0], (64, 1)))


def test_invalid_camera_rejected():
    with pytest.raises(ContractError):
        Camera(10, 10, 4, 4, 8, 8, 2.0, 1.0).validate()
    bad = np.eye(4)
    bad[0, 0] = 2.0
    with pytest.raises(ContractError):
        Camera(10, 10, 4, 4, 8, 8, 1.0, 2.0, bad).validate()
    with pytest.raises(InputDomainError):
        generate_rays(front_camera(8), [[8, 0]])


def test_camera_dict_round_trip():
    cam = front_camera()
    back = Camera.from_dict(cam.to_dict())
    assert back.to_dict() == cam.to_dict()


def test_counter_uniform_is_pure_and_chunk_independent():
    full = counter_uniform(7, 3, np.arange(100), 16)
    part = counter_uniform(7, 3, np.arange(40, 60), 16)
    np.testing.assert_array_equal(full[40:60], part)
    assert np.all((full >= 0) & (full < 1))
    assert not np.array_equal(full, counter_uniform(7, 4, np.arange(100), 16))
    assert not np.array_equal(full, counter_uniform(8, 3, np.arange(100), 16))
    assert stats.kstest(full.ravel(), "uniform").statistic < 0.03


def test_stratified_samples_one_per_bin():
    rng = np.random.default_rng(0)
    t = sample_coarse([1.0, 2.0], [3.0, 2.5], 8, rng)
    edges = coarse_bin_edges([1.0, 2.0], [3.0, 2.5], 8)
    assert np.all((t >= edges[:, :-1]) & (t < edges[:, 1:]))
    np.testing.assert_allclose(sample_coarse(0.0, 1.0, 4), [[0.125, 0.375, 0.625, 0.875]])


def test_empty_ray_has_zero_opacity():
    comp = composite(np.linspace(0.1, 1, 5), np.zeros(5), np.ones((5, 3)), far=1.2, background=[0.2, 0.4, 0.6])
    assert comp.opacity[0] == 0 and comp.t_end[0] == 1
    np.testing.assert_allclose(comp.feature[0], [0.2, 0.4, 0.6])


def test_opaque_first_sample_takes_all_weight():
    comp = composite([0.5, 1.0, 1.5], [1e6, 3.0, 3.0], np.eye(3), far=2.0)
    np.testing.assert_allclose(comp.weights[0], [1, 0, 0], atol=1e-12)
    assert comp.depth[0] == pytest.approx(0.5)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**31 - 1), st.floats(0.01, 50.0))
def test_weights_nonnegative_and_partition_unity(n, seed, scale):
    rng = np.random.default_rng(seed)
    t = np.sort(rng.uniform(0, 3, (4, n)), axis=1)
    sigma = rng.exponential(scale, (4, n)) * (rng.random((4, n)) < 0.7)
    comp = composite(t, sigma, None, far=3.5)
    assert np.all(comp.weights >= 0)
    np.testing.assert_allclose(comp.weights.sum(1) + comp.t_end, 1.0, atol=1e-6)
    assert np.all(comp.opacity <= 1 + 1e-12)


@pytest.mark.parametrize("sigma", [0.1, 0.5, 1.0, 3.0, 10.0])
def test_constant_sigma_slab_opacity(sigma):
    # unit-length slab sampled at bin left edges so the intervals tile [0, 1]
    t = coarse_bin_edges(0.0, 1.0, 1024)[:, :-1]
    comp = composite(t, np.full_like(t, sigma), None, far=1.0)
    assert comp.opacity[0] == pytest.approx(1 - np.exp(-sigma), abs=1e-3)
    # midpoints still agree within tolerance
    tm = sample_coarse(0.0, 1.0, 1024)
    assert composite(tm, np.full_like(tm, sigma), None, far=1.0).opacity[0] == pytest.approx(1 - np.exp(-sigma),
                                                                                            abs=1e-3)


def piecewise_cdf(edges, weights):
    w = np.asarray(weights) + 1e-5
    cdf = np.concatenate([[0.0], np.cumsum(w) / w.sum()])
    return lambda x: np.interp(x, edges, cdf)


def test_importance_sampler_ks():
    edges = coarse_bin_edges(2.0, 6.0, 32)[0]
    x = 0.5 * (edges[:-1] + edges[1:])
    weights = np.exp(-0.5 * ((x - 3.1) / 0.3) ** 2) + 0.4 * np.exp(-0.5 * ((x - 4.8) / 0.15) ** 2)
    rng = np.random.default_rng(0)
    draws = sample_importance(edges[None], weights[None], 4096, rng)[0]
    d = stats.kstest(draws, piecewise_cdf(edges, weights)).statistic
    assert d < 0.05
    # and a mismatched target is rejected by the same statistic
    assert stats.kstest(draws, piecewise_cdf(edges, weights[::-1])).statistic > 0.05


def test_importance_deterministic_quantiles_sorted_and_in_range():
    edges = coarse_bin_edges(0.0, 1.0, 4)
    t = sample_importance(edges, [[0.0, 1.0, 0.0, 0.0]], 8)
    assert np.all(np.diff(t) >= 0)
    assert np.all((t >= 0.25) & (t <= 0.5))


def test_importance_rejects_negative_weights():
    with pytest.raises(ContractError):
        sample_importance(coarse_bin_edges(0, 1, 2), [[1.0, -0.1]], 4)


def test_merge_drops_duplicates():
    t, valid = merge_depths([[0.1, 0.5, 0.9]], [[0.5, 0.7]])
    np.testing.assert_array_equal(t, [[0.1, 0.5, 0.5, 0.7, 0.9]])
    np.testing.assert_array_equal(valid, [[True, False, True, True, True]])
    comp = composite(t, np.ones_like(t), None, far=1.0, valid=valid)
    ref = composite([0.1, 0.5, 0.7, 0.9], np.ones(4), None, far=1.0)
    assert comp.opacity[0] == pytest.approx(ref.opacity[0], abs=1e-15)


@pytest.mark.parametrize("trial", range(20))
def test_composite_backward_matches_finite_differences(trial):
    rng = np.random.default_rng(trial)
    t = np.sort(rng.uniform(0.5, 2.0, (3, 6)), axis=1)
    sigma = rng.exponential(1.0, (3, 6))
    feats = rng.uniform(size=(3, 6, 2))
    bg = rng.uniform(size=2)
    gf, gd, go = rng.normal(size=(3, 2)), rng.normal(size=3), rng.normal(size=3)

    def loss():
        c = composite(t, sigma, feats, 2.5, bg)
        return float((c.feature * gf).sum() + c.depth @ gd + c.opacity @ go)

    ds, df = composite_backward(composite(t, sigma, feats, 2.5, bg), gf, gd, go)
    assert rel_err(ds, numerical_grad(loss, sigma, h=1e-6)) <= 1e-5
    assert rel_err(df, numerical_grad(loss, feats, h=1e-6)) <= 1e-5


def test_render_empty_field_is_background():
    out = render_image(EmptyField(), front_camera(6), RenderConfig(8, 8, background=[0.1, 0.2, 0.3]))
    np.testing.assert_allclose(out.rgb, np.broadcast_to([0.1, 0.2, 0.3], (6, 6, 3)))
    assert np.all(out.opacity == 0)


def test_render_sphere_center_is_foreground():
    sphere = AnalyticSphere(radius=0.5, peak=40.0, softness=0.0, color=(0.9, 0.2, 0.1))
    out = render_image(sphere, front_camera(8), RenderConfig(128, 0, background=1.0))
    center = out.rgb[3:5, 3:5].reshape(-1, 3)
    np.testing.assert_allclose(center, np.tile([0.9, 0.2, 0.1], (4, 1)), atol=1e-3)
    # depth of the central rays is close to the front surface at distance 2.0
    assert np.all(np.abs(out.depth[3:5, 3:5] - 2.0) < 0.05)
    np.testing.assert_allclose(out.rgb[0, 0], 1.0, atol=1e-6)
