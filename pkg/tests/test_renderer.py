import numpy as np
import pytest

from splathead.core import Camera, unproject
from splathead.gaussians import SH_C0, GaussianCloud, logit
from splathead.renderer import (
    BLUR, RenderSettings, project_gaussian, project_gaussians, render, render_grad_color_opacity,
    render_reference, transmittance_trace,
)

from conftest import random_cloud
from oracles import render_fd_error


def at_pixel(camera, u, v, depth):
    return unproject(camera, u + 0.5, v + 0.5, depth)


def single(camera, opacity=0.6, log_scale=-3.0, depth=3.0, u=16, v=16, colors=None):
    return GaussianCloud.create(at_pixel(camera, u, v, depth), log_scales=log_scale,
                                opacity_logits=logit(opacity), colors=colors)


def test_centered_gaussian_alpha_equals_opacity(small_camera):
    out = render(single(small_camera), small_camera)
    assert out.alpha.data[16, 16, 0] == pytest.approx(0.6, abs=1e-9)
    assert np.allclose(out.color.data[16, 16], 0.5 * 0.6, atol=1e-9)


def test_isotropic_on_axis_footprint(small_camera):
    s = np.exp(-3.0)
    g = GaussianCloud.create([[0.0, 0.0, 0.0]], log_scales=-3.0, opacity_logits=logit(0.6))
    sp = project_gaussian(g, 0, small_camera)
    assert np.array_equal(sp.mean2d, [16.0, 16.0])
    var = (small_camera.fx * s / 3.0) ** 2
    assert np.allclose(sp.cov2d, (var + BLUR) * np.eye(2), rtol=1e-12, atol=1e-15)
    assert sp.alpha_base == pytest.approx(0.6)


def test_doubling_depth_halves_sigma():
    cam = Camera.looking_at_origin(0.0, 64, 64, 40.0)
    sig = []
    for depth in (2.0, 4.0):
        g = GaussianCloud.create(at_pixel(cam, 31.5, 31.5, depth), log_scales=-2.0)
        sp = project_gaussian(g, 0, cam)
        sig.append(np.sqrt(sp.cov2d[0, 0] - BLUR))
    assert sig[1] / sig[0] == pytest.approx(0.5, rel=0.01)


def test_behind_camera_is_culled(small_camera):
    g = GaussianCloud.create([[0.0, 0.0, -3.5], [0.0, 0.0, -3.0]], log_scales=-1.0,
                             opacity_logits=5.0)
    assert len(project_gaussians(g, small_camera)) == 0
    out = render(g, small_camera)
    assert not out.color.data.any() and not out.alpha.data.any()


def test_two_gaussians_composite_by_hand(small_camera):
    front = dict(opacity=0.5, depth=2.5, colors=np.r_[[0.5 / SH_C0, 0, 0], np.zeros(9)])
    back = dict(opacity=0.8, depth=3.5, colors=np.r_[[0, 0.5 / SH_C0, 0], np.zeros(9)])
    from splathead.gaussians import concat
    # back listed first: order must come from depth, not index
    g = concat(single(small_camera, **back), single(small_camera, **front))
    out = render(g, small_camera).color.data[16, 16]
    c_front = np.array([1.0, 0.5, 0.5])
    c_back = np.array([0.5, 1.0, 0.5])
    assert np.allclose(out, 0.5 * c_front + 0.5 * 0.8 * c_back, atol=1e-9)


def test_empty_regions_are_zero(small_camera):
    out = render(single(small_camera, log_scale=-4.0), small_camera)
    assert not out.color.data[:4].any() and out.alpha.data[:4].max() == 0.0
    empty = render(GaussianCloud.empty(), small_camera)
    assert not empty.color.data.any() and np.all(empty.transmittance == 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_tiled_matches_reference(seed):
    rng = np.random.default_rng(seed)
    cam = Camera.looking_at_origin(3.0, 48, 40, 40.0)
    g = random_cloud(rng, 200)
    a = render(g, cam, tile=8)
    b = render_reference(g, cam)
    assert np.max(np.abs(a.color.data - b.color.data)) <= 1e-12
    assert np.max(np.abs(a.transmittance - b.transmittance)) <= 1e-12


def test_transmittance_monotone(rng, small_camera):
    g = random_cloud(rng, 100, scale=(-2.5, -1.5))
    trace = transmittance_trace(g, small_camera, 16, 16)
    assert len(trace) > 2
    assert np.all(np.diff(trace) <= 0) and np.all(trace >= 0)
    assert trace[-1] == pytest.approx(render(g, small_camera).transmittance[16, 16], abs=1e-12)


def test_permutation_invariance(rng, small_camera):
    g = random_cloud(rng, 80)
    perm = rng.permutation(80)
    a = render(g, small_camera).color.data
    b = render(g.subset(perm), small_camera).color.data
    assert np.array_equal(a, b)


def test_alpha_is_one_minus_transmittance(rng, small_camera):
    out = render(random_cloud(rng, 50), small_camera)
    assert np.array_equal(out.alpha.data[..., 0], 1.0 - out.transmittance)
    assert np.all((out.alpha.data >= 0) & (out.alpha.data <= 1))


def test_dc_gradient_is_basis_times_alpha(small_camera):
    g = single(small_camera, log_scale=-2.5)
    out = render(g, small_camera)
    up = np.zeros((32, 32, 3))
    up[..., 0] = 1.0
    grads = render_grad_color_opacity(g, small_camera, up)
    assert grads.colors[0, 0] == pytest.approx(SH_C0 * out.alpha.data.sum(), rel=1e-12)
    assert not grads.colors[0, 1:3].any()


def test_clamped_channels_have_zero_gradient(small_camera):
    colors = np.zeros(12)
    colors[0] = 5.0  # red saturates above 1
    colors[1] = -5.0  # green saturates below 0
    g = single(small_camera, colors=colors)
    grads = render_grad_color_opacity(g, small_camera, np.ones((32, 32, 3)))
    coef = grads.colors[0].reshape(4, 3)
    assert not coef[:, :2].any() and coef[0, 2] > 0


def test_capped_alpha_has_no_opacity_gradient(small_camera):
    g = single(small_camera, opacity=0.99999, log_scale=-1.0)
    sp = project_gaussians(g, small_camera)
    assert sp.alpha_base[0] > RenderSettings().alpha_max
    up = np.zeros((32, 32, 3))
    up[16, 16] = 1.0
    assert render_grad_color_opacity(g, small_camera, up).opacity_logits[0] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed, small_camera):
    err, skipped, total = render_fd_error(np.random.default_rng(seed), small_camera,
                                          return_skipped=True)
    assert err < 1e-4 and skipped <= 0.01 * total
