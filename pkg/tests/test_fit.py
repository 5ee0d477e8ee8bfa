import csv

import numpy as np
import pytest

from splathead.core import Camera, GeomImage, GridPointCloud, ImageKind
from splathead.errors import InvalidInputError, NumericalError
from splathead.fit import (
    TRACE_FIELDS, LossConfig, PipelineModel, edge_grad, edge_loss, fit_scene, l1_grad, l1_loss,
    psnr, smoothed, ssim, ssim_grad, total_loss, write_trace_csv,
)
from splathead.gaussians import GaussianCloud, eval_color
from splathead.regressors import FEATURE_CHANNELS, RegressorBundle
from splathead.renderer import render
from splathead.symmetry import VoxelFilterConfig, symmetric_complete

from conftest import random_cloud
from oracles import rel_error, ssim_bruteforce


def imgs(rng, h=8, w=8):
    return rng.random((h, w, 3)), rng.random((h, w, 3))


def test_l1_examples():
    a = np.zeros((2, 2, 3))
    b = np.full((2, 2, 3), 0.25)
    assert l1_loss(a, b) == 0.25
    assert l1_loss(a, a) == 0.0
    assert not l1_grad(a, a).any()  # sign(0) = 0


def test_l1_direct_sum(rng):
    a, b = imgs(rng)
    direct = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
    assert l1_loss(a, b) == pytest.approx(direct, abs=1e-14)


def test_shape_mismatch():
    with pytest.raises(InvalidInputError):
        l1_loss(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))


def test_ssim_identity_and_symmetry(rng):
    a, b = imgs(rng)
    assert ssim(a, a) == 1.0
    assert not ssim_grad(a, a).any()
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
    assert ssim(a, b) < 1.0


@pytest.mark.parametrize("window", [3, 7, 11])
def test_ssim_bruteforce(rng, window):
    a, b = imgs(rng)
    cfg = LossConfig(ssim_window=window)
    assert ssim(a, b, cfg) == pytest.approx(ssim_bruteforce(a, b, window, 1.5), abs=1e-10)


def test_edge_loss_examples():
    flat = np.full((4, 4, 3), 0.3)
    assert edge_loss(flat, np.zeros_like(flat)) == 0.0  # offsets carry no edges
    ramp = np.tile(np.arange(4.0)[None, :, None], (4, 1, 3))
    assert edge_loss(ramp, flat) == pytest.approx(1.0)  # unit horizontal steps, none vertical


def test_edge_loss_oracle(rng):
    a, b = imgs(rng, 5, 6)
    dx = [abs((a[i, j + 1, c] - a[i, j, c]) - (b[i, j + 1, c] - b[i, j, c]))
          for i in range(5) for j in range(5) for c in range(3)]
    dy = [abs((a[i + 1, j, c] - a[i, j, c]) - (b[i + 1, j, c] - b[i, j, c]))
          for i in range(4) for j in range(6) for c in range(3)]
    assert edge_loss(a, b) == pytest.approx(np.mean(dx) + np.mean(dy), abs=1e-14)


def test_total_loss_component_sum(rng):
    c, t = imgs(rng)
    gt = rng.random((8, 8, 3))
    cfg = LossConfig()
    terms = total_loss(c, t, gt, cfg)
    expected = (l1_loss(c, gt) + l1_loss(t, gt) + 0.01 * (edge_loss(c, gt) + edge_loss(t, gt))
                + 0.2 * (1 - ssim(t, gt, cfg)))
    assert abs(terms.total - expected) <= 1e-12
    zero = total_loss(c, t, gt, LossConfig(lambda_p=0.0, lambda_ssim=0.0))
    assert zero.total == l1_loss(c, gt) + l1_loss(t, gt)


def test_default_weights():
    cfg = LossConfig()
    assert cfg.lambda_p == 0.01 and cfg.lambda_ssim == 0.2


@pytest.mark.parametrize("kwargs", [dict(lambda_p=-1), dict(ssim_window=4), dict(steps=-1),
                                    dict(momentum=1.0)])
def test_config_validation(kwargs):
    with pytest.raises(InvalidInputError):
        LossConfig(**kwargs)


def fd_image(f, a, h=1e-6, count=25, seed=0):
    rng = np.random.default_rng(seed)
    idx = rng.choice(a.size, count, replace=False)
    out = []
    for i in idx:
        ap, am = a.copy().ravel(), a.copy().ravel()
        ap[i] += h
        am[i] -= h
        out.append((f(ap.reshape(a.shape)) - f(am.reshape(a.shape))) / (2 * h))
    return idx, np.array(out)


def test_ssim_gradient(rng):
    a, b = imgs(rng)
    for cfg in (LossConfig(), LossConfig(ssim_window=3, ssim_sigma=0.8)):
        idx, fd = fd_image(lambda x: ssim(x, b, cfg), a)
        assert rel_error(ssim_grad(a, b, cfg).ravel()[idx], fd, floor=1e-8) < 1e-5


def test_l1_and_edge_gradients(rng):
    a, b = imgs(rng)  # continuous random data keeps every difference away from the kinks
    idx, fd = fd_image(lambda x: l1_loss(x, b), a)
    assert np.allclose(l1_grad(a, b).ravel()[idx], fd, rtol=1e-6, atol=1e-9)
    idx, fd = fd_image(lambda x: edge_loss(x, b), a)
    assert np.allclose(edge_grad(a, b).ravel()[idx], fd, rtol=1e-6, atol=1e-9)


def test_psnr():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == np.inf
    assert psnr(a, np.full_like(a, 0.1)) == pytest.approx(20.0)


def test_perfect_init_is_a_fixed_point(rng):
    cam = Camera.looking_at_origin(3.0, 16, 16, 40.0)
    cloud = random_cloud(rng, 30)
    target = render(cloud, cam).color.data
    r = fit_scene(cloud, [(cam, target)], LossConfig(steps=10, densify=False))
    assert np.array_equal(r.model.colors, cloud.colors)
    assert np.array_equal(r.model.opacity_logits, cloud.opacity_logits)
    assert r.final_loss == 0.0


def test_flat_target_converges_to_capped_alpha_ratio():
    cam = Camera.looking_at_origin(3.0, 16, 16, 40.0)
    # covers the frame with alpha pinned at the 0.999 cap
    g = GaussianCloud.create([[0.0, 0.0, 0.0]], log_scales=5.0, opacity_logits=15.0)
    t = np.array([0.4, 0.3, 0.6])
    cfg = LossConfig(steps=200, densify=False, lr_color=1.0, lr_opacity=0.0, lr_decay=0.97)
    r = fit_scene(g, [(cam, np.broadcast_to(t, (16, 16, 3)))], cfg)
    rgb = eval_color(r.model.colors[0], np.array([0.0, 0.0, 1.0]))
    assert np.max(np.abs(rgb - t / 0.999)) < 1e-3
    assert r.final_loss < r.initial_loss


def test_non_finite_loss_raises():
    cam = Camera.looking_at_origin(3.0, 8, 8, 40.0)
    g = GaussianCloud.create([[0.0, 0.0, 0.0]], log_scales=-1.0)
    target = np.full((8, 8, 3), np.nan)
    with pytest.raises(NumericalError) as info:
        fit_scene(g, [(cam, target)], LossConfig(steps=3, densify=False))
    assert info.value.step == 0


def test_fit_requires_targets():
    with pytest.raises(InvalidInputError):
        fit_scene(GaussianCloud.empty(), [])


def small_pipeline(rng):
    h, w = 5, 6
    pos = rng.normal(scale=0.3, size=(h, w, 3))
    pos[..., 0] = np.abs(pos[..., 0]) + 0.2
    P = GridPointCloud(pos, rng.random((h, w)) < 0.8)
    F = GeomImage(rng.normal(size=(h, w, FEATURE_CHANNELS)), ImageKind.FEATURE)
    _, P_s, _ = symmetric_complete(P, VoxelFilterConfig(voxel_size=0.02))
    bundle = RegressorBundle.create(hidden=4, expression_dim=2, seed=3, init="uniform")
    prior = rng.normal(scale=0.1, size=(P.count, 20))
    return PipelineModel(bundle, P, F, P_s, prior)


def test_pipeline_model_gradient(rng):
    model = small_pipeline(rng)
    cloud = model.build()
    assert len(cloud) > model.P_d.count
    wc = rng.normal(size=cloud.colors.shape)
    wo = rng.normal(size=len(cloud))

    def f(flat):
        model.set_params({"net": flat})
        c = model.build()
        return float(np.sum(c.colors * wc) + np.sum(c.opacity_logits * wo))

    flat = model.params()["net"].copy()
    f(flat)
    g = model.backward(wc, wo)["net"]
    idx = rng.choice(len(flat), 60, replace=False)
    fd = []
    h = 1e-6
    for i in idx:
        p, m = flat.copy(), flat.copy()
        p[i] += h
        m[i] -= h
        fd.append((f(p) - f(m)) / (2 * h))
    assert rel_error(g[idx], fd) < 1e-5


def test_pipeline_fit_reduces_loss(rng):
    model = small_pipeline(rng)
    cam = Camera.looking_at_origin(3.0, 16, 16, 40.0)
    target = np.full((16, 16, 3), 0.3)
    r = fit_scene(model, [(cam, target)], LossConfig(steps=5, lr_net=0.01))
    assert isinstance(r.model, RegressorBundle)
    assert r.final_loss < r.initial_loss


def test_trace_csv(tmp_path, rng):
    cam = Camera.looking_at_origin(3.0, 8, 8, 40.0)
    g = random_cloud(rng, 5)
    r = fit_scene(g, [(cam, np.full((8, 8, 3), 0.5))], LossConfig(steps=3))
    assert [row["step"] for row in r.trace] == [0, 1, 2, 3]
    path = tmp_path / "trace.csv"
    write_trace_csv(path, r.trace)
    rows = list(csv.DictReader(path.open()))
    assert tuple(rows[0]) == TRACE_FIELDS and len(rows) == 4
    assert float(rows[0]["total"]) == pytest.approx(r.initial_loss)


def test_smoothed():
    assert np.array_equal(smoothed(np.arange(25.0), 10), [4.5, 14.5])
