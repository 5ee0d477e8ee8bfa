import warnings

import numpy as np
import pytest
import scipy.sparse as sp

from splathead.core import Camera, GeomImage, ImageKind, project
from splathead.errors import InvalidInputError, NumericalError
from splathead.surface_recon import (
    BiniConfig, _DifferenceTerms, backproject_grid, conjugate_gradient, integrate_normals,
    reconstruct, solve_bini,
)


def rasters(depth, normal, mask):
    return (GeomImage(depth[..., None], ImageKind.DEPTH), GeomImage(normal, ImageKind.NORMAL),
            GeomImage(mask[..., None].astype(float), ImageKind.MASK))


def facing(h, w):
    n = np.zeros((h, w, 3))
    n[..., 2] = -1.0
    return n


def tilted(h, w, a, c):
    n = np.zeros((h, w, 3))
    n[..., 0] = a
    n[..., 2] = -c
    return n / np.linalg.norm([a, 0, c])


def test_flat_plane_identity():
    d0 = 1.7
    depth = np.full((24, 24), d0)
    out = integrate_normals(*rasters(depth, facing(24, 24), np.ones((24, 24), bool)))
    assert np.max(np.abs(out.plane() - d0)) < 1e-6


def test_tilted_plane_slope():
    a, c = 0.3, 1.0
    h = w = 32
    x = np.arange(w)
    depth = np.tile(5.0 + (a / c) * x, (h, 1))
    # start from an anchor that is flat, so the slope has to come from the normals
    anchor = np.full((h, w), depth.mean())
    res = solve_bini(*rasters(anchor, tilted(h, w, a, c), np.ones((h, w), bool)),
                     BiniConfig(data_weight=1e-6, cg_tol=1e-12, cg_max_iters=20000))
    slope = np.mean(np.diff(res.depth, axis=1))
    assert abs(slope - a / c) / (a / c) < 1e-3


def test_tilted_plane_consistent_anchor():
    a, c = 0.5, 0.8
    h = w = 32
    depth = np.tile(3.0 + (a / c) * np.arange(w), (h, 1))
    out = integrate_normals(*rasters(depth, tilted(h, w, a, c), np.ones((h, w), bool)))
    slope = np.diff(out.plane(), axis=1)
    assert np.max(np.abs(slope - a / c)) / (a / c) < 1e-3


def step_scene(step, size=64, noise=0.0):
    depth = np.full((size, size), 2.0)
    depth[:, size // 2:] += step
    if noise:
        depth = depth + noise * np.random.default_rng(0).normal(size=depth.shape)
    return rasters(depth, facing(size, size), np.ones((size, size), bool))


@pytest.mark.parametrize("step", [1.0, 5.0])
def test_bilateral_beats_uniform_on_step_edge(step):
    imgs = step_scene(step, noise=0.05)
    bil = solve_bini(*imgs)
    uni = solve_bini(*imgs, uniform_weights=True)
    assert bil.objective[-1] < uni.objective[-1]
    if step >= 5.0:
        # a jump far above 1/sqrt(k) is kept; uniform weights smear it
        clean = step_scene(step)[0].plane()
        assert np.max(np.abs(bil.depth - clean)) < 0.1 < np.max(np.abs(uni.depth - clean))


def test_objective_non_increasing():
    for imgs in (step_scene(1.0, noise=0.05), step_scene(5.0, noise=0.02)):
        obj = np.array(solve_bini(*imgs).objective)
        assert np.all(obj[1:] <= obj[:-1] * (1 + 1e-10))


def test_constant_shift_invariance():
    rng = np.random.default_rng(3)
    h = w = 16
    depth = 2.0 + 0.1 * rng.normal(size=(h, w))
    n = tilted(h, w, 0.2, 1.0)
    mask = np.ones((h, w), bool)
    cfg = BiniConfig(cg_tol=1e-12, cg_max_iters=10000)
    a = integrate_normals(*rasters(depth, n, mask), cfg).plane()
    b = integrate_normals(*rasters(depth + 0.75, n, mask), cfg).plane()
    assert np.max(np.abs((b - a) - 0.75)) < 1e-8


def test_weights_partition_of_unity():
    rng = np.random.default_rng(0)
    mask = rng.random((12, 12)) > 0.2
    terms = _DifferenceTerms(mask)
    n = int(mask.sum())
    res = terms.residuals(rng.normal(size=n), rng.normal(size=n), rng.normal(size=n))
    weights = terms.weights(res, k=2.0)
    for block in (0, 2):
        (_, _, pix_f, _), (_, _, pix_b, _) = terms.ops[block], terms.ops[block + 1]
        both = np.intersect1d(pix_f, pix_b)
        w_f = dict(zip(pix_f, weights[block]))
        w_b = dict(zip(pix_b, weights[block + 1]))
        for p in both:
            assert 0.0 < w_f[p] < 1.0
            assert w_f[p] + w_b[p] == 1.0


def test_mask_boundary_terms_dropped():
    mask = np.zeros((3, 3), bool)
    mask[1, 1] = True
    terms = _DifferenceTerms(mask)
    assert all(len(pix) == 0 for _, _, pix, _ in terms.ops)


def test_outside_mask_keeps_anchor():
    depth = np.full((8, 8), 4.0)
    mask = np.zeros((8, 8), bool)
    mask[2:6, 2:6] = True
    out = integrate_normals(*rasters(depth, tilted(8, 8, 0.3, 1.0), mask)).plane()
    assert np.all(out[~mask] == 4.0)


def test_empty_mask_rejected():
    with pytest.raises(InvalidInputError):
        integrate_normals(*rasters(np.ones((4, 4)), facing(4, 4), np.zeros((4, 4), bool)))


def test_flipped_normals_warn_and_recover():
    depth = np.full((8, 8), 2.0)
    with pytest.warns(UserWarning):
        res = solve_bini(*rasters(depth, -facing(8, 8), np.ones((8, 8), bool)))
    assert res.flipped_normals
    assert np.max(np.abs(res.depth - 2.0)) < 1e-6


def test_cg_solves_spd_system():
    rng = np.random.default_rng(1)
    m = rng.normal(size=(30, 30))
    A = sp.csr_matrix(m @ m.T + 30 * np.eye(30))
    b = rng.normal(size=30)
    x, _ = conjugate_gradient(A, b, np.zeros(30), tol=1e-12, max_iters=500)
    assert np.allclose(A @ x, b, atol=1e-9)


def test_cg_non_convergence_reports_residual():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(40, 40))
    A = sp.csr_matrix(m @ m.T + 1e-3 * np.eye(40))
    with pytest.raises(NumericalError) as info:
        conjugate_gradient(A, rng.normal(size=40), np.zeros(40), tol=1e-14, max_iters=2)
    assert info.value.residual is not None and info.value.residual > 0


def test_backproject_unit_depth_plane():
    cam = Camera(50.0, 50.0, 8.0, 8.0, width=16, height=16)
    mask = np.ones((16, 16))
    cloud = backproject_grid(GeomImage(np.ones((16, 16, 1)), ImageKind.DEPTH),
                             GeomImage(mask[..., None], ImageKind.MASK), cam)
    assert cloud.count == 256
    assert np.allclose(cloud.points()[:, 2], 1.0)


def test_backproject_single_pixel():
    cam = Camera(50.0, 50.0, 8.0, 8.0, width=16, height=16)
    mask = np.zeros((16, 16, 1))
    mask[3, 5] = 1
    cloud = backproject_grid(GeomImage(np.ones((16, 16, 1)), ImageKind.DEPTH),
                             GeomImage(mask, ImageKind.MASK), cam)
    assert cloud.count == 1 and cloud.cell_indices()[0] == 3 * 16 + 5


def test_backproject_projects_to_pixel_centers():
    rng = np.random.default_rng(5)
    cam = yaw_cam()
    depth = rng.uniform(1.0, 5.0, size=(cam.height, cam.width, 1))
    mask = (rng.random((cam.height, cam.width, 1)) > 0.3).astype(float)
    cloud = backproject_grid(GeomImage(depth, ImageKind.DEPTH), GeomImage(mask, ImageKind.MASK), cam)
    u, v, _ = project(cam, cloud.points())
    cells = cloud.cell_indices()
    assert np.max(np.abs(u - (cells % cam.width + 0.5))) < 1e-6
    assert np.max(np.abs(v - (cells // cam.width + 0.5))) < 1e-6


def yaw_cam():
    from splathead.core import yaw_camera

    return yaw_camera(Camera.looking_at_origin(3.0, 20, 14), 25.0)


def test_backproject_rejects_nonpositive_depth():
    cam = Camera(50.0, 50.0, 2.0, 2.0, width=4, height=4)
    with pytest.raises(InvalidInputError):
        backproject_grid(GeomImage(np.zeros((4, 4, 1)), ImageKind.DEPTH),
                         GeomImage(np.ones((4, 4, 1)), ImageKind.MASK), cam)


def test_reconstruct_flat_scene():
    cam = Camera.looking_at_origin(3.0, 16, 16)
    depth = np.full((16, 16), 3.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cloud = reconstruct(*rasters(depth, facing(16, 16), np.ones((16, 16), bool)), cam)
    assert cloud.count == 256
    assert np.allclose(cam.world_to_camera(cloud.points())[:, 2], 3.0, atol=1e-6)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        BiniConfig(k=0)
    with pytest.raises(InvalidInputError):
        BiniConfig(data_weight=-1)
    with pytest.raises(InvalidInputError):
        BiniConfig(irls_iters=0)
