"""Finite-difference and brute-force oracles shared by unit and acceptance tests."""

import numpy as np

from splathead.fit import gaussian_kernel
from splathead.regressors import Mlp, grad
from splathead.renderer import render, render_grad_color_opacity


def rel_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def mlp_fd_error(rng, h=1e-5, sizes=None):
    """Worst relative error of Mlp gradients against central differences on one random net."""
    if sizes is None:
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 6)) for _ in range(depth + 1)]
    net = Mlp(sizes, seed=int(rng.integers(2**31)), init="uniform")
    x = rng.normal(size=(int(rng.integers(1, 5)), sizes[0]))
    target = rng.normal(size=(len(x), sizes[-1]))

    def loss(out):
        r = out - target
        return 0.5 * float(np.sum(r * r)), r

    g = grad(net, loss, x)
    flat = net.get_flat()
    fd = np.zeros_like(flat)
    for i in range(len(flat)):
        for sign in (1, -1):
            p = flat.copy()
            p[i] += sign * h
            net.set_flat(p)
            fd[i] += sign * loss(net(x))[0]
        fd[i] /= 2 * h
    net.set_flat(flat)
    return rel_error(g, fd)


def render_fd_error(rng, camera, n=20, h=1e-5, return_skipped=False):
    """Worst relative error of renderer color/opacity gradients against central differences.

    The forward model has kinks where an alpha crosses the skip floor or the
    cap. A second estimate at ``h / 10`` flags entries whose difference
    quotient straddles one; those are left out and counted.
    """
    from conftest import random_cloud

    cloud = random_cloud(rng, n, scale=(-2.5, -1.5), colors=0.5)
    weights = rng.normal(size=(camera.height, camera.width, 3))

    def loss(c):
        return float(np.sum(render(c, camera).color.data * weights))

    def central(perturb, step):
        return (loss(perturb(step)) - loss(perturb(-step))) / (2 * step)

    def color_at(i, k):
        def perturb(step):
            colors = cloud.colors.copy()
            colors[i, k] += step
            return cloud.replace(colors=colors)
        return perturb

    def logit_at(i):
        def perturb(step):
            logits = cloud.opacity_logits.copy()
            logits[i] += step
            return cloud.replace(opacity_logits=logits)
        return perturb

    g = render_grad_color_opacity(cloud, camera, weights)
    entries = [(g.colors[i, k], color_at(i, k)) for i in range(n) for k in range(12)]
    entries += [(g.opacity_logits[i], logit_at(i)) for i in range(n)]
    analytic, numeric, skipped = [], [], 0
    for value, perturb in entries:
        fd = central(perturb, h)
        fd_fine = central(perturb, h / 10)
        if abs(fd - fd_fine) > 1e-3 * max(abs(fd), abs(fd_fine), 1e-3):
            skipped += 1
            continue
        analytic.append(value)
        numeric.append(fd)
    err = rel_error(analytic, numeric)
    return (err, skipped, len(entries)) if return_skipped else err


def ssim_bruteforce(a, b, window, sigma, c1=0.01**2, c2=0.03**2):
    """Per-pixel window sums with explicit zero padding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k1 = gaussian_kernel(window, sigma)
    k2 = np.outer(k1, k1)
    r = window // 2
    h, w, ch = a.shape
    total = 0.0
    for c in range(ch):
        for i in range(h):
            for j in range(w):
                s = {"a": 0.0, "b": 0.0, "aa": 0.0, "bb": 0.0, "ab": 0.0}
                for di in range(-r, r + 1):
                    for dj in range(-r, r + 1):
                        y, x = i + di, j + dj
                        if 0 <= y < h and 0 <= x < w:
                            wt = k2[di + r, dj + r]
                            va, vb = a[y, x, c], b[y, x, c]
                            s["a"] += wt * va
                            s["b"] += wt * vb
                            s["aa"] += wt * va * va
                            s["bb"] += wt * vb * vb
                            s["ab"] += wt * va * vb
                va_ = s["aa"] - s["a"] ** 2
                vb_ = s["bb"] - s["b"] ** 2
                cov = s["ab"] - s["a"] * s["b"]
                total += ((2 * s["a"] * s["b"] + c1) * (2 * cov + c2)) / (
                    (s["a"] ** 2 + s["b"] ** 2 + c1) * (va_ + vb_ + c2))
    return total / (h * w * ch)


def random_scene(rng, max_n=1000, spread=0.8):
    from conftest import random_cloud

    return random_cloud(rng, int(rng.integers(1, max_n + 1)), spread=spread)

