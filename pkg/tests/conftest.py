import numpy as np
import pytest

from splathead.core import Camera
from splathead.gaussians import GaussianCloud


def random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_cloud(rng, n, spread=0.6, depth=0.0, scale=(-3.5, -2.0), colors=0.8):
    """Gaussians around the origin, sized for a camera a few units away."""
    pos = rng.uniform(-spread, spread, size=(n, 3))
    pos[:, 2] += depth
    return GaussianCloud.create(
        pos,
        log_scales=rng.uniform(*scale, size=(n, 3)),
        rotations=random_quats(rng, n),
        opacity_logits=rng.uniform(-2.0, 3.0, size=n),
        colors=rng.normal(scale=colors, size=(n, 12)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_camera():
    return Camera.looking_at_origin(3.0, 32, 32, 40.0)


# --------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion in the terminal summary

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    _CRITERIA.append((number, f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else "")))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA):
        terminalreporter.write_line(line)
