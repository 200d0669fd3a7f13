import numpy as np
import pytest

from splat4d.core import Scene4D, random_unit_quaternions
from splat4d.raster import Camera
from splat4d.synth import DEFAULT_SPEC, generate_scene

_ACCEPTANCE_LINES = []


def random_scene(rng, n, degree=1, extent=1.0, scale=(0.05, 0.4), time_extent=(0.0, 1.0),
                 frame_count=10):
    return Scene4D(
        means=np.c_[rng.uniform(-extent, extent, (n, 3)), rng.uniform(*time_extent, n)],
        scales=rng.uniform(*scale, (n, 4)),
        q_l=random_unit_quaternions(rng, n),
        q_r=random_unit_quaternions(rng, n),
        opacity=rng.uniform(0.05, 1.0, n),
        sh=rng.normal(0.0, 0.5, (n, (degree + 1) ** 2, 3)),
        sh_degree=degree,
        time_extent=time_extent,
        frame_count=frame_count,
    )


def front_camera(width=64, height=64, distance=4.0):
    return Camera.look_at([0.0, 0.0, -distance], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0], width, height)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_scene():
    return generate_scene(DEFAULT_SPEC)


@pytest.fixture
def record_criterion():
    """Register one acceptance line; printed in the terminal summary."""

    def record(number, name, passed, detail=""):
        status = "PASS" if passed else "FAIL"
        _ACCEPTANCE_LINES.append((number, f"[{status}] criterion {number:2d}: {name} {detail}".rstrip()))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE_LINES):
        terminalreporter.write_line(line)
