import numpy as np
import pytest
import torch

from latentview.camera import Camera, look_at

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, text): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is None:
        return
    key = (m.args[0], m.args[1])
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        prev = _ACCEPTANCE.get(key, True)
        _ACCEPTANCE[key] = prev and rep.outcome == "passed"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for (num, text), ok in sorted(_ACCEPTANCE.items()):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  AC{num:>2}  {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_camera(rng, size=(128, 128), radius=3.0):
    az = rng.uniform(0, 2 * np.pi)
    eye = (radius * np.cos(az), radius * np.sin(az), rng.uniform(0.5, 2.0))
    R, t = look_at(eye, (0.0, 0.0, 0.2))
    f = rng.uniform(0.8, 1.5) * size[1]
    return Camera.from_intrinsics(f, f * rng.uniform(0.95, 1.05), size[1] / 2 + rng.uniform(-3, 3),
                                  size[0] / 2 + rng.uniform(-3, 3), R, t, size)


@pytest.fixture
def make_camera():
    return random_camera


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)
