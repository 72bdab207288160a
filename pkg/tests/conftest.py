import numpy as np
import pytest

from epochpose.camera import camera_depths, project, rotate_azimuth
from epochpose.data import SyntheticConfig, generate
from epochpose.liftnet import DepthOracle


@pytest.fixture(scope="session")
def small_ds():
    return generate(SyntheticConfig(count=64, seed=11))


def depth_oracle(ds, theta):
    """Oracle lifter that knows the true depths of ``ds`` and of its rotated copies."""
    K, E = ds.cameras()
    r = 0
    y = ds.y_gt
    y_r = rotate_azimuth(y - y[:, r:r + 1], theta) + y[:, r:r + 1]
    oracle = DepthOracle()
    oracle.register(ds.x_gt, camera_depths(y, E))
    oracle.register(project(y_r, K, E), camera_depths(y_r, E))
    return oracle


# criterion number -> list of (part, ok, detail); filled by test_acceptance
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def acceptance():
    def record(n, part, ok, detail):
        ACCEPTANCE.setdefault(n, []).append((part, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'} criterion {n} {part}: {detail}")
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p[1] for p in parts)
        body = "; ".join(f"{name}: {detail}{'' if good else ' (FAILED)'}"
                         for name, good, detail in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {body}")
