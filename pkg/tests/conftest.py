"""Shared fixtures: geometry, a small simulated dataset, compiled-kernel warmup.

The acceptance tests register one line per criterion through the
``acceptance`` fixture; ``pytest_terminal_summary`` prints the table after
the run so pass/fail status is visible at a glance.
"""

import numpy as np
import pytest

from ctmar.geometry import preset
from ctmar.physics import make_spectrum, simulate_sample
from ctmar.projector import adjoint_project, fbp, forward_project

ACCEPTANCE = {}


def _record(num, label, ok, detail=""):
    ACCEPTANCE[num] = (label, bool(ok), detail)


@pytest.fixture(scope="session")
def acceptance():
    """Callable (criterion_number, label, ok, detail) -> None."""
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        label, ok, detail = ACCEPTANCE[num]
        status = "PASS" if ok else "FAIL"
        line = f"[{status}] criterion {num:2d}: {label}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk():
    return preset("desk")


@pytest.fixture(scope="session")
def spectrum():
    return make_spectrum()


@pytest.fixture(scope="session", autouse=True)
def warm_kernels(desk):
    # compile the jitted projector kernels once so timed tests measure
    # steady-state speed, not compilation
    img = np.zeros((desk.image_size, desk.image_size))
    sino = forward_project(img, desk)
    adjoint_project(sino, desk)
    fbp(sino, desk)


@pytest.fixture(scope="session")
def desk_samples(desk, spectrum):
    """Eight noisy desk-scale samples, fixed seeds."""
    return [simulate_sample(desk, spectrum, seed=i, noise=True) for i in range(8)]


@pytest.fixture(scope="session")
def clean_samples(desk, spectrum):
    """Noise-free variants used by exactness-style tests."""
    return [simulate_sample(desk, spectrum, seed=i, noise=False) for i in range(4)]
