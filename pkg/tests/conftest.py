import numpy as np
import pytest

from longireg.volume import Grid3


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smooth_field(rng, dims, amp=0.6, sigma=2.0):
    """Random smooth displacement array of shape (3,) + dims."""
    from scipy.ndimage import gaussian_filter

    u = np.stack([gaussian_filter(rng.normal(size=dims), sigma, mode="wrap") for _ in range(3)])
    return amp * u / np.abs(u).max()


def grid(n, spacing=(1.0, 1.0, 1.0)):
    return Grid3((n, n, n), spacing)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    """Store a one-line verdict; lines are echoed in the terminal summary."""
    line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
