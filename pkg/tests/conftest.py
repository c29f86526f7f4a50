import numpy as np
import pytest

from sgpopgd.kernels import KernelSpec
from sgpopgd.shape_gp import DerivativeGrid, GpPrior, ObservationSet


def quad(x, a=0.5, c=2.0):
    return a * (np.asarray(x) - c) ** 2


@pytest.fixture
def quad_fixture():
    """21 noisy samples of 0.5 (x - 2)^2 on [-8, 8], fitted with a wide prior."""
    rng = np.random.default_rng(3)
    xs = np.linspace(-8, 8, 21)
    zs = quad(xs) + rng.normal(0, 0.5, xs.size)
    prior = GpPrior(0.0, KernelSpec(1e4, 10.0, 0.25))
    grid = DerivativeGrid.uniform(-8, 8, 10, 0.1, 10.0)
    return prior, ObservationSet(xs, zs), grid


ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def record(criterion: int, ok: bool, detail: str) -> None:
    """Log one acceptance outcome; also printed in the terminal summary."""
    ACCEPTANCE_RESULTS.append((criterion, bool(ok), detail))
    print(f"criterion {criterion}: {'PASS' if ok else 'FAIL'} | {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria suite")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {crit}: {'PASS' if ok else 'FAIL'} | {detail}")
