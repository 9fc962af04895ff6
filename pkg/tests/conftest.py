import sys

import numpy as np
import pytest


def pytest_terminal_summary(terminalreporter):
    # the acceptance module records one verdict line per criterion; echo
    # them after the run so they survive output capture
    for name in ("tests.test_acceptance", "test_acceptance"):
        mod = sys.modules.get(name)
        if mod is not None and getattr(mod, "VERDICTS", None):
            terminalreporter.section("acceptance criteria")
            for line in mod.VERDICTS:
                terminalreporter.write_line(line)
            break


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def max_rel_err(a, b, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def fd_grad(f, x, eps: float = 1e-5):
    """Central-difference gradient of scalar f at array x, every coordinate."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        up = f(x)
        x[i] = orig - eps
        down = f(x)
        x[i] = orig
        g[i] = (up - down) / (2 * eps)
    return g
