import numpy as np
import pytest

from asyndbt.config import RunConfig

ACCEPTANCE_RESULTS = []


def bisection_threshold(x, tol=1e-13):
    """Reference root of s(v) = sum(clip(x - v, 0, 1)) - 1 by plain bisection."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min() - 1.0, x.max()
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if np.clip(x - mid, 0.0, 1.0).sum() > 1.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def bisection_projection(x):
    v = bisection_threshold(x)
    return np.clip(np.asarray(x, dtype=np.float64) - v, 0.0, 1.0), v


def tiny_config(**overrides):
    d = {
        "shape": {"M": 2, "N": 3, "U": 1, "V": 2},
        "evaluator": {"kind": "table", "random": {"seed": 7}},
        "seed": 3,
        "sim": {"iterations": 30, "delta": 10},
    }
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(d.get(key), dict):
            d[key] = {**d[key], **val}
        else:
            d[key] = val
    return RunConfig.from_dict(d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
