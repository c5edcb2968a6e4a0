import numpy as np
import pytest

from slash import tensor as T

# Criterion number -> (passed, detail); filled by tests/test_acceptance.py.
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 9


@pytest.fixture
def f64():
    with T.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """``record(n, passed, detail)`` stores the outcome; call it before asserting."""
    def record(n: int, passed: bool, detail: str) -> bool:
        previous = ACCEPTANCE.get(n, (True, ""))
        joined = f"{previous[1]}; {detail}" if previous[1] else detail
        ACCEPTANCE[n] = (previous[0] and bool(passed), joined)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            passed, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: FAIL  not reached")
