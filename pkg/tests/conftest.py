import numpy as np
import pytest

from powdr import _backend


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def backends():
    names = ["python"]
    if _backend.compiled_available():
        names.append("compiled")
    return names


@pytest.fixture(params=backends())
def backend(request):
    return request.param


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
