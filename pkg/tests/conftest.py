import numpy as np
import pytest

from mvir import tensor as T

_ACCEPTANCE = {}


@pytest.fixture(autouse=True, scope="session")
def _strict_float64():
    T.set_default_dtype(np.float64)
    T.set_strict(True)
    yield


@pytest.fixture(scope="session")
def acceptance_log():
    """Criterion id -> (passed, detail); printed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_ACCEPTANCE):
        ok, name, detail = _ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
