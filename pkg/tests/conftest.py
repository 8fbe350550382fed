import numpy as np
import pytest

from vlrl import tensor as T


@pytest.fixture(autouse=True)
def _f64_and_clean_tape():
    T.set_precision("f64")
    T.get_tape().clear()
    T.reset_diagnostics()
    yield
    T.get_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_acceptance_lines: list[str] = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per acceptance criterion."""
    def record(criterion: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
        _acceptance_lines.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
