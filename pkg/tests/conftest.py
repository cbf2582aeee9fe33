import numpy as np
import pytest

from flow4d.phantom import generate_subject, render_frame

SMALL_DIMS = (16, 16, 24)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_grids():
    return [render_frame(generate_subject(s, SMALL_DIMS), t, 8) for s in range(4) for t in (1, 3, 5, 7)]


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(RESULTS, key=lambda k: int(k[1:])):
        passed, detail = RESULTS[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}  {detail}")
