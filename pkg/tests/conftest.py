import numpy as np
import pytest

from retinatrack import phantom as ph
from retinatrack.canonical import build_space
from retinatrack.features import extract


@pytest.fixture(scope="session")
def retina():
    return ph.generate_phantom(7, 0.5)


@pytest.fixture(scope="session")
def cal():
    return ph.Calibration()


@pytest.fixture(scope="session")
def clean_scan(retina, cal):
    return ph.grid_scan(retina, cal, ph.NEUTRAL)


@pytest.fixture(scope="session")
def clean_build(clean_scan, cal):
    s = clean_scan
    return build_space(s.frames, s.edges, s.central, cal)


@pytest.fixture(scope="session")
def central_features(clean_scan):
    return extract(clean_scan.frames[clean_scan.central])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report():
    """Record (and print) a one-line verdict for an acceptance criterion."""

    def _report(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
