import numpy as np
import pytest

from semicp.cloud import PointCloud


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cloud(rng, n=200, labels=(1, 2), normals=False, scale=50.0):
    pts = rng.uniform(-scale, scale, (n, 3))
    lab = rng.choice(np.asarray(labels), n)
    lab[: len(labels)] = labels  # every label present
    nrm = None
    if normals:
        nrm = rng.standard_normal((n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    return PointCloud(pts, lab, nrm)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record(criterion: str, passed: bool, detail: str) -> bool:
    line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        terminalreporter.write_line(ACCEPTANCE[key])
