from __future__ import annotations

import numpy as np
import pytest

from emtorso.geometry import LVGeometry, TorsoBox, embed_in_torso_box, generate_idealized_lv

# coarse resolution used wherever a full LV/torso run is needed inside the test budget
COARSE_LV = LVGeometry(edge=0.015)
COARSE_BOX = TorsoBox(edge=0.04)


@pytest.fixture(scope="session")
def lv_mesh():
    return generate_idealized_lv(LVGeometry())


@pytest.fixture(scope="session")
def coarse_lv():
    return generate_idealized_lv(COARSE_LV)


@pytest.fixture(scope="session")
def coarse_body(coarse_lv):
    return embed_in_torso_box(coarse_lv, COARSE_BOX)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance summary: one PASS/FAIL line per criterion -----------------------------------

_CRITERIA: dict[int, bool] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rpartition("::")[2]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed:
        n = int(name.split("_")[2])
        _CRITERIA[n] = _CRITERIA.get(n, True) and report.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if _CRITERIA[n] else 'FAIL'}")
