import numpy as np
import pytest

from dynllm import diffmath as dm


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def store():
    return dm.ParameterStore(np.random.default_rng(7))


def leaf(rng, *shape, scale=1.0):
    return dm.Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


# -- acceptance summary: one PASS/FAIL line per criterion ---------------------

_criteria: dict = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1][len("test_"):]
        ok = report.outcome == "passed"
        if name not in _criteria or not ok:
            _criteria[name] = ok


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda n: int(n.split("_")[1])):
        terminalreporter.write_line(f"{name}: {'PASS' if _criteria[name] else 'FAIL'}")
