import json

import numpy as np
import pytest

from clustmd.dataset import ColumnSpec, MixedDataset
from clustmd.simulate import shipped_spec, simulate

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        _ACCEPTANCE[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"{status} criterion {number:>2}: {title}")


@pytest.fixture(scope="session")
def mixed50():
    """50 rows from the shipped generator: 4 continuous, 3 ordinal, 3 nominal."""
    data, labels = simulate(shipped_spec(), seed=11)
    idx = np.arange(50)
    return MixedDataset(data.schema, data.continuous[idx], data.categorical[idx])


@pytest.fixture(scope="session")
def sim800():
    return simulate(shipped_spec(), seed=5)


@pytest.fixture
def blobs():
    """Two spherical continuous clusters ten standard deviations apart."""
    rng = np.random.default_rng(3)
    x = np.vstack([rng.normal(0, 1, (60, 3)), rng.normal(10, 1, (40, 3))])
    truth = np.repeat([1, 2], [60, 40])
    schema = tuple(ColumnSpec(f"x{k}", "continuous") for k in range(3))
    return MixedDataset(schema, x, np.zeros((100, 0), dtype=int)), truth


def write_schema(path, columns):
    path.write_text(json.dumps({"columns": columns}), encoding="utf-8")
