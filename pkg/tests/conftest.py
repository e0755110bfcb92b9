import numpy as np
import pytest
import torch

from dessie.body_model import as_body_model
from dessie.standin import make_stand_in_assets
from dessie.synthpipe import AssetSets


@pytest.fixture(scope="session")
def assets():
    return make_stand_in_assets(0)


@pytest.fixture(scope="session")
def body(assets):
    return as_body_model(assets, torch.float64)


@pytest.fixture(scope="session")
def sets():
    return AssetSets.stand_in(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ------------------------------------------------------------------ acceptance report
#
# Tests marked ``@pytest.mark.criterion("name")`` get one summary line each.

_CRITERIA: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    name = mark.args[0]
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        verdict = "PASS" if rep.passed else "FAIL"
        if hasattr(rep, "wasxfail"):
            verdict = "FAIL"
        detail = ""
        if not rep.passed:
            detail = (getattr(rep, "wasxfail", "") or str(rep.longrepr).strip().splitlines()[-1])[:160]
        _CRITERIA[name] = f"{verdict}  {name}" + (f"  ({detail})" if detail else "")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA.values():
            terminalreporter.write_line(line)
