import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from freqmark.codec import forge_watermark_split
from freqmark.data import synth_dataset
from freqmark.train import TrainConfig, train

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def tiny():
    """A 3-class, 8-per-class set for fast checks."""
    return synth_dataset(3, 8, 32, seed=11)


@pytest.fixture(scope="session")
def tiny_split(tiny):
    holdout = synth_dataset(3, 4, 32, seed=12)
    holdout = holdout.replace(ids=holdout.ids + 10_000)
    return forge_watermark_split(tiny, 0.25, 90, 0, 5, holdout)


@pytest.fixture(scope="session")
def tiny_model(tiny_split):
    dp, dw, dv = tiny_split
    ck, history = train(TrainConfig(epochs=2, p=0.0), dp, dw, None, verification=dv)
    return ck


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance criteria: one PASS/FAIL line each in the terminal summary

_LINES = pytest.StashKey[dict]()
_DETAIL = pytest.StashKey[str]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")
    config.stash[_LINES] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    status = "PASS" if rep.passed else "FAIL"
    line = f"criterion {number:>2} {status}  {title}: {item.stash.get(_DETAIL, '')}"
    item.config.stash[_LINES][number] = line
    print("\n" + line)


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])


@pytest.fixture
def detail(request):
    """Call with a short measurement summary; shown on the criterion's line."""
    def record(text: str) -> None:
        request.node.stash[_DETAIL] = text
    return record
