import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def bar_mask(width: int, length: int = 60, pad: int = 6) -> np.ndarray:
    m = np.zeros((width + 2 * pad, length + 2 * pad), dtype=bool)
    m[pad:pad + width, pad:pad + length] = True
    return m


# --- acceptance report ----------------------------------------------------------
# Tests in test_acceptance.py carry a ``criterion`` marker; their outcome and any
# notes they record are printed as one line per criterion after the run.

_ACCEPTANCE: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def _entry(item):
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return None
    number, title = mark.args
    return _ACCEPTANCE.setdefault(item.nodeid, {"number": number, "title": title, "ok": True, "notes": []})


@pytest.fixture
def note(request):
    """Record a measured value for the acceptance summary line."""
    entry = _entry(request.node)
    return (lambda text: entry["notes"].append(text)) if entry else (lambda text: None)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    entry = _entry(item)
    if entry is not None and report.failed:
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for entry in sorted(_ACCEPTANCE.values(), key=lambda e: e["number"]):
        status = "PASS" if entry["ok"] else "FAIL"
        notes = "; ".join(entry["notes"])
        terminalreporter.write_line(f"[{status}] {entry['number']}. {entry['title']}" + (f" ({notes})" if notes else ""))
