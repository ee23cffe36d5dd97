import numpy as np
import pytest

_RESULTS: dict[str, list[tuple[str, str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(label, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    label = getattr(report, "acceptance", None)
    if label is None:
        return
    _RESULTS.setdefault(label[0], []).append((label[1], report.outcome))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        outcome.get_result().acceptance = mark.args


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")

    def order(label):
        head = "".join(ch for ch in label if ch.isdigit())
        return (int(head or 0), label)

    for label in sorted(_RESULTS, key=order):
        rows = _RESULTS[label]
        ok = all(o == "passed" for _, o in rows)
        terminalreporter.write_line(f"criterion {label:>3}: {'PASS' if ok else 'FAIL'}  {rows[0][0]}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
