import pytest

from nmnist_snn.synth import write_dataset

_criteria: dict[str, tuple[str, str]] = {}


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    """Small synthetic dataset: 80 train and 30 test recordings."""
    return write_dataset(tmp_path_factory.mktemp("syn"), n_train=80, n_test=30, seed=5)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the summary")


def pytest_runtest_logreport(report):
    marker = report.keywords.get("criterion")
    if marker is None:
        return
    item_label = getattr(report, "criterion_label", None)
    label = item_label or report.nodeid
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        outcome = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        reason = ""
        if report.outcome == "skipped" and isinstance(report.longrepr, tuple):
            reason = report.longrepr[2]
        elif report.outcome == "failed":
            reason = str(report.longrepr).strip().splitlines()[-1][:160]
        _criteria[label] = (outcome, reason)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion_label = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_criteria, key=lambda s: (int(s.split()[0]) if s.split()[0].isdigit() else 99, s)):
        outcome, reason = _criteria[label]
        line = f"{outcome}  criterion {label}"
        if reason:
            line += f"  ({reason})"
        terminalreporter.write_line(line)
