import pytest

_RESULTS: dict[int, tuple[str, str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


class CriterionLog:
    def __init__(self):
        self.lines: list[str] = []

    def note(self, text: str) -> None:
        self.lines.append(text)


@pytest.fixture
def criterion_log(request):
    log = CriterionLog()
    request.node._criterion_log = log
    return log


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    failed_setup = report.when == "setup" and report.failed
    if report.when != "call" and not failed_setup:
        return
    n, title = marker.args
    notes = getattr(item, "_criterion_log", CriterionLog()).lines
    if report.failed:
        msg = str(call.excinfo.value).splitlines()[0] if call.excinfo else "failed"
        notes = notes + [f"error: {msg[:200]}"]
    _RESULTS[n] = ("PASS" if report.passed else "FAIL", title, notes)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        status, title, notes = _RESULTS[n]
        detail = "; ".join(notes)
        terminalreporter.write_line(f"{status} criterion {n}: {title}" + (f" [{detail}]" if detail else ""))
