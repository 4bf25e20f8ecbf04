import re

_LINES: dict[int, str] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", report.nodeid)
    if not m or report.when != "call":
        return
    props = dict(report.user_properties)
    status = "PASS" if report.passed else "FAIL"
    if "detail" not in props and report.failed:
        props["detail"] = str(report.longrepr).strip().splitlines()[-1]
    _LINES[int(m.group(1))] = f"[{status}] criterion {int(m.group(1)):>2}: {props.get('title', '')}  ({props.get('detail', '')})"


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_LINES):
            terminalreporter.write_line(_LINES[n])
