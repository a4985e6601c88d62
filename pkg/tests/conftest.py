import numpy as np
import pytest

_criteria: list[tuple[str, str, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def criterion(request):
    """Attach a human-readable criterion name and measured detail to a test."""
    info = {"name": request.node.name, "detail": ""}
    request.node.user_properties.append(("criterion", info))
    return info


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        info = props["criterion"]
        status = "PASS" if report.outcome == "passed" else "FAIL"
        _criteria.append((status, info["name"], info["detail"]))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in _criteria:
        line = f"{status}  {name}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
