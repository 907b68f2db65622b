import pytest

from helpers import two_stage_learning_run


@pytest.fixture(scope="session")
def learning_run(tmp_path_factory):
    return two_stage_learning_run(tmp_path_factory.mktemp("learning"))


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, in criterion order."""
    outcomes = {}
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::" not in nodeid:
                continue
            name = nodeid.split("::")[-1]
            if rep.when == "call" or rep.failed:
                if outcomes.get(name) != "FAIL":
                    outcomes[name] = "PASS" if rep.passed else "FAIL"
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(outcomes):
        number, _, title = name.removeprefix("test_ac").partition("_")
        terminalreporter.write_line(f"{outcomes[name]}  criterion {int(number):2d}: {title.replace('_', ' ')}")
