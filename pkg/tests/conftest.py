"""Shared pytest hooks: acceptance lines are echoed live and repeated in the terminal summary."""
import pytest

_LINES: dict[str, str] = {}


@pytest.fixture(scope="session")
def acceptance_report(pytestconfig):
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    def record(criterion: int, passed: bool, detail: str) -> None:
        line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES[f"{criterion:02d}"] = line
        with capman.global_and_fixture_disabled():
            print(f"\n    {line}", flush=True)

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_LINES):
            terminalreporter.write_line(_LINES[key])
