"""Shared fixtures: one toy2d sweep per session, run through the CLI."""

import pytest

from dplc.cli import main

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance():
    """``acceptance(n, ok, detail)`` records and prints one verdict line."""

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


@pytest.fixture(scope="session")
def toy_sweep_dir(tmp_path_factory):
    """Run directory of ``dplc sweep --preset toy2d`` (about six minutes on one core)."""
    root = tmp_path_factory.mktemp("toy")
    assert main(["sweep", "--preset", "toy2d", "--out", str(root)]) == 0
    (run_dir,) = root.glob("sweep_*")
    return run_dir
