import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, passed: bool | None, detail: str) -> None:
    """Remember one acceptance line; ``passed=None`` marks an informational line."""
    tag = "INFO" if passed is None else ("PASS" if passed else "FAIL")
    ACCEPTANCE_LINES.append(f"[{tag}] {label}: {detail}")
    print(ACCEPTANCE_LINES[-1])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
