from __future__ import annotations

import pytest

from kiterunner.diffusion_lp import make_trajectory_dataset, train_noise_predictor


@pytest.fixture(scope="session")
def toy_planner():
    """Quickly trained planner for contract tests (not for competence)."""
    data = make_trajectory_dataset(300, seed=3, bend=2.0)
    return train_noise_predictor(data, epochs=15, seed=4)


@pytest.fixture(scope="session")
def lp_planner():
    """The planner the benchmark trains for master seed 0."""
    from kiterunner.sim_env import default_planner
    return default_planner(0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record a pass/fail line for the acceptance summary, then assert."""
    def check(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
