from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ratingmatch.dynamics import Population
from ratingmatch.functions import AgentSpec, FunctionSpec
from ratingmatch.harness import Scenario, bundled, load_scenario

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

COST = FunctionSpec.power_cost(1.0, 2.0)
BENEFIT = FunctionSpec.quadratic_benefit(-1.0, 2.0)


def ten_type_agent(k: int, agent_id: int = 0, e_max: float = 1.0) -> AgentSpec:
    """Type k of the reference population: p = alpha = 0.2 k."""
    p = 0.2 * k
    return AgentSpec(agent_id, k, 0.8, p, e_max, COST, FunctionSpec.linear_quality(p), BENEFIT)


@pytest.fixture(scope="session")
def ten_types() -> Scenario:
    return load_scenario(bundled("ten_types.json"))


@pytest.fixture(scope="session")
def ten_types_small(ten_types: Scenario) -> Scenario:
    """Same types, two agents each; per-type trajectories match the full size."""
    return replace(ten_types, types=tuple(replace(t, count=2) for t in ten_types.types))


@pytest.fixture(scope="session")
def population(ten_types: Scenario) -> Population:
    return ten_types.population()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


# acceptance criteria register a one-line verdict here; printed after the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
