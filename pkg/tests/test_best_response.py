from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import BENEFIT, COST, ten_type_agent
from ratingmatch.best_response import (
    best_response,
    brute_force_best_response,
    grid_objective,
    low_rating_threshold,
    objective,
    trap_threshold,
    trap_threshold_bisection,
    trap_threshold_closed_form,
)
from ratingmatch.functions import AgentSpec, FunctionSpec
from ratingmatch.matching import MatchingRule, conjectured_benefit
from ratingmatch.ratings import from_values

RULES = [
    MatchingRule.baseline(),
    MatchingRule.long_range(0.3, 0.6),
    MatchingRule.long_range(0.5, 0.0),
    MatchingRule.rating_independent(),
    MatchingRule.asymmetric(0.1),
    MatchingRule.asymmetric(-0.05),
    MatchingRule.asymmetric(0.5),
    MatchingRule.asymmetric(-0.2),
]
CONTINUOUS = [MatchingRule.baseline(), MatchingRule.rating_independent()]


def random_instance(rng: np.random.Generator, rule: MatchingRule):
    """A random agent (mixed families), own rating, others and load."""
    p = rng.uniform(0.2, 2)
    cost = FunctionSpec.power_cost(rng.uniform(0.5, 2), float(rng.choice([2.0, 3.0, 1.5])))
    quality = FunctionSpec.linear_quality(p) if rng.random() < 0.7 else FunctionSpec.concave_power_quality(p, 0.5)
    benefit = BENEFIT if rng.random() < 0.7 else FunctionSpec.linear_benefit(1.0)
    agent = AgentSpec(0, 0, rng.uniform(0.5, 0.95), rng.uniform(0.2, 2), float(rng.uniform(0.5, 1.5)), cost, quality, benefit)
    K = int(rng.integers(1, 8))
    values = np.unique(np.round(rng.uniform(0.01, 1.5, K), 6))[::-1]
    d = from_values(values, rng.integers(1, 4, len(values)))
    return agent, float(rng.uniform(0, 1.5)), d, float(rng.uniform(0.05, 0.6)), float(rng.uniform(0.5, 3)), rule


def instances(n: int, seed: int, rules=RULES):
    rng = np.random.default_rng(seed)
    return [random_instance(rng, rules[i % len(rules)]) for i in range(n)]


def test_objective_hand_computed():
    agent = ten_type_agent(5)  # p = alpha = 1, delta = 0.8
    d = from_values([0.4, 0.2])
    # new rating 0.9*0.3 + 0.1*0.5 = 0.32, a fraction 0.6 of the way from 0.2 to 0.4
    b_lo, b_hi = -0.04 + 0.4, -0.16 + 0.8
    expected = -0.2 * 1.0 * 0.25 + 0.8 * 1.0 * (0.6 * b_hi + 0.4 * b_lo)
    assert expected == pytest.approx(0.3724, abs=1e-15)
    assert objective(agent, 0.3, d, 0.1, 0.5, 1.0, MatchingRule.baseline()) == pytest.approx(expected, abs=1e-14)


def test_objective_at_zero_effort():
    agent = ten_type_agent(3)
    d = from_values([0.9, 0.5, 0.2])
    for rule in RULES:
        want = agent.delta * agent.alpha * conjectured_benefit(rule, agent.benefit, 0.9 * 0.4, d)
        assert objective(agent, 0.4, d, 0.1, 0.0, 1.0, rule) == pytest.approx(want, abs=1e-14)


def test_rating_independent_objective_decreasing_and_zero_effort():
    rule = MatchingRule.rating_independent()
    for agent, th, d, mu, M, _ in instances(50, 1):
        vals = [objective(agent, th, d, mu, e, M, rule) for e in np.linspace(0, agent.e_max, 50)]
        assert np.all(np.diff(vals) < 0)
        assert best_response(agent, th, d, mu, M, rule).effort == 0.0


def test_input_errors():
    agent = ten_type_agent(1)
    d = from_values([0.5])
    for mu in (0.0, 1.0, 1.5):
        with pytest.raises(ValueError):
            best_response(agent, 0.3, d, mu, 1.0, MatchingRule.baseline())
    with pytest.raises(ValueError):
        best_response(agent, 0.3, d, 0.1, 0.0, MatchingRule.baseline())
    with pytest.raises(ValueError):
        best_response(agent, -0.1, d, 0.1, 1.0, MatchingRule.baseline())


def test_oracle_agreement_fine_grid():
    """Within two grid steps of a one-million-point grid on 200 instances."""
    for agent, th, d, mu, M, rule in instances(200, 2024):
        r = best_response(agent, th, d, mu, M, rule)
        g = brute_force_best_response(agent, th, d, mu, M, rule, grid_n=1_000_000)
        assert abs(r.effort - g) <= 2 * agent.e_max / 1e6, (rule.label, r, g)
        assert 0.0 <= r.effort <= agent.e_max


def test_grid_objective_matches_direct_objective():
    for agent, th, d, mu, M, rule in instances(40, 8):
        e = np.linspace(0, agent.e_max, 2001)
        grid = grid_objective(agent, th, d, mu, M, rule, e)
        direct = np.array([objective(agent, th, d, mu, float(v), M, rule) for v in e])
        # the direct objective does not quantize the new rating
        assert np.max(np.abs(grid - direct)) <= 1e-9


def test_uniqueness_continuous_rules():
    for agent, th, d, mu, M, rule in instances(1000, 9, CONTINUOUS):
        assert best_response(agent, th, d, mu, M, rule).n_locally_optimal == 1


def test_optimality_conditions():
    for agent, th, d, mu, M, rule in instances(300, 4):
        r = best_response(agent, th, d, mu, M, rule)
        if r.segment[0] == "interior":
            assert r.foc_residual <= 1e-9
        elif rule in CONTINUOUS:
            if r.effort > 0:
                assert r.left_derivative >= -1e-9
            if r.effort < agent.e_max:
                assert r.right_derivative <= 1e-9


def test_continuity_in_others_ratings():
    rng = np.random.default_rng(17)
    checked = 0
    for agent, th, d, mu, M, rule in instances(300, 5, CONTINUOUS):
        r = best_response(agent, th, d, mu, M, rule)
        if r.segment[0] == "knot":
            continue  # optimum pinned to a migrating breakpoint
        k = int(rng.integers(0, d.K))
        values = d.values.copy()
        values[k] += 1e-6
        if np.any(np.diff(values) >= 0):
            continue
        moved = best_response(agent, th, from_values(values, d.counts), mu, M, rule)
        assert abs(moved.effort - r.effort) <= 1e-3
        checked += 1
    assert checked > 100


def test_grid_refinement_is_monotone():
    for agent, th, d, mu, M, rule in instances(20, 6):
        coarse = brute_force_best_response(agent, th, d, mu, M, rule, grid_n=100_000)
        fine = brute_force_best_response(agent, th, d, mu, M, rule, grid_n=200_000)
        assert abs(fine - coarse) <= agent.e_max / 100_000 + 1e-15


def test_unimodal_on_grid_baseline():
    for agent, th, d, mu, M, rule in instances(50, 12, [MatchingRule.baseline()]):
        vals = grid_objective(agent, th, d, mu, M, rule, np.linspace(0, agent.e_max, 5001))
        i = int(np.argmax(vals))
        assert np.all(np.diff(vals[: i + 1]) >= -1e-12)
        assert np.all(np.diff(vals[i:]) <= 1e-12)


def test_trap_common_rating_reproduces_itself():
    mu = 0.1
    agents = [ten_type_agent(k) for k in range(1, 11)]
    theta0 = 0.9 * low_rating_threshold(agents, mu)
    others = from_values([theta0], [19])
    for a in agents:
        r = best_response(a, theta0, others, mu, 1.0, MatchingRule.baseline())
        assert abs(a.quality.value(r.effort) - theta0) <= 1e-10
        assert abs(r.effort - brute_force_best_response(a, theta0, others, mu, 1.0, MatchingRule.baseline())) <= 2e-6


def test_threshold_closed_form_example():
    assert trap_threshold(ten_type_agent(5), 0.1) == pytest.approx(1 / 3, abs=1e-15)


@pytest.mark.parametrize("k", range(1, 11))
@pytest.mark.parametrize("mu", [0.05, 0.1, 0.3, 0.6])
def test_threshold_closed_form_vs_bisection(k, mu):
    a = ten_type_agent(k)
    p = 0.2 * k
    formula = 2 * 0.8 * p * mu * p**2 / (2 * 0.2 + 0.8 * p * mu * p**2)
    assert trap_threshold_closed_form(a, mu) == pytest.approx(formula, abs=1e-12)
    assert abs(trap_threshold_bisection(a, mu) - formula) <= 1e-9


def test_threshold_vanishes_with_step_size():
    a = ten_type_agent(10)
    assert trap_threshold(a, 1e-9) < 1e-7
    assert trap_threshold(a, 1e-3) < trap_threshold(a, 1e-2) < trap_threshold(a, 1e-1)


def test_threshold_bisection_for_other_families():
    a = AgentSpec(0, 0, 0.8, 1.0, 1.0, FunctionSpec.power_cost(1.0, 3.0), FunctionSpec.concave_power_quality(1.0, 0.5), BENEFIT)
    assert trap_threshold_closed_form(a, 0.2) is None
    th = trap_threshold(a, 0.2)
    others = from_values([0.5 * th], [3])
    r = best_response(a, 0.5 * th, others, 0.2, 1.0, MatchingRule.baseline())
    assert abs(a.quality.value(r.effort) - 0.5 * th) <= 1e-9


def test_threshold_requires_positive_incentive_at_zero():
    a = AgentSpec(0, 0, 0.8, 1.0, 1.0, COST, FunctionSpec.linear_quality(1.0), FunctionSpec.quadratic_benefit(-1.0, 0.0))
    with pytest.raises(ValueError):
        trap_threshold(a, 0.1)


def test_population_threshold_is_min_over_types():
    agents = [ten_type_agent(k) for k in range(1, 11)]
    per_type = [trap_threshold(a, 0.1) for a in agents]
    assert low_rating_threshold(agents, 0.1) == min(per_type) == per_type[0]


@given(
    st.integers(1, 10),
    st.floats(0.0, 1.4),
    st.lists(st.floats(0.01, 1.5), min_size=1, max_size=6, unique=True),
    st.floats(0.02, 0.9),
)
def test_best_response_beats_samples(k, th, others, mu):
    agent = ten_type_agent(k)
    d = from_values(np.unique(np.round(others, 9))[::-1])
    rule = MatchingRule.baseline()
    r = best_response(agent, th, d, mu, 1.0, rule)
    assert math.isclose(r.objective_value, objective(agent, th, d, mu, r.effort, 1.0, rule), abs_tol=1e-12)
    for e in np.linspace(0, agent.e_max, 41):
        assert objective(agent, th, d, mu, float(e), 1.0, rule) <= r.objective_value + 1e-12
