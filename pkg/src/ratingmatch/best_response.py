"""Per-slot effort choice against the conjectured benefit curve."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ratingmatch.functions import AgentSpec
from ratingmatch.matching import BenefitCurve, MatchingRule, benefit_curve
from ratingmatch.ratings import RatingDistribution

MERGE_TOL = 1e-12


@dataclass(frozen=True)
class BestResponseResult:
    effort: float
    objective_value: float
    segment: tuple[str, float]
    foc_residual: float
    left_derivative: float
    right_derivative: float
    n_locally_optimal: int


def bisect_decreasing(
    fn: Callable[[float], float], lo: float, hi: float, tol: float = 1e-12, max_iter: int = 200
) -> float:
    """Root of a continuous decreasing function with fn(lo) >= 0 >= fn(hi)."""
    for _ in range(max_iter):
        if hi - lo <= tol * max(1.0, abs(hi)):
            break
        mid = 0.5 * (lo + hi)
        if fn(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _stationary_effort(agent: AgentSpec, weight: float, cost_weight: float, e_hi: float) -> float:
    """Maximizer over [0, e_hi] of -cost_weight*c(e) + weight*q(e), weight > 0."""
    cc, cp = agent.cost.monomial()
    qc, qp = agent.quality.monomial()
    # cost_weight * cc*cp*e**(cp-1) = weight * qc*qp*e**(qp-1)
    ratio = weight * qc * qp / (cost_weight * cc * cp)
    if cp > qp:
        return min(ratio ** (1.0 / (cp - qp)), e_hi)

    def slope(e: float) -> float:
        return weight * agent.quality.deriv(e) - cost_weight * agent.cost.deriv(e)

    if slope(e_hi) >= 0:
        return e_hi
    return bisect_decreasing(slope, 0.0, e_hi)


def objective(
    agent: AgentSpec,
    theta: float,
    d_others: RatingDistribution,
    mu: float,
    e: float,
    M: float,
    rule: MatchingRule,
    curve: BenefitCurve | None = None,
) -> float:
    """Effort-dependent part of the per-slot objective.

    Current benefit and the conjecture offset do not depend on own effort and
    are left out.
    """
    if curve is None:
        curve = benefit_curve(rule, agent.benefit, d_others)
    x = (1.0 - mu) * theta + mu * agent.quality.value(e)
    return -(1.0 - agent.delta) * M * agent.cost.value(e) + agent.delta * agent.alpha * curve.value(x)


def best_response(
    agent: AgentSpec,
    theta: float,
    d_others: RatingDistribution,
    mu: float,
    M: float,
    rule: MatchingRule,
    curve: BenefitCurve | None = None,
) -> BestResponseResult:
    """Maximize the per-slot objective over [0, e_max].

    The objective is smooth between the efforts that land the new rating on
    one of the others' ratings, so each piece is solved from its first-order
    condition and the pieces' optima are compared with the values at the
    breakpoints. Where the curve jumps at a breakpoint, the breakpoint is
    credited with the larger one-sided limit.
    """
    if not 0.0 < mu < 1.0:
        raise ValueError(f"step size mu={mu} must lie in (0, 1)")
    if M <= 0:
        raise ValueError("review load must be positive")
    if theta < 0:
        raise ValueError("ratings are non-negative")
    if curve is None:
        curve = benefit_curve(rule, agent.benefit, d_others)

    delta, alpha = agent.delta, agent.alpha
    cost_w = (1.0 - delta) * M
    gain_w = delta * alpha
    q = agent.quality
    x0 = (1.0 - mu) * theta
    e_max = agent.e_max
    x_top = x0 + mu * q.value(e_max)

    # efforts at which the new rating crosses a knot of the curve
    breaks = [0.0]
    for v in curve.knots:
        if x0 < v < x_top:
            e = q.inverse((v - x0) / mu)
            if e - breaks[-1] > MERGE_TOL and e_max - e > MERGE_TOL:
                breaks.append(e)
    breaks.append(e_max)

    def x_of(e: float) -> float:
        return x0 + mu * q.value(e)

    def seg_value(e: float, j: int) -> float:
        return -cost_w * agent.cost.value(e) + gain_w * (curve.intercepts[j] + curve.slopes[j] * x_of(e))

    def point_value(e: float) -> float:
        return -cost_w * agent.cost.value(e) + gain_w * curve.value(x_of(e))

    def deriv(e: float, j: int) -> float:
        s = curve.slopes[j]
        # q'(0) may be infinite for concave quality; a flat piece adds nothing
        gain = gain_w * mu * s * q.deriv(e) if s != 0 else 0.0
        return -cost_w * agent.cost.deriv(e) + gain

    # candidate: (value, effort, kind, position, residual)
    cands: list[tuple[float, float, str, float, float]] = []
    seg_of: list[int] = []
    for a, b in zip(breaks[:-1], breaks[1:]):
        j = curve.interval(x_of(0.5 * (a + b)))
        seg_of.append(j)
        s = curve.slopes[j]
        if s > 0:
            e_star = _stationary_effort(agent, gain_w * mu * s, cost_w, b)
            e_star = min(max(e_star, a), b)
        else:
            e_star = a
        if a < e_star < b:
            cands.append((seg_value(e_star, j), e_star, "interior", float(j), abs(deriv(e_star, j))))
        else:
            cands.append((seg_value(e_star, j), e_star, "limit", e_star, 0.0))
    for e in breaks:
        cands.append((point_value(e), e, "point", e, 0.0))

    best_val = max(c[0] for c in cands)
    slack = 1e-14 * max(1.0, abs(best_val))
    winner = min((c for c in cands if c[0] >= best_val - slack), key=lambda c: c[1])
    value, effort, kind, pos, residual = winner

    # one-sided derivatives at the chosen effort
    idx = int(np.searchsorted(breaks, effort))
    at_break = idx < len(breaks) and abs(breaks[idx] - effort) <= MERGE_TOL
    if at_break:
        left = deriv(effort, seg_of[idx - 1]) if idx > 0 else math.nan
        right = deriv(effort, seg_of[idx]) if idx < len(seg_of) else math.nan
        x_new = x_of(effort)
        knot = curve.knot_index(x_new)
        segment = ("knot", x_new) if knot is not None else (("boundary", effort))
    else:
        j = seg_of[idx - 1]
        left = right = deriv(effort, j)
        segment = ("interior", float(j))

    n_opt = _count_local_optima(breaks, seg_of, deriv, cands)
    return BestResponseResult(
        effort=float(effort),
        objective_value=float(value),
        segment=segment,
        foc_residual=float(residual),
        left_derivative=float(left),
        right_derivative=float(right),
        n_locally_optimal=n_opt,
    )


def _count_local_optima(
    breaks: Sequence[float],
    seg_of: Sequence[int],
    deriv: Callable[[float, int], float],
    cands: Sequence[tuple[float, float, str, float, float]],
    tol: float = 1e-12,
) -> int:
    """Stationary interior points plus breakpoints with left >= 0 >= right."""
    n = sum(1 for c in cands if c[2] == "interior")
    for i, e in enumerate(breaks):
        left_ok = i == 0 or deriv(e, seg_of[i - 1]) >= -tol
        right_ok = i == len(breaks) - 1 or deriv(e, seg_of[i]) <= tol
        if left_ok and right_ok:
            n += 1
    return n


def brute_force_best_response(
    agent: AgentSpec,
    theta: float,
    d_others: RatingDistribution,
    mu: float,
    M: float,
    rule: MatchingRule,
    grid_n: int = 1_000_000,
) -> float:
    """Grid argmax of the objective; ties go to the smallest effort."""
    e = np.linspace(0.0, agent.e_max, grid_n + 1)
    vals = grid_objective(agent, theta, d_others, mu, M, rule, e)
    return float(e[int(np.argmax(vals))])


def grid_objective(
    agent: AgentSpec,
    theta: float,
    d_others: RatingDistribution,
    mu: float,
    M: float,
    rule: MatchingRule,
    e: np.ndarray,
) -> np.ndarray:
    """Objective on an effort grid, evaluated through the matching probabilities.

    Independent of ``benefit_curve``: rating levels are scored by inserting
    them into the others' distribution.
    """
    from ratingmatch.matching import conjectured_benefit
    from ratingmatch.ratings import quantize

    e = np.asarray(e, dtype=float)
    x = quantize((1.0 - mu) * theta + mu * agent.quality.values(e))
    b = _benefit_on_levels(rule, agent, x, d_others, conjectured_benefit)
    return -(1.0 - agent.delta) * M * agent.cost.values(e) + agent.delta * agent.alpha * b


def _benefit_on_levels(rule, agent, x, d_others, evaluate) -> np.ndarray:
    # Between two consecutive others' ratings the benefit is continuous,
    # monotone and flat-affine-flat (the clamp of the asymmetric rule adds at
    # most two kinks). Such a function cannot pass through five collinear
    # interior points of a span unless it is affine there, so spans are
    # bisected until that holds and filled in; knots are evaluated directly.
    levels, inverse = np.unique(x, return_inverse=True)
    out = np.empty_like(levels)
    knots = np.sort(d_others.values)
    on_knot = np.isin(levels, knots)
    for i in np.flatnonzero(on_knot):
        out[i] = evaluate(rule, agent.benefit, float(levels[i]), d_others)
    cell = np.searchsorted(knots, levels)
    cache: dict[int, float] = {}

    def f(i: int) -> float:
        if i not in cache:
            cache[i] = evaluate(rule, agent.benefit, float(levels[i]), d_others)
        return cache[i]

    def fill(i: int, j: int) -> None:
        if j - i < 8:
            for m in range(i, j + 1):
                out[m] = f(m)
            return
        idx = [i, i + (j - i) // 4, (i + j) // 2, i + 3 * (j - i) // 4, j]
        xs = levels[idx]
        ys = np.array([f(m) for m in idx])
        slope = (ys[-1] - ys[0]) / (xs[-1] - xs[0])
        line = ys[0] + slope * (xs - xs[0])
        if np.all(np.abs(ys - line) <= 1e-13 * (1.0 + np.abs(ys))):
            out[i : j + 1] = ys[0] + slope * (levels[i : j + 1] - xs[0])
            for m in idx:
                out[m] = cache[m]
            return
        mid = (i + j) // 2
        fill(i, mid)
        fill(mid, j)

    free = np.flatnonzero(~on_knot)
    if free.size:
        # runs of consecutive free levels inside the same knot interval
        breaks = np.flatnonzero((np.diff(free) != 1) | (np.diff(cell[free]) != 0)) + 1
        for run in np.split(free, breaks):
            fill(int(run[0]), int(run[-1]))
    return out[inverse]


# ---------------------------------------------------------------------------
# low initial rating trap


def trap_residual(agent: AgentSpec, mu: float, theta0: float) -> float:
    """Left derivative of the objective at q(e) = theta0 when everyone sits at theta0."""
    if theta0 == 0.0:
        return agent.delta * agent.alpha * mu * agent.quality.deriv(0.0) * agent.benefit.deriv(0.0)
    e = agent.quality.inverse(theta0)
    return (
        -(1.0 - agent.delta) * agent.cost.deriv(e)
        + agent.delta * agent.alpha * mu * agent.quality.deriv(e) * agent.benefit.value(theta0) / theta0
    )


def trap_threshold(agent: AgentSpec, mu: float, hi: float | None = None) -> float:
    """Largest common initial rating at which this agent keeps its rating unchanged."""
    if not trap_residual(agent, mu, 0.0) > 0:
        raise ValueError(f"agent {agent.agent_id}: marginal incentive at zero is not positive")
    closed = trap_threshold_closed_form(agent, mu)
    if closed is not None:
        return closed
    return trap_threshold_bisection(agent, mu, hi)


def trap_threshold_bisection(agent: AgentSpec, mu: float, hi: float | None = None) -> float:
    if hi is None:
        hi = 1.0
        while trap_residual(agent, mu, hi) > 0:
            hi *= 2.0
            if hi > 1e12:
                raise ValueError("no sign change for the trap residual")
    return bisect_decreasing(lambda t: trap_residual(agent, mu, t), 0.0, hi, tol=1e-15)


def trap_threshold_closed_form(agent: AgentSpec, mu: float) -> float | None:
    """Quadratic cost, linear quality, quadratic benefit: solve the linear equation."""
    if (
        agent.cost.family != "power_cost"
        or agent.cost.params[1] != 2.0
        or agent.quality.family != "linear_quality"
        or agent.benefit.family != "quadratic_benefit"
    ):
        return None
    cs = agent.cost.params[0]
    p = agent.quality.params[0]
    a, b = agent.benefit.params
    k = agent.delta * agent.alpha * mu * p
    # -(1-delta)*2*cs*theta/p + k*(a*theta + b) = 0
    denom = 2.0 * (1.0 - agent.delta) * cs / p - k * a
    return k * b / denom


def low_rating_threshold(agents: Sequence[AgentSpec], mu: float) -> float:
    """Largest common initial rating that freezes the whole population."""
    return min(trap_threshold(a, mu) for a in agents)
