"""Best-response dynamics, equilibrium checks and designer objectives."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Callable, Literal, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ratingmatch.best_response import best_response
from ratingmatch.functions import AgentSpec, FunctionSpec, is_more_capable
from ratingmatch.matching import (
    MatchingRule,
    conjectured_benefit,
    probability_matrix,
    review_loads,
    sample_assignment,
)
from ratingmatch.ratings import RatingDistribution, distribution, quantize, remove_agent

Mode = Literal["expected", "sampled"]


@dataclass(frozen=True)
class Population:
    agents: tuple[AgentSpec, ...]

    def __post_init__(self) -> None:
        ids = [a.agent_id for a in self.agents]
        if ids != list(range(len(ids))):
            raise ValueError("agent ids must be 0..N-1 in order")

    @classmethod
    def from_types(cls, types: Sequence[tuple[AgentSpec, int]]) -> Population:
        """Expand (template, count) pairs; template ids are ignored."""
        agents = []
        for template, count in types:
            for _ in range(count):
                agents.append(replace(template, agent_id=len(agents)))
        return cls(tuple(agents))

    @property
    def N(self) -> int:
        return len(self.agents)

    @property
    def type_ids(self) -> list[int]:
        return sorted({a.type_id for a in self.agents})

    def type_index(self) -> NDArray[np.int64]:
        lookup = {t: n for n, t in enumerate(self.type_ids)}
        return np.array([lookup[a.type_id] for a in self.agents], dtype=np.int64)

    def representative(self, type_id: int) -> AgentSpec:
        return next(a for a in self.agents if a.type_id == type_id)

    @cached_property
    def _groups(self) -> dict[str, list[tuple[FunctionSpec, NDArray[np.int64]]]]:
        out = {}
        for attr in ("cost", "quality", "benefit"):
            specs: dict[FunctionSpec, list[int]] = {}
            for a in self.agents:
                specs.setdefault(getattr(a, attr), []).append(a.agent_id)
            out[attr] = [(spec, np.array(ids, dtype=np.int64)) for spec, ids in specs.items()]
        return out

    def apply(self, attr: str, x: ArrayLike) -> NDArray[np.float64]:
        """Each agent's ``attr`` function ("cost", "quality", "benefit") at its own argument."""
        x = np.asarray(x, dtype=float)
        out = np.empty(self.N)
        for spec, ids in self._groups[attr]:
            out[ids] = spec.values(x[ids])
        return out

    def benefit_groups(self) -> list[tuple[FunctionSpec, NDArray[np.int64]]]:
        return self._groups["benefit"]

    @cached_property
    def alphas(self) -> NDArray[np.float64]:
        return np.array([a.alpha for a in self.agents])

    def quality_of(self, efforts: ArrayLike) -> NDArray[np.float64]:
        return self.apply("quality", efforts)

    def effort_for_rating(self, ratings: ArrayLike) -> NDArray[np.float64]:
        """Effort that reproduces each rating, capped at each agent's maximum."""
        out = []
        for a, th in zip(self.agents, ratings):
            out.append(min(a.quality.inverse(float(th)), a.e_max))
        return np.array(out)


@dataclass(frozen=True, eq=False)
class DynamicsState:
    t: int
    ratings: NDArray[np.float64]
    betas: NDArray[np.float64]
    efforts: NDArray[np.float64]
    mode: Mode = "expected"
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("expected", "sampled"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "sampled" and self.seed is None:
            raise ValueError("sampled mode needs a seed")
        if np.any(self.ratings < 0):
            raise ValueError("ratings are non-negative")

    @classmethod
    def initial(
        cls, population: Population, theta0: float | ArrayLike, mode: Mode = "expected", seed: int | None = None
    ) -> DynamicsState:
        theta = np.broadcast_to(np.asarray(theta0, dtype=float), (population.N,)).copy()
        z = np.zeros(population.N)
        return cls(0, quantize(theta), z, z.copy(), mode, seed)


# ---------------------------------------------------------------------------
# one slot


@dataclass(frozen=True)
class _RankTables:
    dist: RatingDistribution
    loads: NDArray[np.float64]
    matrix: NDArray[np.float64]


def _tables(rule: MatchingRule, ratings: NDArray[np.float64]) -> _RankTables:
    d = distribution(ratings)
    return _RankTables(d, review_loads(rule, d), probability_matrix(rule, d))


def best_responses(
    population: Population,
    ratings: NDArray[np.float64],
    rule: MatchingRule,
    mu: float,
    fast: bool = True,
    tables: _RankTables | None = None,
) -> NDArray[np.float64]:
    """Every agent's effort against the current ratings.

    With ``fast`` the solver runs once per (type, rank) pair, since agents
    sharing both face the same problem.
    """
    tab = tables or _tables(rule, ratings)
    d = tab.dist
    efforts = np.empty(population.N)
    cache: dict[tuple[int, int], float] = {}
    for i, agent in enumerate(population.agents):
        k = int(d.ranks[i])
        key = (agent.type_id, k)
        if fast and key in cache:
            efforts[i] = cache[key]
            continue
        M = float(tab.loads[k - 1])
        if M <= 0:
            e = 0.0
        else:
            d_others = remove_agent(d, k)
            e = best_response(agent, float(ratings[i]), d_others, mu, M, rule).effort
        efforts[i] = e
        cache[key] = e
    return efforts


def expected_payoffs(
    population: Population,
    ratings: NDArray[np.float64],
    efforts: NDArray[np.float64],
    rule: MatchingRule,
    tables: _RankTables | None = None,
) -> NDArray[np.float64]:
    """Per-agent expected benefit from its reviewer minus expected reviewing cost.

    A product sent to rank r is reviewed by a uniform agent of rank r other
    than its owner, so the benefit averages over those agents' qualities.
    """
    tab = tables or _tables(rule, ratings)
    d = tab.dist
    ranks = d.ranks - 1
    quality = population.quality_of(efforts)
    counts = d.counts.astype(float)
    rows = tab.matrix[ranks]
    own_p = rows[np.arange(population.N), ranks]
    u = np.empty(population.N)
    for spec, ids in population.benefit_groups():
        bq = spec.values(quality)
        sums = np.bincount(ranks, weights=bq, minlength=d.K)
        k = ranks[ids]
        others = counts[k] - 1.0
        mean_own = np.divide(sums[k] - bq[ids], others, out=np.zeros(len(ids)), where=others > 0)
        u[ids] = rows[ids] @ (sums / counts) + own_p[ids] * (mean_own - sums[k] / counts[k])
    cost = population.apply("cost", efforts)
    return u - tab.loads[ranks] * cost


def conjectured_benefits(
    population: Population,
    ratings: NDArray[np.float64],
    efforts: NDArray[np.float64],
    rule: MatchingRule,
    mu: float,
    dist: RatingDistribution | None = None,
) -> NDArray[np.float64]:
    """Each agent's conjectured next-slot benefit given its chosen effort."""
    d = dist or distribution(ratings)
    x = quantize((1.0 - mu) * np.asarray(ratings) + mu * population.quality_of(efforts))
    out = np.empty(population.N)
    cache: dict[tuple, float] = {}
    for i, a in enumerate(population.agents):
        k = int(d.ranks[i])
        key = (a.benefit, k, float(x[i]))
        if key not in cache:
            cache[key] = conjectured_benefit(rule, a.benefit, key[2], remove_agent(d, k))
        out[i] = cache[key]
    return out


def step(
    state: DynamicsState,
    population: Population,
    rule: MatchingRule,
    mu: float,
    fast: bool = True,
) -> DynamicsState:
    """Efforts, then ratings, then conjecture offsets, all from the slot-t snapshot."""
    if not 0.0 < mu < 1.0:
        raise ValueError(f"step size mu={mu} must lie in (0, 1)")
    theta = state.ratings
    tab = _tables(rule, theta)
    efforts = best_responses(population, theta, rule, mu, fast=fast, tables=tab)
    quality = population.quality_of(efforts)
    loads = tab.loads[tab.dist.ranks - 1]

    if state.mode == "expected":
        # a reviewer's rating moves with the probability that it reviews
        weight = np.minimum(loads, 1.0)
        new_theta = theta + weight * mu * (quality - theta)
        payoff = expected_payoffs(population, theta, efforts, rule, tab)
    else:
        seed = np.random.SeedSequence([int(state.seed), state.t])
        assignment = sample_assignment(rule, theta, seed, tab.dist)
        reviewed = assignment.reviewed()
        new_theta = np.where(reviewed, (1.0 - mu) * theta + mu * quality, theta)
        payoff = _realized_payoffs(population, efforts, quality, assignment.reviewer_of, assignment.review_load)

    bbar = conjectured_benefits(population, theta, efforts, rule, mu, tab.dist)
    betas = payoff - population.alphas * bbar
    return DynamicsState(state.t + 1, quantize(new_theta), betas, efforts, state.mode, state.seed)


def _realized_payoffs(population, efforts, quality, reviewer_of, review_load) -> NDArray[np.float64]:
    u = np.empty(population.N)
    for i, a in enumerate(population.agents):
        j = reviewer_of[i]
        benefit = 0.0 if j is None else a.benefit.value(float(quality[j]))
        u[i] = benefit - review_load[i] * a.cost.value(float(efforts[i]))
    return u


# ---------------------------------------------------------------------------
# runs


@dataclass(frozen=True)
class TraceRow:
    t: int
    rating_mean: NDArray[np.float64]
    rating_min: NDArray[np.float64]
    rating_max: NDArray[np.float64]
    effort_mean: NDArray[np.float64]
    l1_delta: float
    rho: float
    sum_quality: float
    welfare: float


@dataclass(frozen=True)
class Verdict:
    kind: Literal["converged", "oscillating", "max_iters"]
    t: int
    period: int | None = None

    @property
    def converged(self) -> bool:
        return self.kind == "converged"


@dataclass
class RunOutcome:
    verdict: Verdict
    trace: list[TraceRow]
    final: DynamicsState
    ce_report: CeReport | None
    type_ids: list[int]
    initial: DynamicsState | None = None
    notes: list[str] = field(default_factory=list)

    def rating_series(self, type_pos: int) -> NDArray[np.float64]:
        return np.array([r.rating_mean[type_pos] for r in self.trace])


def _per_type(values: NDArray[np.float64], tidx: NDArray[np.int64], n_types: int, fn) -> NDArray[np.float64]:
    return np.array([fn(values[tidx == k]) for k in range(n_types)])


def run(
    state0: DynamicsState,
    population: Population,
    rule: MatchingRule,
    mu: float,
    tol: float = 1e-8,
    max_iters: int = 10_000,
    fast: bool = True,
    confirm: int = 10,
    window: int = 200,
    check_ce: bool = True,
) -> RunOutcome:
    """Iterate ``step`` until the ratings settle, cycle, or the budget runs out.

    Converged: the L1 rating change stays below ``tol`` for ``confirm``
    consecutive slots. Oscillating (heuristic): over the last ``window``
    slots the change never dropped below its value at the window start, it
    stays above ``10 * tol``, and the current profile is within ``tol`` of a
    profile seen inside the window.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    tidx = population.type_index()
    nt = len(population.type_ids)
    trace: list[TraceRow] = []
    recent: deque[NDArray[np.float64]] = deque(maxlen=window)
    deltas: deque[float] = deque(maxlen=window + 1)
    state = state0
    prev_delta = math.nan
    quiet = 0
    verdict = Verdict("max_iters", max_iters)
    recent.append(state.ratings)
    for _ in range(max_iters):
        new = step(state, population, rule, mu, fast=fast)
        delta = float(np.abs(new.ratings - state.ratings).sum())
        rho = delta / prev_delta if prev_delta and prev_delta > 0 else math.nan
        quality = population.quality_of(new.efforts)
        welfare = float(expected_payoffs(population, state.ratings, new.efforts, rule).sum())
        trace.append(
            TraceRow(
                t=new.t,
                rating_mean=_per_type(new.ratings, tidx, nt, np.mean),
                rating_min=_per_type(new.ratings, tidx, nt, np.min),
                rating_max=_per_type(new.ratings, tidx, nt, np.max),
                effort_mean=_per_type(new.efforts, tidx, nt, np.mean),
                l1_delta=delta,
                rho=rho,
                sum_quality=float(quality.sum()),
                welfare=welfare,
            )
        )
        state = new
        prev_delta = delta
        quiet = quiet + 1 if delta < tol else 0
        if quiet >= confirm:
            verdict = Verdict("converged", state.t)
            break
        deltas.append(delta)
        period = _revisit(recent, state.ratings, tol)
        recent.append(state.ratings)
        if (
            period is not None
            and len(deltas) > window
            and min(list(deltas)[1:]) >= deltas[0]
            and min(deltas) > 10 * tol
        ):
            verdict = Verdict("oscillating", state.t, period)
            break
    report = verify_ce(state, population, rule, mu, tol=1e-6) if check_ce else None
    return RunOutcome(verdict, trace, state, report, population.type_ids, initial=state0)


def _revisit(history: deque, current: NDArray[np.float64], tol: float) -> int | None:
    for back, old in enumerate(reversed(history), start=1):
        if float(np.abs(old - current).sum()) <= tol:
            return back
    return None


# ---------------------------------------------------------------------------
# equilibrium checks


@dataclass(frozen=True)
class CeReport:
    incentive_ok: NDArray[np.bool_]
    incentive_residual: NDArray[np.float64]
    stable_rating_ok: NDArray[np.bool_]
    stable_rating_residual: NDArray[np.float64]
    conjecture_ok: NDArray[np.bool_]
    conjecture_residual: NDArray[np.float64]

    @property
    def all_pass(self) -> bool:
        return bool(self.incentive_ok.all() and self.stable_rating_ok.all() and self.conjecture_ok.all())


def verify_ce(
    state: DynamicsState, population: Population, rule: MatchingRule, mu: float, tol: float = 1e-6
) -> CeReport:
    """Check the three equilibrium conditions agent by agent."""
    theta = state.ratings
    tab = _tables(rule, theta)
    e_star = best_responses(population, theta, rule, mu, fast=True, tables=tab)
    inc = np.abs(state.efforts - e_star)
    stable = np.abs(theta - population.quality_of(state.efforts))
    f = population.alphas * conjectured_benefits(population, theta, state.efforts, rule, mu, tab.dist) + state.betas
    u = expected_payoffs(population, theta, state.efforts, rule, tab)
    conj = np.abs(f - u)
    return CeReport(inc <= tol, inc, stable <= tol, stable, conj <= tol, conj)


def state_at_profile(
    profile: ArrayLike, population: Population, rule: MatchingRule, mu: float, mode: Mode = "expected"
) -> DynamicsState:
    """The candidate equilibrium state of a rating profile.

    Efforts reproduce the ratings and the offsets make conjectures exact, so
    ``verify_ce`` on the result turns on incentive compatibility alone.
    """
    theta = quantize(np.asarray(profile, dtype=float))
    efforts = population.effort_for_rating(theta)
    tab = _tables(rule, theta)
    u = expected_payoffs(population, theta, efforts, rule, tab)
    bbar = conjectured_benefits(population, theta, efforts, rule, mu, tab.dist)
    return DynamicsState(0, theta, u - population.alphas * bbar, efforts, mode, 0 if mode == "sampled" else None)


@dataclass(frozen=True)
class InequalityReport:
    left_ok: NDArray[np.bool_]
    right_ok: NDArray[np.bool_]
    feasible: NDArray[np.bool_]
    left_margin: NDArray[np.float64]
    right_margin: NDArray[np.float64]

    @property
    def all_pass(self) -> bool:
        return bool(self.left_ok.all() and self.right_ok.all() and self.feasible.all())


def one_sided_benefit(
    rule: MatchingRule, benefit: FunctionSpec, x: float, d_others: RatingDistribution
) -> tuple[float, float, float, float, float]:
    """(left limit, point value, right limit, left slope, right slope) at ``x``.

    The conjectured benefit is affine on each side of ``x`` close enough to
    it, so limits and slopes follow from two evaluations per side.
    """
    gaps = np.abs(d_others.values - x)
    gaps = gaps[gaps > 0]
    h = 0.25 * float(gaps.min()) if gaps.size else 0.25 * max(x, 1.0)
    h = min(h, 1e-3)

    def cb(v: float) -> float:
        return conjectured_benefit(rule, benefit, v, d_others)

    point = cb(x)
    r1, r2 = cb(x + h), cb(x + 2 * h)
    s_right = (r2 - r1) / h
    right = r1 - s_right * h
    if x - 2 * h < 0:
        return point, point, right, math.nan, s_right
    l1, l2 = cb(x - h), cb(x - 2 * h)
    s_left = (l1 - l2) / h
    left = l1 + s_left * h
    return left, point, right, s_left, s_right


def check_equilibrium_inequalities(
    profile: ArrayLike,
    population: Population,
    rule: MatchingRule,
    mu: float,
    tol: float = 1e-6,
) -> InequalityReport:
    """Local optimality of the rating-reproducing effort, agent by agent.

    At e* = q^{-1}(theta) the new rating equals the current one. Lowering the
    effort must not pay (left marginal >= 0) and raising it must not pay
    (right marginal <= 0). Where the benefit jumps at e*, the point is
    credited with the larger one-sided limit, matching the solver.
    """
    if rule.kind == "rating_independent":
        raise ValueError("the marginal conditions are stated for rank-based rules")
    theta = quantize(np.asarray(profile, dtype=float))
    d = distribution(theta)
    loads = review_loads(rule, d)
    n = population.N
    left_ok = np.ones(n, bool)
    right_ok = np.ones(n, bool)
    feasible = np.ones(n, bool)
    lm = np.full(n, math.nan)
    rm = np.full(n, math.nan)
    cache: dict[tuple, tuple[bool, bool, bool, float, float]] = {}
    for i, a in enumerate(population.agents):
        k = int(d.ranks[i])
        key = (a.type_id, k)
        if key not in cache:
            cache[key] = _inequalities_at(a, float(theta[i]), remove_agent(d, k), float(loads[k - 1]), rule, mu, tol)
        left_ok[i], right_ok[i], feasible[i], lm[i], rm[i] = cache[key]
    return InequalityReport(left_ok, right_ok, feasible, lm, rm)


def _inequalities_at(agent, th, d_others, M, rule, mu, tol, jump_tol=1e-9):
    if th > agent.q_max + 1e-12:
        return False, False, False, math.nan, math.nan
    e = min(agent.quality.inverse(th), agent.e_max)
    left, point, right, s_l, s_r = one_sided_benefit(rule, agent.benefit, th, d_others)
    top = max(left, point, right)
    cw = (1.0 - agent.delta) * M
    gw = agent.delta * agent.alpha
    lmargin = rmargin = math.nan
    ok_l = ok_r = True
    # a side whose limit falls short of the credited value cannot improve
    # locally; otherwise its marginal payoff must point back to e*
    if e > 0:
        lmargin = -cw * agent.cost.deriv(e) + gw * mu * agent.quality.deriv(e) * s_l
        ok_l = left < top - jump_tol or lmargin >= -tol
    if e < agent.e_max:
        rmargin = -cw * agent.cost.deriv(e) + gw * mu * agent.quality.deriv(e) * s_r
        ok_r = right < top - jump_tol or rmargin <= tol
    return ok_l, ok_r, True, lmargin, rmargin


# ---------------------------------------------------------------------------
# monitors and objectives


def capability_order(population: Population) -> list[tuple[int, int]]:
    """Pairs (a, b) of type ids where type a is more capable than type b."""
    reps = {t: population.representative(t) for t in population.type_ids}
    return [(ta, tb) for ta in reps for tb in reps if ta != tb and is_more_capable(reps[ta], reps[tb])]


@dataclass(frozen=True)
class MonitorResult:
    applicable: bool
    violations: list[tuple[int, int, int, float]]
    reason: str = ""


def capability_order_monitor(outcome: RunOutcome, population: Population) -> MonitorResult:
    """More capable types never rated below less capable ones along the run."""
    if outcome.initial is None or np.ptp(outcome.initial.ratings) > 0:
        return MonitorResult(False, [], "precondition unmet: initial ratings differ")
    pos = {t: n for n, t in enumerate(outcome.type_ids)}
    pairs = capability_order(population)
    out = []
    for row in outcome.trace:
        for ta, tb in pairs:
            gap = row.rating_min[pos[ta]] - row.rating_max[pos[tb]]
            if gap < -1e-12:
                out.append((row.t, ta, tb, float(gap)))
    return MonitorResult(True, out)


@dataclass(frozen=True)
class Objectives:
    sum_quality: float
    social_welfare: float
    quality_per_agent: float
    welfare_per_agent: float
    quality_per_type_sum: float
    welfare_per_type_sum: float
    quality_by_type: NDArray[np.float64]
    welfare_by_type: NDArray[np.float64]

    def quality(self, normalization: str) -> float:
        return {"raw": self.sum_quality, "per_agent": self.quality_per_agent, "per_type": self.quality_per_type_sum}[
            normalization
        ]

    def welfare(self, normalization: str) -> float:
        return {"raw": self.social_welfare, "per_agent": self.welfare_per_agent, "per_type": self.welfare_per_type_sum}[
            normalization
        ]


NORMALIZATIONS = ("raw", "per_agent", "per_type")


def designer_objectives(state: DynamicsState, population: Population, rule: MatchingRule) -> Objectives:
    """Total review quality and welfare (benefit minus cost) at a state.

    Besides raw totals: the per-agent mean, and the sum over types of each
    type's mean.
    """
    q = population.quality_of(state.efforts)
    u = expected_payoffs(population, state.ratings, state.efforts, rule)
    tidx = population.type_index()
    nt = len(population.type_ids)
    qt = _per_type(q, tidx, nt, np.mean)
    ut = _per_type(u, tidx, nt, np.mean)
    n = population.N
    return Objectives(
        float(q.sum()), float(u.sum()), float(q.sum() / n), float(u.sum() / n), float(qt.sum()), float(ut.sum()), qt, ut
    )


@dataclass(frozen=True)
class StepSizeSearch:
    mu: float | None
    tested: list[tuple[float, bool]]
    non_monotone: bool


def find_max_step_size(
    converges: Callable[[float], bool],
    mu_lo: float,
    mu_hi: float,
    resolution: float = 0.01,
    scan: int = 5,
) -> StepSizeSearch:
    """Largest step size whose run converges, to within ``resolution``.

    A coarse scan of ``scan`` evenly spaced values brackets the answer above
    the largest converging scan point, then bisection refines it. The
    predicate is assumed monotone; a failure below a success anywhere among
    the evaluations is flagged in the result.
    """
    if not 0.0 < mu_lo < mu_hi < 1.0:
        raise ValueError("need 0 < mu_lo < mu_hi < 1")
    tested: list[tuple[float, bool]] = []

    def probe(mu: float) -> bool:
        ok = converges(mu)
        tested.append((mu, ok))
        return ok

    grid = np.linspace(mu_lo, mu_hi, max(scan, 2))
    results = [probe(float(m)) for m in grid]
    good = [i for i, ok in enumerate(results) if ok]
    if not good:
        return StepSizeSearch(None, tested, False)
    top = good[-1]
    if top == len(grid) - 1:
        lo = hi = float(grid[top])
    else:
        lo, hi = float(grid[top]), float(grid[top + 1])
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        if probe(mid):
            lo = mid
        else:
            hi = mid
    ok_mu = [m for m, ok in tested if ok]
    bad_mu = [m for m, ok in tested if not ok]
    non_monotone = bool(ok_mu and bad_mu and max(ok_mu) > min(bad_mu))
    return StepSizeSearch(lo, tested, non_monotone)


def decay_step_count(theta0_l1: float, mu: float, tol: float) -> int:
    """Slots for ratings decaying by (1 - mu) per slot to reach L1 norm ``tol``."""
    if theta0_l1 <= tol:
        return 0
    return math.ceil(math.log(tol / theta0_l1) / math.log(1.0 - mu))
