"""Matching rules over rating ranks and the conjectured expected-benefit curve."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from ratingmatch.functions import FunctionSpec
from ratingmatch.ratings import (
    RatingDistribution,
    distribution,
    insert_rating,
    quantize,
    remove_agent,
)

RULE_KINDS = ("baseline", "asymmetric", "long_range", "rating_independent")


@dataclass(frozen=True)
class MatchingRule:
    kind: str = "baseline"
    gamma: float = 0.0
    gamma_r: float = 0.0
    gamma_p: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown matching rule {self.kind!r}")
        if self.kind == "long_range":
            for name in ("gamma_r", "gamma_p"):
                if not 0.0 <= getattr(self, name) <= 1.0:
                    raise ValueError(f"{name} must lie in [0, 1]")

    @classmethod
    def baseline(cls) -> MatchingRule:
        return cls("baseline")

    @classmethod
    def asymmetric(cls, gamma: float) -> MatchingRule:
        return cls("asymmetric", gamma=gamma)

    @classmethod
    def long_range(cls, gamma_r: float, gamma_p: float) -> MatchingRule:
        return cls("long_range", gamma_r=gamma_r, gamma_p=gamma_p)

    @classmethod
    def rating_independent(cls) -> MatchingRule:
        return cls("rating_independent")

    @property
    def reduces_to_baseline(self) -> bool:
        """Extensions with zero parameters match exactly like the baseline."""
        return (self.kind == "asymmetric" and self.gamma == 0.0) or (
            self.kind == "long_range" and self.gamma_r == 0.0 and self.gamma_p == 0.0
        )

    @property
    def label(self) -> str:
        if self.kind == "asymmetric":
            return f"asymmetric(gamma={self.gamma:g})"
        if self.kind == "long_range":
            return f"long_range(gamma_r={self.gamma_r:g},gamma_p={self.gamma_p:g})"
        return self.kind

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"rule": self.kind}
        if self.kind == "asymmetric":
            out["gamma"] = self.gamma
        elif self.kind == "long_range":
            out["gamma_r"] = self.gamma_r
            out["gamma_p"] = self.gamma_p
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> MatchingRule:
        if "rule" not in data:
            raise ValueError("matching rule spec missing field 'rule'")
        return cls(
            str(data["rule"]),
            gamma=float(data.get("gamma", 0.0)),
            gamma_r=float(data.get("gamma_r", 0.0)),
            gamma_p=float(data.get("gamma_p", 0.0)),
        )


@dataclass(frozen=True, eq=False)
class MatchProbabilities:
    """Probability that the product is sent to each rank (index = rank - 1)."""

    probs: NDArray[np.float64]
    no_review_mass: float = 0.0
    clamped: bool = False

    @property
    def entries(self) -> dict[int, float]:
        return {k + 1: float(p) for k, p in enumerate(self.probs) if p != 0.0}

    def total(self) -> float:
        return float(self.probs.sum()) + self.no_review_mass


def _clamp_pair(up: float, down: float) -> tuple[float, float, bool]:
    if 0.0 <= up <= 1.0 and 0.0 <= down <= 1.0:
        return up, down, False
    if not 0.0 <= up <= 1.0:
        up = min(max(up, 0.0), 1.0)
        return up, 1.0 - up, True
    down = min(max(down, 0.0), 1.0)
    return 1.0 - down, down, True


def match_probabilities(
    rule: MatchingRule, d: RatingDistribution, k: int, theta: float | None = None
) -> MatchProbabilities:
    """Where the product of the agent at rank ``k`` goes.

    ``theta`` is the agent's own rating (defaults to ``d.value(k)``); only the
    asymmetric rule reads it.
    """
    K = d.K
    if not 1 <= k <= K:
        raise ValueError(f"rank {k} outside 1..{K}")
    probs = np.zeros(K)
    if rule.kind == "rating_independent":
        n_others = d.n_agents - 1
        if n_others < 1:
            raise ValueError("a lone agent cannot be matched")
        probs[:] = d.counts
        probs[k - 1] -= 1
        return MatchProbabilities(probs / n_others)

    if d.count(k) > 1:
        probs[k - 1] = 1.0
        return MatchProbabilities(probs)
    if K == 1:
        raise ValueError("a lone agent cannot be matched")
    if k == 1:
        probs[1] = 1.0
        return MatchProbabilities(probs)
    v = d.values
    if k == K:
        p = v[K - 1] / v[K - 2]
        probs[K - 2] = p
        return MatchProbabilities(probs, no_review_mass=1.0 - p)

    hi, mid, lo = v[k - 2], v[k - 1], v[k]
    up = (mid - lo) / (hi - lo)
    down = (hi - mid) / (hi - lo)
    clamped = False
    if rule.kind == "asymmetric":
        shift = rule.gamma * (mid if theta is None else theta)
        up, down, clamped = _clamp_pair(up + shift, down - shift)
    if rule.kind == "long_range" and 3 <= k <= K - 2:
        probs[k - 2] = up * (1.0 - rule.gamma_r)
        probs[k - 3] = up * rule.gamma_r
        probs[k] = down * (1.0 - rule.gamma_p)
        probs[k + 1] = down * rule.gamma_p
        return MatchProbabilities(probs)
    probs[k - 2] = up
    probs[k] = down
    return MatchProbabilities(probs, clamped=clamped)


def probability_matrix(rule: MatchingRule, d: RatingDistribution) -> NDArray[np.float64]:
    """Row r: where the product of an agent at rank r + 1 goes."""
    return np.array([match_probabilities(rule, d, k).probs for k in range(1, d.K + 1)])


def review_loads(rule: MatchingRule, d: RatingDistribution) -> NDArray[np.float64]:
    """Expected number of products each agent reviews, per rank.

    A product sent to a rank is reviewed by a uniformly chosen agent of that
    rank other than its owner.
    """
    m = probability_matrix(rule, d)
    n = d.counts.astype(float)
    incoming = (n[:, None] * m).sum(axis=0) - np.diag(m) * n
    own = np.diag(m)
    return own + incoming / n


def expected_review_load(rule: MatchingRule, d: RatingDistribution, k: int) -> float:
    return float(review_loads(rule, d)[k - 1])


def conjectured_benefit(
    rule: MatchingRule, benefit: FunctionSpec, x: float, d_others: RatingDistribution
) -> float:
    """Expected benefit next slot if the agent's rating became ``x`` and nobody else moved.

    Direct evaluation: insert ``x`` into the others' distribution, then sum
    matching probability times benefit over reviewer ranks.
    """
    if x < 0:
        raise ValueError("ratings are non-negative")
    d_new, k = insert_rating(d_others, x)
    mp = match_probabilities(rule, d_new, k, float(quantize(x)))
    return float(sum(p * benefit.value(v) for p, v in zip(mp.probs, d_new.values) if p != 0.0))


# ---------------------------------------------------------------------------
# closed-form curve


@dataclass(frozen=True, eq=False)
class BenefitCurve:
    """Piecewise-affine conjectured benefit as a function of the new own rating.

    Interval ``i`` runs from ``knots[i-1]`` to ``knots[i]`` (open), the first
    one from 0 and the last one to infinity; on it the curve equals
    ``intercepts[i] + slopes[i] * x``. At a knot the curve takes
    ``point_values``, which may differ from either one-sided limit.
    """

    knots: NDArray[np.float64]
    point_values: NDArray[np.float64]
    slopes: NDArray[np.float64]
    intercepts: NDArray[np.float64]

    def interval(self, x: float) -> int:
        return int(np.searchsorted(self.knots, x, side="right"))

    def value(self, x: float) -> float:
        xq = float(quantize(x))
        i = int(np.searchsorted(self.knots, xq, side="left"))
        if i < len(self.knots) and self.knots[i] == xq:
            return float(self.point_values[i])
        return float(self.intercepts[i] + self.slopes[i] * xq)

    def left_limit(self, j: int) -> float:
        return float(self.intercepts[j] + self.slopes[j] * self.knots[j])

    def right_limit(self, j: int) -> float:
        return float(self.intercepts[j + 1] + self.slopes[j + 1] * self.knots[j])

    def left_slope(self, j: int) -> float:
        return float(self.slopes[j])

    def right_slope(self, j: int) -> float:
        return float(self.slopes[j + 1])

    def knot_index(self, x: float) -> int | None:
        xq = float(quantize(x))
        i = int(np.searchsorted(self.knots, xq, side="left"))
        if i < len(self.knots) and self.knots[i] == xq:
            return i
        return None

    def jumps(self) -> NDArray[np.float64]:
        """Largest gap between each knot value and its one-sided limits."""
        out = np.zeros(len(self.knots))
        for j in range(len(self.knots)):
            pv = self.point_values[j]
            out[j] = max(abs(pv - self.left_limit(j)), abs(pv - self.right_limit(j)))
        return out


def _affine_through(x0: float, y0: float, x1: float, y1: float) -> tuple[float, float]:
    s = (y1 - y0) / (x1 - x0)
    return s, y0 - s * x0


def benefit_curve(
    rule: MatchingRule, benefit: FunctionSpec, d_others: RatingDistribution
) -> BenefitCurve:
    """Closed-form conjectured-benefit curve against a fixed set of other ratings."""
    if d_others.K == 0:
        raise ValueError("no other agents to be matched with")
    if rule.reduces_to_baseline:
        rule = MatchingRule.baseline()
    a = d_others.values[::-1]
    bv = np.array([benefit.value(float(v)) for v in a])
    n = len(a)

    if rule.kind == "rating_independent":
        level = float(np.dot(d_others.counts[::-1], bv) / d_others.n_agents)
        return BenefitCurve(
            knots=a.copy(),
            point_values=np.full(n, level),
            slopes=np.zeros(n + 1),
            intercepts=np.full(n + 1, level),
        )

    knots: list[float] = []
    points: list[float] = []
    slopes: list[float] = []
    intercepts: list[float] = []

    # below the lowest other rating: reviewed by that rank with probability x / a0
    if a[0] > 0:
        slopes.append(bv[0] / a[0])
    else:
        slopes.append(0.0)
    intercepts.append(0.0)

    for j in range(n):
        knots.append(float(a[j]))
        points.append(float(bv[j]))
        if j == n - 1:
            break
        lo, hi = float(a[j]), float(a[j + 1])
        if rule.kind == "baseline" or (rule.kind == "long_range" and not 1 <= j <= n - 3):
            s, c = _affine_through(lo, bv[j], hi, bv[j + 1])
            slopes.append(s)
            intercepts.append(c)
        elif rule.kind == "long_range":
            # agent alone between ranks: a[j+1] is its upper neighbour
            up_val = (1.0 - rule.gamma_r) * bv[j + 1] + rule.gamma_r * bv[j + 2]
            down_val = (1.0 - rule.gamma_p) * bv[j] + rule.gamma_p * bv[j - 1]
            s, c = _affine_through(lo, down_val, hi, up_val)
            slopes.append(s)
            intercepts.append(c)
        else:
            _asymmetric_pieces(rule.gamma, lo, hi, bv[j], bv[j + 1], knots, points, slopes, intercepts)

    # above the highest other rating: reviewed by that rank for sure
    slopes.append(0.0)
    intercepts.append(float(bv[-1]))
    return BenefitCurve(
        knots=np.array(knots),
        point_values=np.array(points),
        slopes=np.array(slopes),
        intercepts=np.array(intercepts),
    )


def _asymmetric_pieces(
    gamma: float,
    lo: float,
    hi: float,
    b_lo: float,
    b_hi: float,
    knots: list[float],
    points: list[float],
    slopes: list[float],
    intercepts: list[float],
) -> None:
    """Pieces of the asymmetric curve on (lo, hi), split where the up-probability clamps."""
    width = hi - lo
    rate = 1.0 / width + gamma  # d(up-probability)/dx before clamping

    def up(x: float) -> float:
        return (x - lo) / width + gamma * x

    cuts = []
    if rate != 0.0:
        for level in (0.0, 1.0):
            x = (level + lo / width) / rate
            if lo < x < hi:
                cuts.append(x)
    cuts.sort()
    edges = [lo, *cuts, hi]
    for i in range(len(edges) - 1):
        x0, x1 = edges[i], edges[i + 1]
        mid = 0.5 * (x0 + x1)
        u = up(mid)
        if u <= 0.0:
            slopes.append(0.0)
            intercepts.append(b_lo)
        elif u >= 1.0:
            slopes.append(0.0)
            intercepts.append(b_hi)
        else:
            s = rate * (b_hi - b_lo)
            slopes.append(s)
            intercepts.append(b_lo + (b_hi - b_lo) * (-lo / width))
        if i < len(edges) - 2:
            knots.append(x1)
            points.append(slopes[-1] * x1 + intercepts[-1])


# ---------------------------------------------------------------------------
# concrete assignments


@dataclass(frozen=True, eq=False)
class Assignment:
    reviewer_of: list[int | None]
    review_load: NDArray[np.int64]

    def reviewed(self) -> NDArray[np.bool_]:
        return self.review_load > 0


def sample_assignment(
    rule: MatchingRule,
    profile: ArrayLike,
    rng_seed: int | Sequence[int] | np.random.SeedSequence,
    dist: RatingDistribution | None = None,
) -> Assignment:
    """Draw one concrete reviewer per product.

    Each product first draws a reviewer rank; products kept inside their own
    rating group are paired along a seeded cycle of the group, other ranks
    resolve to a uniformly chosen agent of that rank.
    """
    theta = np.asarray(profile, dtype=float)
    if dist is None:
        dist = distribution(theta)
    rng = np.random.default_rng(rng_seed)
    N = len(theta)
    members = [np.flatnonzero(dist.ranks == k) for k in range(1, dist.K + 1)]
    reviewer: list[int | None] = [None] * N
    load = np.zeros(N, dtype=np.int64)

    if rule.kind == "rating_independent":
        if N < 2:
            raise ValueError("a lone agent cannot be matched")
        for i in range(N):
            j = int(rng.integers(N - 1))
            j += j >= i
            reviewer[i] = j
            load[j] += 1
        return Assignment(reviewer, load)

    cycle_next: dict[int, int] = {}
    for group in members:
        if len(group) > 1:
            order = rng.permutation(group)
            for pos, owner in enumerate(order):
                cycle_next[int(owner)] = int(order[(pos + 1) % len(order)])

    rows = {k: match_probabilities(rule, dist, k) for k in range(1, dist.K + 1)}
    for i in range(N):
        k = int(dist.ranks[i])
        mp = rows[k]
        weights = np.append(mp.probs, mp.no_review_mass)
        target = int(rng.choice(len(weights), p=weights / weights.sum()))
        if target == dist.K:
            continue
        if target == k - 1:
            j = cycle_next[i]
        else:
            group = members[target]
            j = int(group[rng.integers(len(group))])
        reviewer[i] = j
        load[j] += 1
    return Assignment(reviewer, load)


# ---------------------------------------------------------------------------
# desirability


@dataclass
class DesirabilityReport:
    rule: MatchingRule
    n_samples: int
    violations: list[dict[str, Any]] = field(default_factory=list)
    no_rating_incentive: bool = False

    @property
    def desirable(self) -> bool:
        return not self.violations and not self.no_rating_incentive

    def kinds(self) -> set[str]:
        return {v["kind"] for v in self.violations}


def check_desirable(
    rule: MatchingRule,
    d_samples: Sequence[RatingDistribution],
    benefit: FunctionSpec,
    grid_n: int = 1000,
    tol: float = 1e-10,
) -> DesirabilityReport:
    """Scan each agent's conjectured-benefit curve for monotonicity and concavity,
    and compare review loads across agents."""
    if not d_samples:
        raise ValueError("need at least one distribution")
    report = DesirabilityReport(rule, len(d_samples))
    flat_everywhere = True
    for s, d in enumerate(d_samples):
        grid = np.linspace(0.0, float(d.values[0]) * 1.2, grid_n)
        for k in range(1, d.K + 1):
            others = remove_agent(d, k)
            curve = benefit_curve(rule, benefit, others)
            ys = np.array([curve.value(x) for x in grid])
            dy = np.diff(ys)
            if np.any(dy > tol):
                flat_everywhere = False
            if np.any(dy < -tol):
                x_bad = float(grid[1:][np.argmax(dy < -tol)])
                report.violations.append({"sample": s, "rank": k, "kind": "decreasing", "x": x_bad})
            ddy = np.diff(dy)
            if np.any(ddy > tol):
                x_bad = float(grid[1:-1][np.argmax(ddy > tol)])
                report.violations.append({"sample": s, "rank": k, "kind": "not_concave", "x": x_bad})
            jumps = curve.jumps()
            if np.any(jumps > tol):
                j = int(np.argmax(jumps))
                report.violations.append(
                    {"sample": s, "rank": k, "kind": "discontinuous", "x": float(curve.knots[j])}
                )
            if rule.kind == "baseline":
                slopes = curve.slopes
                if np.any(slopes < -tol) or np.any(np.diff(slopes) > tol):
                    report.violations.append({"sample": s, "rank": k, "kind": "slope_sequence", "x": None})
        loads = review_loads(rule, d)
        if np.ptp(loads) > tol or loads.min() <= 0:
            report.violations.append(
                {"sample": s, "rank": None, "kind": "unequal_load", "x": None, "loads": loads.tolist()}
            )
    report.no_rating_incentive = flat_everywhere
    return report
