"""Cost, review-quality and benefit function families, and agent primitives."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

COST_FAMILIES = ("power_cost",)
QUALITY_FAMILIES = ("linear_quality", "concave_power_quality")
BENEFIT_FAMILIES = ("quadratic_benefit", "linear_benefit")

_N_PARAMS = {
    "power_cost": 2,
    "linear_quality": 1,
    "concave_power_quality": 2,
    "quadratic_benefit": 2,
    "linear_benefit": 1,
}


class DomainError(ValueError):
    """Function evaluated outside its domain or range."""


@dataclass(frozen=True)
class FunctionSpec:
    """One member of a closed set of parametric function families.

    ``power_cost``            scale * x**exponent
    ``linear_quality``        slope * x
    ``concave_power_quality`` scale * x**exponent, exponent in (0, 1]
    ``quadratic_benefit``     a * x**2 + b * x
    ``linear_benefit``        slope * x
    """

    family: str
    params: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.family not in _N_PARAMS:
            raise ValueError(f"unknown function family {self.family!r}")
        params = tuple(float(p) for p in self.params)
        if len(params) != _N_PARAMS[self.family]:
            raise ValueError(
                f"{self.family} takes {_N_PARAMS[self.family]} parameters, got {len(params)}"
            )
        object.__setattr__(self, "params", params)
        if self.family == "power_cost":
            scale, exponent = params
            if scale <= 0 or exponent <= 0:
                raise ValueError("power_cost needs scale > 0 and exponent > 0")
        elif self.family == "linear_quality":
            if params[0] <= 0:
                raise ValueError("linear_quality needs slope > 0")
        elif self.family == "concave_power_quality":
            scale, exponent = params
            if scale <= 0 or not 0 < exponent <= 1:
                raise ValueError("concave_power_quality needs scale > 0, exponent in (0, 1]")
        elif self.family == "linear_benefit":
            if params[0] <= 0:
                raise ValueError("linear_benefit needs slope > 0")

    # constructors -----------------------------------------------------

    @classmethod
    def power_cost(cls, scale: float, exponent: float) -> FunctionSpec:
        return cls("power_cost", (scale, exponent))

    @classmethod
    def linear_quality(cls, slope: float) -> FunctionSpec:
        return cls("linear_quality", (slope,))

    @classmethod
    def concave_power_quality(cls, scale: float, exponent: float) -> FunctionSpec:
        return cls("concave_power_quality", (scale, exponent))

    @classmethod
    def quadratic_benefit(cls, a: float, b: float) -> FunctionSpec:
        return cls("quadratic_benefit", (a, b))

    @classmethod
    def linear_benefit(cls, slope: float) -> FunctionSpec:
        return cls("linear_benefit", (slope,))

    # evaluation -------------------------------------------------------

    @property
    def is_quality(self) -> bool:
        return self.family in QUALITY_FAMILIES

    @property
    def is_cost(self) -> bool:
        return self.family in COST_FAMILIES

    @property
    def is_benefit(self) -> bool:
        return self.family in BENEFIT_FAMILIES

    def monomial(self) -> tuple[float, float]:
        """(coefficient, exponent) for the single-term families."""
        if self.family in ("power_cost", "concave_power_quality"):
            return self.params[0], self.params[1]
        if self.family in ("linear_quality", "linear_benefit"):
            return self.params[0], 1.0
        raise ValueError(f"{self.family} is not a monomial")

    def value(self, x: float) -> float:
        if x < 0:
            raise DomainError(f"{self.family} evaluated at negative argument {x}")
        if self.family == "quadratic_benefit":
            a, b = self.params
            return a * x * x + b * x
        coef, power = self.monomial()
        if power == 1.0:
            return coef * x
        if power == 2.0:
            return coef * x * x
        return coef * float(x) ** power

    def values(self, x: ArrayLike) -> NDArray[np.float64]:
        """Elementwise ``value`` over an array."""
        arr = np.asarray(x, dtype=float)
        if np.any(arr < 0):
            raise DomainError(f"{self.family} evaluated at a negative argument")
        if self.family == "quadratic_benefit":
            a, b = self.params
            return a * arr * arr + b * arr
        coef, power = self.monomial()
        if power == 1.0:
            return coef * arr
        if power == 2.0:
            return coef * arr * arr
        # python floats, so scalar and array evaluation agree bit for bit
        return np.array([coef * v**power for v in arr.tolist()]).reshape(arr.shape)

    def deriv(self, x: float) -> float:
        if x < 0:
            raise DomainError(f"{self.family} derivative at negative argument {x}")
        if self.family == "quadratic_benefit":
            a, b = self.params
            return 2.0 * a * x + b
        coef, power = self.monomial()
        if power == 1.0:
            return coef
        if x == 0.0:
            return math.inf if power < 1.0 else 0.0
        return coef * power * x ** (power - 1.0)

    def deriv2(self, x: float) -> float:
        if x < 0:
            raise DomainError(f"{self.family} second derivative at negative argument {x}")
        if self.family == "quadratic_benefit":
            return 2.0 * self.params[0]
        coef, power = self.monomial()
        if power == 1.0:
            return 0.0
        if x == 0.0:
            if power < 1.0:
                return -math.inf
            return 2.0 * coef if power == 2.0 else (math.inf if power < 2.0 else 0.0)
        return coef * power * (power - 1.0) * x ** (power - 2.0)

    def inverse(self, y: float) -> float:
        """Inverse of a quality function; ``y`` must be non-negative."""
        if not self.is_quality:
            raise ValueError(f"{self.family} is not a quality family")
        if y < 0:
            raise DomainError(f"quality level {y} is negative")
        coef, power = self.monomial()
        if power == 1.0:
            return y / coef
        return (y / coef) ** (1.0 / power)

    def to_dict(self) -> dict[str, Any]:
        return {"family": self.family, "params": list(self.params)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FunctionSpec:
        try:
            return cls(str(data["family"]), tuple(data["params"]))
        except KeyError as exc:
            raise ValueError(f"function spec missing field {exc.args[0]!r}") from None


def evaluate(spec: FunctionSpec, x: float) -> float:
    return spec.value(x)


def derivative(spec: FunctionSpec, x: float) -> float:
    return spec.deriv(x)


def inverse_quality(spec: FunctionSpec, q: float, e_max: float | None = None) -> float:
    """Effort that produces review quality ``q``.

    With ``e_max`` given, ``q`` must lie in ``[0, spec.value(e_max)]``.
    """
    if not spec.is_quality:
        raise ValueError(f"{spec.family} is not a quality family")
    if q < 0 or (e_max is not None and q > spec.value(e_max) * (1 + 1e-12)):
        raise DomainError(f"quality {q} outside the attainable range")
    return spec.inverse(q)


@dataclass(frozen=True)
class AgentSpec:
    agent_id: int
    type_id: int
    delta: float
    alpha: float
    e_max: float
    cost: FunctionSpec
    quality: FunctionSpec
    benefit: FunctionSpec

    def __post_init__(self) -> None:
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"agent {self.agent_id}: delta must lie in [0, 1)")
        if self.alpha <= 0:
            raise ValueError(f"agent {self.agent_id}: alpha must be positive")
        if self.e_max <= 0:
            raise ValueError(f"agent {self.agent_id}: e_max must be positive")
        if not self.cost.is_cost:
            raise ValueError(f"agent {self.agent_id}: {self.cost.family} is not a cost family")
        if not self.quality.is_quality:
            raise ValueError(f"agent {self.agent_id}: {self.quality.family} is not a quality family")
        if not self.benefit.is_benefit:
            raise ValueError(f"agent {self.agent_id}: {self.benefit.family} is not a benefit family")

    @property
    def q_max(self) -> float:
        return self.quality.value(self.e_max)

    def same_type_as(self, other: AgentSpec) -> bool:
        return (
            self.delta == other.delta
            and self.alpha == other.alpha
            and self.e_max == other.e_max
            and self.cost == other.cost
            and self.quality == other.quality
            and self.benefit == other.benefit
        )


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    hard: bool
    detail: str = ""


@dataclass
class ValidationReport:
    agent_id: int
    checks: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed]

    @property
    def hard_failures(self) -> list[Check]:
        return [c for c in self.checks if not c.passed and c.hard]

    @property
    def warnings(self) -> list[Check]:
        return [c for c in self.checks if not c.passed and not c.hard]

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


def _cost_checks(spec: FunctionSpec) -> list[Check]:
    _, power = spec.monomial()
    return [
        Check("cost_strictly_convex", power > 1.0, True, f"exponent {power}"),
        Check("cost_strictly_increasing", True, True),
        Check("cost_marginal_zero_at_zero", power > 1.0, True, f"c'(0) = {spec.deriv(0.0)}"),
        Check("cost_zero_at_zero", spec.value(0.0) == 0.0, True),
    ]


def _quality_checks(spec: FunctionSpec) -> list[Check]:
    _, power = spec.monomial()
    return [
        Check("quality_concave", power <= 1.0, True),
        Check("quality_strictly_increasing", True, True),
        Check("quality_marginal_bounded_at_zero", math.isfinite(spec.deriv(0.0)), True,
              f"q'(0) = {spec.deriv(0.0)}"),
        Check("quality_zero_at_zero", spec.value(0.0) == 0.0, True),
    ]


def _benefit_checks(spec: FunctionSpec, hi: float) -> list[Check]:
    if spec.family == "linear_benefit":
        increasing, concave = True, True
        detail = ""
    else:
        a, b = spec.params
        # b'(x) = 2ax + b is affine, so its sign on [0, hi) is fixed by the endpoints.
        lo_slope, hi_slope = b, 2.0 * a * hi + b
        increasing = lo_slope > 0 and hi_slope >= 0
        concave = a <= 0
        detail = f"b'(0) = {lo_slope}, b'({hi}) = {hi_slope}"
    return [
        Check("benefit_strictly_increasing", increasing, False, detail),
        Check("benefit_concave", concave, False),
        Check("benefit_zero_at_zero", spec.value(0.0) == 0.0, True),
    ]


def validate_assumption1(
    agent: AgentSpec, rating_domain: tuple[float, float] = (0.0, 1.0)
) -> ValidationReport:
    """Check the regularity conditions the mechanism relies on.

    Cost and quality failures are hard errors. Benefit shape is only checked on
    ``rating_domain`` and failures there are warnings: the standard benefit
    ``-x**2 + 2x`` turns down beyond 1.
    """
    lo, hi = rating_domain
    if lo != 0.0 or hi <= 0:
        raise ValueError("rating domain must be [0, hi] with hi > 0")
    report = ValidationReport(agent.agent_id)
    report.checks.extend(_cost_checks(agent.cost))
    report.checks.extend(_quality_checks(agent.quality))
    report.checks.extend(_benefit_checks(agent.benefit, hi))
    return report


# ---------------------------------------------------------------------------
# capability ordering


def _marginal_ratio_law(agent: AgentSpec) -> tuple[float, float]:
    """Write delta*alpha*q'(e) / ((1-delta)*c'(e)) as coef * e**power."""
    qc, qp = agent.quality.monomial()
    cc, cp = agent.cost.monomial()
    coef = agent.delta * agent.alpha * qc * qp / ((1.0 - agent.delta) * cc * cp)
    return coef, qp - cp


def marginal_ratio(agent: AgentSpec, e: float) -> float:
    coef, power = _marginal_ratio_law(agent)
    if e == 0.0:
        return math.inf if power < 0 else (coef if power == 0 else 0.0)
    return coef * e**power


def is_more_capable(
    a: AgentSpec,
    b: AgentSpec,
    effort_grid: Sequence[float] | None = None,
    rating_grid: Sequence[float] | None = None,
) -> bool:
    """Pointwise dominance of ``a`` over ``b`` in marginal ratio, quality and marginal benefit.

    At e = 0 both ratios are infinite when c'(0) = 0; they are compared through
    their power laws instead. Quality dominance is strict and is tested for
    e > 0, since every quality function vanishes at zero.
    """
    if effort_grid is None:
        effort_grid = np.linspace(0.0, min(a.e_max, b.e_max), 201)
    if rating_grid is None:
        rating_grid = np.linspace(0.0, 1.0, 201)
    ca, pa = _marginal_ratio_law(a)
    cb, pb = _marginal_ratio_law(b)
    for e in effort_grid:
        if e == 0.0:
            if pa > pb or (pa == pb and ca < cb):
                return False
        elif marginal_ratio(a, e) < marginal_ratio(b, e):
            return False
    positive = [e for e in effort_grid if e > 0]
    if not positive or any(a.quality.value(e) <= b.quality.value(e) for e in positive):
        return False
    return all(a.benefit.deriv(t) >= b.benefit.deriv(t) for t in rating_grid)
