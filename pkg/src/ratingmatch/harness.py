"""Scenario files, single runs, sweeps and golden-output regression."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence


from ratingmatch.best_response import trap_threshold
from ratingmatch.dynamics import (
    NORMALIZATIONS,
    DynamicsState,
    Population,
    RunOutcome,
    check_equilibrium_inequalities,
    designer_objectives,
    find_max_step_size,
    run,
)
from ratingmatch.functions import AgentSpec, FunctionSpec, validate_assumption1
from ratingmatch.matching import MatchingRule

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
OUT_ENV = "RATINGMATCH_OUT"
SCENARIO_DIR = Path(__file__).parent / "scenarios"

EXIT_CONVERGED = 0
EXIT_ERROR = 1
EXIT_OSCILLATING = 2
EXIT_MAX_ITERS = 3
EXIT_UNDESIRABLE = 4
EXIT_GOLDEN_MISMATCH = 5
VERDICT_EXIT = {"converged": EXIT_CONVERGED, "oscillating": EXIT_OSCILLATING, "max_iters": EXIT_MAX_ITERS}

OUTPUT_KINDS = ("trace", "final", "ce")


class ScenarioError(ValueError):
    """A scenario or sweep file that does not match the schema."""


@dataclass(frozen=True)
class TypeSpec:
    type_id: int
    count: int
    delta: float
    alpha: float
    e_max: float
    cost: FunctionSpec
    quality: FunctionSpec
    benefit: FunctionSpec

    def agent(self, agent_id: int = 0) -> AgentSpec:
        return AgentSpec(
            agent_id, self.type_id, self.delta, self.alpha, self.e_max, self.cost, self.quality, self.benefit
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "type_id": self.type_id,
            "count": self.count,
            "delta": self.delta,
            "alpha": self.alpha,
            "e_max": self.e_max,
            "cost": self.cost.to_dict(),
            "quality": self.quality.to_dict(),
            "benefit": self.benefit.to_dict(),
        }


@dataclass(frozen=True)
class Scenario:
    name: str
    types: tuple[TypeSpec, ...]
    rule: MatchingRule
    mu: float
    theta0: float | tuple[float, ...] = 1.0
    mode: str = "expected"
    seed: int | None = None
    tol: float = 1e-8
    max_iters: int = 10_000
    require_type_groups: bool = False
    outputs: tuple[str, ...] = OUTPUT_KINDS
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def population(self) -> Population:
        return Population.from_types([(t.agent(), t.count) for t in self.types])

    def initial_state(self) -> DynamicsState:
        return DynamicsState.initial(self.population(), self.theta0, self.mode, self.seed)  # type: ignore[arg-type]

    def with_rule(self, rule: MatchingRule) -> Scenario:
        return replace(self, rule=rule)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "population": [t.to_dict() for t in self.types],
            "rule": self.rule.to_dict(),
            "mu": self.mu,
            "theta0": list(self.theta0) if isinstance(self.theta0, tuple) else self.theta0,
            "mode": self.mode,
            "seed": self.seed,
            "tol": self.tol,
            "max_iters": self.max_iters,
            "require_type_groups": self.require_type_groups,
            "outputs": list(self.outputs),
        }


def _field(data: dict[str, Any], key: str, where: str, default: Any = ...) -> Any:
    if key in data:
        return data[key]
    if default is ...:
        raise ScenarioError(f"{where}: missing field '{key}'")
    return default


def _number(value: Any, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioError(f"{where}: expected a number, got {value!r}")
    if not math.isfinite(value):
        raise ScenarioError(f"{where}: must be finite")
    return float(value)


def _function(data: Any, where: str) -> FunctionSpec:
    if not isinstance(data, dict):
        raise ScenarioError(f"{where}: expected an object with 'family' and 'params'")
    try:
        return FunctionSpec.from_dict(data)
    except (ValueError, TypeError) as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def scenario_from_dict(data: dict[str, Any]) -> Scenario:
    """Validate a parsed scenario document."""
    if not isinstance(data, dict):
        raise ScenarioError("scenario: expected a JSON object")
    version = _field(data, "schema_version", "scenario")
    if version != SCHEMA_VERSION:
        raise ScenarioError(f"scenario.schema_version: unsupported version {version!r}")
    pop = _field(data, "population", "scenario")
    if not isinstance(pop, list) or not pop:
        raise ScenarioError("scenario.population: expected a non-empty list")
    types = []
    for n, entry in enumerate(pop):
        where = f"scenario.population[{n}]"
        if not isinstance(entry, dict):
            raise ScenarioError(f"{where}: expected an object")
        count = _field(entry, "count", where)
        if isinstance(count, bool) or not isinstance(count, int) or count < 1:
            raise ScenarioError(f"{where}.count: expected a positive integer")
        t = TypeSpec(
            type_id=int(_field(entry, "type_id", where, n + 1)),
            count=count,
            delta=_number(_field(entry, "delta", where), f"{where}.delta"),
            alpha=_number(_field(entry, "alpha", where), f"{where}.alpha"),
            e_max=_number(_field(entry, "e_max", where), f"{where}.e_max"),
            cost=_function(_field(entry, "cost", where), f"{where}.cost"),
            quality=_function(_field(entry, "quality", where), f"{where}.quality"),
            benefit=_function(_field(entry, "benefit", where), f"{where}.benefit"),
        )
        try:
            t.agent()
        except ValueError as exc:
            raise ScenarioError(f"{where}: {exc}") from None
        types.append(t)
    if len({t.type_id for t in types}) != len(types):
        raise ScenarioError("scenario.population: type_id values must be distinct")

    try:
        rule = MatchingRule.from_dict(_field(data, "rule", "scenario"))
    except (ValueError, TypeError, AttributeError) as exc:
        raise ScenarioError(f"scenario.rule: {exc}") from None
    mu = _number(_field(data, "mu", "scenario"), "scenario.mu")
    if not 0.0 < mu < 1.0:
        raise ScenarioError(f"scenario.mu: step size {mu} must lie in (0, 1)")

    raw_theta = _field(data, "theta0", "scenario", 1.0)
    n_agents = sum(t.count for t in types)
    if isinstance(raw_theta, list):
        if len(raw_theta) != n_agents:
            raise ScenarioError(f"scenario.theta0: expected {n_agents} ratings, got {len(raw_theta)}")
        theta0: float | tuple[float, ...] = tuple(_number(v, "scenario.theta0") for v in raw_theta)
        lo = min(theta0)
    else:
        theta0 = _number(raw_theta, "scenario.theta0")
        lo = theta0
    if lo < 0:
        raise ScenarioError("scenario.theta0: ratings are non-negative")

    mode = _field(data, "mode", "scenario", "expected")
    if mode not in ("expected", "sampled"):
        raise ScenarioError(f"scenario.mode: expected 'expected' or 'sampled', got {mode!r}")
    seed = _field(data, "seed", "scenario", None)
    if mode == "sampled" and not isinstance(seed, int):
        raise ScenarioError("scenario.seed: sampled mode needs an integer seed")
    tol = _number(_field(data, "tol", "scenario", 1e-8), "scenario.tol")
    if tol <= 0:
        raise ScenarioError("scenario.tol: must be positive")
    max_iters = _field(data, "max_iters", "scenario", 10_000)
    if isinstance(max_iters, bool) or not isinstance(max_iters, int) or max_iters < 1:
        raise ScenarioError("scenario.max_iters: expected a positive integer")
    need_groups = bool(_field(data, "require_type_groups", "scenario", False))
    if need_groups:
        for t in types:
            if t.count < 2:
                raise ScenarioError(
                    f"scenario.population: type {t.type_id} has {t.count} agent; "
                    "equal review loads need at least two agents of every type"
                )
    outputs = tuple(_field(data, "outputs", "scenario", list(OUTPUT_KINDS)))
    bad = [o for o in outputs if o not in OUTPUT_KINDS]
    if bad:
        raise ScenarioError(f"scenario.outputs: unknown artifacts {bad}")

    warnings = _assumption_checks(types, mu, theta0)
    return Scenario(
        name=str(_field(data, "name", "scenario", "scenario")),
        types=tuple(types),
        rule=rule,
        mu=mu,
        theta0=theta0,
        mode=mode,
        seed=seed,
        tol=tol,
        max_iters=max_iters,
        require_type_groups=need_groups,
        outputs=outputs,
        warnings=tuple(warnings),
    )


def _assumption_checks(types: Sequence[TypeSpec], mu: float, theta0: float | tuple[float, ...]) -> list[str]:
    warnings: list[str] = []
    top = max(1.0, max(t.agent().q_max for t in types))
    soft: dict[tuple[str, str], list[int]] = {}
    for t in types:
        report = validate_assumption1(t.agent(), rating_domain=(0.0, top))
        hard = report.hard_failures
        if hard:
            names = ", ".join(c.name for c in hard)
            raise ScenarioError(f"type {t.type_id}: function assumptions violated ({names})")
        for c in report.warnings:
            soft.setdefault((c.name, c.detail), []).append(t.type_id)
    for (name, detail), ids in soft.items():
        warnings.append(f"types {ids}: {name} fails on [0, {top:g}] ({detail})")
    if not isinstance(theta0, tuple):
        try:
            floor = min(trap_threshold(t.agent(), mu) for t in types)
        except ValueError:
            floor = None
        if floor is not None and theta0 <= floor:
            warnings.append(
                f"theta0={theta0:g} is at or below every type's low-rating threshold "
                f"(smallest {floor:.6g}); nobody will move"
            )
    for w in warnings:
        log.warning(w)
    return warnings


def load_scenario(path: str | os.PathLike[str]) -> Scenario:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: not valid JSON ({exc})") from None
    return scenario_from_dict(data)


def bundled(name: str) -> Path:
    """Path of a scenario file shipped with the package."""
    p = SCENARIO_DIR / name
    if not p.exists():
        raise FileNotFoundError(f"no bundled scenario {name!r}")
    return p


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "out"))


# ---------------------------------------------------------------------------
# single runs


def run_outcome(scenario: Scenario, check_ce: bool = True) -> RunOutcome:
    pop = scenario.population()
    return run(
        scenario.initial_state(),
        pop,
        scenario.rule,
        scenario.mu,
        tol=scenario.tol,
        max_iters=scenario.max_iters,
        check_ce=check_ce,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def trace_csv(outcome: RunOutcome) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    ids = outcome.type_ids
    w.writerow(
        ["t"]
        + [f"type_{k}_rating" for k in ids]
        + [f"type_{k}_effort" for k in ids]
        + ["l1_delta", "rho", "sum_quality", "welfare"]
    )
    for r in outcome.trace:
        w.writerow(
            [r.t]
            + [_fmt(v) for v in r.rating_mean]
            + [_fmt(v) for v in r.effort_mean]
            + [_fmt(r.l1_delta), _fmt(r.rho), _fmt(r.sum_quality), _fmt(r.welfare)]
        )
    return buf.getvalue()


def final_csv(outcome: RunOutcome, population: Population) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["agent_id", "type_id", "rating", "effort", "beta"])
    s = outcome.final
    for a in population.agents:
        i = a.agent_id
        w.writerow([i, a.type_id, _fmt(s.ratings[i]), _fmt(s.efforts[i]), _fmt(s.betas[i])])
    return buf.getvalue()


def ce_summary(outcome: RunOutcome, scenario: Scenario, population: Population) -> dict[str, Any]:
    v = outcome.verdict
    out: dict[str, Any] = {
        "scenario": scenario.name,
        "rule": scenario.rule.to_dict(),
        "mu": scenario.mu,
        "verdict": v.kind,
        "t": v.t,
        "period": v.period,
        "oscillation_detector": "heuristic (profile revisit within tol over a 200-slot window)",
    }
    rep = outcome.ce_report
    if rep is not None:
        out["ce"] = {
            "all_pass": rep.all_pass,
            "incentive_max_residual": float(rep.incentive_residual.max()),
            "stable_rating_max_residual": float(rep.stable_rating_residual.max()),
            "conjecture_max_residual": float(rep.conjecture_residual.max()),
        }
    if scenario.rule.kind != "rating_independent":
        ineq = check_equilibrium_inequalities(outcome.final.ratings, population, scenario.rule, scenario.mu)
        out["inequalities_pass"] = ineq.all_pass
    obj = designer_objectives(outcome.final, population, scenario.rule)
    out["objectives"] = {
        f"{kind}_{norm}": getattr(obj, kind)(norm) for kind in ("quality", "welfare") for norm in NORMALIZATIONS
    }
    return out


@dataclass
class RunResult:
    outcome: RunOutcome
    exit_code: int
    files: list[Path]


def run_scenario(scenario: Scenario, out_dir: str | os.PathLike[str] | None = None) -> RunResult:
    """Run one scenario and write the requested artifacts."""
    out = Path(out_dir) if out_dir is not None else default_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    pop = scenario.population()
    outcome = run_outcome(scenario, check_ce="ce" in scenario.outputs)
    files = []
    if "trace" in scenario.outputs:
        files.append(_write(out / "trace.csv", trace_csv(outcome)))
    if "final" in scenario.outputs:
        files.append(_write(out / "final.csv", final_csv(outcome, pop)))
    if "ce" in scenario.outputs:
        text = json.dumps(ce_summary(outcome, scenario, pop), indent=2, sort_keys=True) + "\n"
        files.append(_write(out / "ce_report.json", text))
    return RunResult(outcome, VERDICT_EXIT[outcome.verdict.kind], files)


def _write(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# sweeps


SWEEP_PARAMETERS = ("gamma", "gamma_r_gamma_p_pair", "mu", "theta0")


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple[Any, ...]
    base: Scenario
    name: str = "sweep"

    def __post_init__(self) -> None:
        if self.parameter not in SWEEP_PARAMETERS:
            raise ScenarioError(f"sweep.parameter: expected one of {SWEEP_PARAMETERS}, got {self.parameter!r}")
        if not self.values:
            raise ScenarioError("sweep.values: must be non-empty")

    def cell(self, value: Any) -> Scenario:
        b = self.base
        if self.parameter == "gamma":
            return replace(b, rule=MatchingRule.asymmetric(float(value)))
        if self.parameter == "gamma_r_gamma_p_pair":
            gr, gp = value
            return replace(b, rule=MatchingRule.long_range(float(gr), float(gp)))
        if self.parameter == "mu":
            if not 0.0 < float(value) < 1.0:
                raise ScenarioError(f"sweep.values: step size {value} must lie in (0, 1)")
            return replace(b, mu=float(value))
        return replace(b, theta0=float(value))


def load_sweep(path: str | os.PathLike[str]) -> SweepSpec:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{p}: not valid JSON ({exc})") from None
    if data.get("schema_version") != SCHEMA_VERSION:
        raise ScenarioError(f"sweep.schema_version: unsupported version {data.get('schema_version')!r}")
    base = _field(data, "base", "sweep")
    if isinstance(base, str):
        ref = Path(base)
        if not ref.is_absolute():
            local = p.parent / ref
            ref = local if local.exists() else bundled(base)
        try:
            base = json.loads(ref.read_text())
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{ref}: not valid JSON ({exc})") from None
    if not isinstance(base, dict):
        raise ScenarioError("sweep.base: expected a scenario object or file name")
    scenario = scenario_from_dict({**base, **data.get("overrides", {})})
    values = tuple(tuple(v) if isinstance(v, list) else v for v in _field(data, "values", "sweep"))
    return SweepSpec(str(_field(data, "parameter", "sweep")), values, scenario, str(data.get("name", p.stem)))


@dataclass(frozen=True)
class SweepRow:
    value: Any
    rule: str
    mu: float
    verdict: str
    iterations: int
    quality: dict[str, float]
    welfare: dict[str, float]
    quality_argmax: bool = False
    welfare_argmax: bool = False

    @property
    def converged(self) -> bool:
        return self.verdict == "converged"


def sweep_cell(scenario: Scenario, value: Any) -> SweepRow:
    pop = scenario.population()
    outcome = run_outcome(scenario, check_ce=False)
    obj = designer_objectives(outcome.final, pop, scenario.rule)
    return SweepRow(
        value=value,
        rule=scenario.rule.label,
        mu=scenario.mu,
        verdict=outcome.verdict.kind,
        iterations=outcome.verdict.t,
        quality={n: obj.quality(n) for n in NORMALIZATIONS},
        welfare={n: obj.welfare(n) for n in NORMALIZATIONS},
    )


def _cell_job(args: tuple[Scenario, Any]) -> SweepRow:
    return sweep_cell(*args)


@dataclass
class SweepResult:
    spec: SweepSpec
    rows: list[SweepRow]

    def argmax(self, objective: str) -> Any:
        flag = f"{objective}_argmax"
        hits = [r.value for r in self.rows if getattr(r, flag)]
        return hits[0] if hits else None

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            [self.spec.parameter, "rule", "mu", "verdict", "iterations"]
            + [f"quality_{n}" for n in NORMALIZATIONS]
            + [f"welfare_{n}" for n in NORMALIZATIONS]
            + ["quality_argmax", "welfare_argmax"]
        )
        for r in self.rows:
            value = " ".join(_fmt(v) for v in r.value) if isinstance(r.value, tuple) else _fmt(r.value)
            w.writerow(
                [value, r.rule, _fmt(r.mu), r.verdict, r.iterations]
                + [_fmt(r.quality[n]) for n in NORMALIZATIONS]
                + [_fmt(r.welfare[n]) for n in NORMALIZATIONS]
                + [int(r.quality_argmax), int(r.welfare_argmax)]
            )
        return buf.getvalue()


def run_sweep(sweep: SweepSpec, out_dir: str | os.PathLike[str] | None = None, jobs: int = 1) -> SweepResult:
    """One run per value; argmax rows are marked among converged cells only.

    A cell that does not converge has no equilibrium value, so it is kept in
    the table but never marked.
    """
    jobs_list = [(sweep.cell(v), v) for v in sweep.values]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_cell_job, jobs_list))
    else:
        rows = [_cell_job(j) for j in jobs_list]
    rows = _mark_argmax(rows)
    result = SweepResult(sweep, rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write(out / f"{sweep.name}_summary.csv", result.csv())
    return result


def _mark_argmax(rows: list[SweepRow]) -> list[SweepRow]:
    ok = [i for i, r in enumerate(rows) if r.converged]
    if not ok:
        return rows
    # raw totals; with equal type sizes every normalization has the same argmax
    qi = max(ok, key=lambda i: rows[i].quality["raw"])
    wi = max(ok, key=lambda i: rows[i].welfare["raw"])
    return [replace(r, quality_argmax=i == qi, welfare_argmax=i == wi) for i, r in enumerate(rows)]


def max_step_size(scenario: Scenario, mu_lo: float, mu_hi: float, resolution: float = 0.01):
    def converges(mu: float) -> bool:
        return run_outcome(replace(scenario, mu=mu), check_ce=False).verdict.converged

    return find_max_step_size(converges, mu_lo, mu_hi, resolution)


# ---------------------------------------------------------------------------
# golden outputs


@dataclass
class GoldenReport:
    passed: bool
    cases: list[str]
    diffs: list[str]


def write_golden(scenario_path: str | os.PathLike[str], case_dir: str | os.PathLike[str]) -> None:
    """Store a scenario and its current outputs as a golden case."""
    case = Path(case_dir)
    case.mkdir(parents=True, exist_ok=True)
    scenario = load_scenario(scenario_path)
    (case / "scenario.json").write_text(json.dumps(scenario.to_dict(), indent=2) + "\n")
    run_scenario(scenario, case)


def verify_golden(golden_dir: str | os.PathLike[str], rtol: float = 1e-10) -> GoldenReport:
    """Re-run every case under ``golden_dir`` and compare with the stored outputs.

    Files must match byte for byte or, failing that, number by number within
    ``rtol``; the first differing cell of each file is reported.
    """
    root = Path(golden_dir)
    cases = sorted(p.parent for p in root.glob("*/scenario.json"))
    if not cases:
        return GoldenReport(False, [], [f"{root}: no golden cases found"])
    diffs: list[str] = []
    for case in cases:
        scenario = load_scenario(case / "scenario.json")
        with tempfile.TemporaryDirectory() as tmp:
            run_scenario(scenario, tmp)
            for expected in sorted(case.iterdir()):
                if expected.name == "scenario.json":
                    continue
                got = Path(tmp) / expected.name
                if not got.exists():
                    diffs.append(f"{case.name}/{expected.name}: not produced")
                    continue
                msg = _compare(expected.read_text(), got.read_text(), rtol)
                if msg:
                    diffs.append(f"{case.name}/{expected.name}: {msg}")
    return GoldenReport(not diffs, [c.name for c in cases], diffs)


def _compare(expected: str, got: str, rtol: float) -> str | None:
    if expected == got:
        return None
    a, b = expected.splitlines(), got.splitlines()
    if len(a) != len(b):
        return f"{len(b)} lines, expected {len(a)}"
    for n, (la, lb) in enumerate(zip(a, b), start=1):
        if la == lb:
            continue
        ca, cb = _tokens(la), _tokens(lb)
        if len(ca) != len(cb):
            return f"line {n}: field count differs"
        for col, (x, y) in enumerate(zip(ca, cb), start=1):
            if x == y:
                continue
            try:
                fx, fy = float(x), float(y)
            except ValueError:
                return f"line {n}, field {col}: {y!r} != {x!r}"
            if math.isnan(fx) and math.isnan(fy):
                continue
            if not math.isclose(fx, fy, rel_tol=rtol, abs_tol=rtol):
                return f"line {n}, field {col}: {fy!r} != {fx!r}"
    return None


def _tokens(line: str) -> list[str]:
    return [t.strip(' ",') for t in line.replace(":", ",").split(",")]
