"""
Experiment harness.

Runs measurement-rate x SNR and number-of-views sweeps over the proposed
method and both baselines, writes raw records as CSV and per-cell
aggregates as JSON, and hosts the oracle/gradient self-test suites.
"""

from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
import hashlib
import itertools
import json
import logging
import math
import time

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator
from scipy.stats import spearmanr
from tqdm import tqdm

from core import (
    DeformationOp,
    EmptyResult,
    Grid,
    LinearMeasurementOp,
    Marginal,
    Signal,
    ViewData,
    nmse,
    support_marginal,
)
from transport import (
    PRECISE_IPOT,
    CostMatrix,
    TransportPlan,
    build_cost_matrix,
    solve_exact,
    solve_ipot,
    transport_between,
)
from recovery import RecoveryConfig, grad_x, grad_xi, initial_prototype, objective, recover
from baselines import BaselineConfig, baseline_gradient, baseline_ignore_p, solves_directly, stacked_system
from synthdata import Instance, PerturbSpec, SceneSpec, build_instance, make_local_permutation, max_displacement

logger = logging.getLogger(__name__)

Method = Literal["proposed", "gradient", "ignore_p"]
METHODS: Tuple[str, ...] = ("proposed", "gradient", "ignore_p")

CSV_COLUMNS = ["method", "rate", "snr_db", "views", "seed", "nmse", "wall_time_s", "iters"]


class SweepConfig(BaseModel):
    """One sweep: the Cartesian product of rates, SNRs, view counts and seeds."""
    name: str = "sweep"
    methods: List[Method] = Field(default_factory=lambda: list(METHODS), min_length=1)
    rates: List[float] = Field(..., min_length=1, description="Per-view measurement rates")
    snr_db: List[float] = Field(..., min_length=1, description="Input SNRs in dB; .inf is noiseless")
    views: List[int] = Field(..., min_length=1)
    seeds: List[int] = Field(..., min_length=1, description="Trial seeds, one instance per cell and seed")
    base_seed: int = Field(0, ge=0)
    letter: str = "E"
    grid_rows: int = Field(16, ge=1)
    grid_cols: int = Field(32, ge=1)
    level: float = Field(1.0, gt=0)
    perturb: PerturbSpec = Field(default_factory=PerturbSpec)
    recovery: RecoveryConfig = Field(default_factory=RecoveryConfig)
    baseline: BaselineConfig = Field(default_factory=BaselineConfig)
    output: str = "build/sweeps"
    workers: int = Field(1, ge=1)
    record_timing: bool = True
    progress: bool = True

    @field_validator("rates")
    @classmethod
    def validate_rates(cls, v: List[float]) -> List[float]:
        for rate in v:
            if not 0 < rate <= 1:
                raise ValueError(f"Measurement rate must lie in (0, 1], got {rate}")
        return v

    @field_validator("views")
    @classmethod
    def validate_views(cls, v: List[int]) -> List[int]:
        if any(k < 1 for k in v):
            raise ValueError(f"View counts must be at least 1, got {v}")
        return v

    @field_validator("seeds")
    @classmethod
    def validate_seeds(cls, v: List[int]) -> List[int]:
        if len(set(v)) != len(v):
            raise ValueError("Seeds must be distinct")
        return v

    def scene(self) -> SceneSpec:
        return SceneSpec.for_letter(self.letter, Grid(self.grid_rows, self.grid_cols), self.level)

    def cells(self) -> List[Tuple[float, float, int, int]]:
        """(rate, snr_db, views, seed) in sweep order."""
        return list(itertools.product(self.rates, self.snr_db, self.views, self.seeds))


@dataclass(frozen=True)
class SweepRecord:
    """Outcome of one method on one sweep cell."""
    method: str
    rate: float
    snr_db: float
    views: int
    seed: int
    nmse: float
    wall_time_s: float
    iters: int

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class SweepResult:
    """Records of a sweep plus the cells that failed."""
    records: List[SweepRecord] = field(default_factory=list)
    failures: List[Dict[str, Any]] = field(default_factory=list)
    name: str = "sweep"

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.to_dict() for r in self.records], columns=CSV_COLUMNS)

    def filter(self, method: Optional[str] = None, snr_db: Optional[float] = None,
               views: Optional[int] = None) -> "SweepResult":
        kept = [
            r for r in self.records
            if (method is None or r.method == method)
            and (snr_db is None or r.snr_db == snr_db)
            and (views is None or r.views == views)
        ]
        return SweepResult(records=kept, failures=list(self.failures), name=self.name)

    def aggregates(self) -> pd.DataFrame:
        """Mean and population standard deviation of NMSE per (method, rate, snr_db, views)."""
        if not self.records:
            raise EmptyResult("No records to aggregate")
        frame = self.to_frame()
        grouped = frame.groupby(["method", "rate", "snr_db", "views"], sort=False)
        summary = grouped.agg(
            nmse_mean=("nmse", "mean"),
            nmse_std=("nmse", lambda s: float(np.std(s.to_numpy(), ddof=0))),
            nmse_median=("nmse", "median"),
            wall_time_mean=("wall_time_s", "mean"),
            count=("nmse", "size"),
        ).reset_index()
        summary["total_rate"] = summary["rate"] * summary["views"]
        return summary


def cell_seed(base_seed: int, *key: Any) -> int:
    """63-bit seed from SHA-256 over the base seed and the cell key."""
    text = "|".join(str(part) for part in (base_seed,) + key)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _proposed_config(cfg: RecoveryConfig, instance: Instance) -> RecoveryConfig:
    support = instance.support
    update: Dict[str, Any] = {"support": support}
    if cfg.support_size_per_view is None:
        update["support_size_per_view"] = support.size
    return cfg.model_copy(update=update)


def run_method(method: str, instance: Instance, recovery_cfg: RecoveryConfig,
               baseline_cfg: BaselineConfig, workers: int = 1) -> Tuple[Signal, int]:
    """
    Run one method on one instance.

    Every method starts from the same support-projected backprojection.

    Returns:
        Tuple of (prototype estimate, iteration count)
    """
    cfg = _proposed_config(recovery_cfg, instance)
    x_init = initial_prototype(instance.views, cfg, instance.scene.grid)
    if method == "proposed":
        x_hat, state = recover(instance.views, cfg, x_init=x_init, workers=workers)
        return x_hat, state.iterations
    if method == "gradient":
        x_hat = baseline_gradient(instance.views, baseline_cfg, x_init, workers=workers)
        return x_hat, baseline_cfg.outer_tmax * baseline_cfg.inner_tmax
    if method == "ignore_p":
        stacked, _ = stacked_system(instance.views)
        iters = 0 if solves_directly(stacked, baseline_cfg) else baseline_cfg.outer_tmax * baseline_cfg.inner_tmax
        return baseline_ignore_p(instance.views, baseline_cfg, x_init), iters
    raise ValueError(f"Unknown method: {method}")


def _run_cell(args: Tuple[SweepConfig, Tuple[float, float, int, int]]) -> Tuple[List[SweepRecord], List[Dict[str, Any]]]:
    cfg, (rate, snr_db, views, seed) = args
    key = {"rate": rate, "snr_db": snr_db, "views": views, "seed": seed}
    records: List[SweepRecord] = []
    failures: List[Dict[str, Any]] = []
    try:
        instance = build_instance(cfg.scene(), cfg.perturb, views, rate, snr_db,
                                  cell_seed(cfg.base_seed, rate, snr_db, views, seed))
    except Exception as e:
        logger.error(f"Instance generation failed for {key}: {str(e)}")
        return records, [{"method": m, **key, "error": str(e)} for m in cfg.methods]

    for method in cfg.methods:
        try:
            start = time.perf_counter()
            x_hat, iters = run_method(method, instance, cfg.recovery, cfg.baseline)
            elapsed = time.perf_counter() - start if cfg.record_timing else 0.0
            records.append(SweepRecord(method, rate, snr_db, views, seed, nmse(x_hat, instance.x_true),
                                       elapsed, iters))
        except Exception as e:
            logger.error(f"Method {method} failed on {key}: {str(e)}")
            failures.append({"method": method, **key, "error": str(e)})
    return records, failures


def run_sweep(cfg: SweepConfig) -> SweepResult:
    """
    Run every method on every (rate, snr_db, views, seed) cell.

    Cells run in a process pool when cfg.workers > 1; results are merged in
    cell order, so the record order never depends on scheduling. Failing cells
    are logged and kept out of the records.
    """
    cells = cfg.cells()
    logger.info(f"Sweep '{cfg.name}': {len(cells)} cells x {len(cfg.methods)} methods, workers={cfg.workers}")
    jobs = [(cfg, cell) for cell in cells]
    progress = tqdm(total=len(jobs), desc=cfg.name, disable=not cfg.progress, leave=False)
    result = SweepResult(name=cfg.name)
    try:
        if cfg.workers > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                outcomes = []
                for outcome in pool.map(_run_cell, jobs):
                    outcomes.append(outcome)
                    progress.update(1)
        else:
            outcomes = []
            for job in jobs:
                outcomes.append(_run_cell(job))
                progress.update(1)
    finally:
        progress.close()

    for records, failures in outcomes:
        result.records.extend(records)
        result.failures.extend(failures)
    logger.info(f"Sweep '{cfg.name}' finished: {len(result.records)} records, {len(result.failures)} failures")
    return result


def rate_trend(result: SweepResult, method: str, snr_db: float, views: Optional[int] = None) -> float:
    """Spearman correlation between per-view rate and mean NMSE; NaN with fewer than two rates."""
    subset = result.filter(method=method, snr_db=snr_db, views=views)
    if not subset.records:
        raise EmptyResult(f"No records for method={method}, snr_db={snr_db}, views={views}")
    means = subset.to_frame().groupby("rate")["nmse"].mean().sort_index()
    if len(means) < 2:
        return math.nan
    rho, _ = spearmanr(means.index.to_numpy(), means.to_numpy())
    return float(rho)


def _json_number(value: float) -> Any:
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, float) and math.isnan(value):
        return None
    return value


def emit_report(result: SweepResult, out_dir: Path) -> Dict[str, Path]:
    """
    Write records.csv and summary.json under out_dir.

    A sweep where every cell failed still gets both files: a header-only CSV
    and a summary holding just the failures.

    Returns:
        Mapping of artifact name to written path
    """
    if not result.records and not result.failures:
        raise EmptyResult("Sweep result has no records or failures to report")
    out_dir = Path(out_dir)
    csv_path = out_dir / "records.csv"
    summary_path = out_dir / "summary.json"

    cells: List[Dict[str, Any]] = []
    trends: Dict[str, Dict[str, Any]] = {}
    if result.records:
        summary = result.aggregates()
        cells = [
            {key: _json_number(value) for key, value in row.items()}
            for row in summary.to_dict(orient="records")
        ]
        for method in summary["method"].unique():
            trends[method] = {
                str(_json_number(snr)): _json_number(rate_trend(result, method, snr))
                for snr in summary.loc[summary["method"] == method, "snr_db"].unique()
            }
    else:
        logger.warning(f"Sweep '{result.name}' produced no records; writing failures only")
    document = {"name": result.name, "cells": cells, "rate_trend": trends,
                "failures": [{k: _json_number(v) for k, v in f.items()} for f in result.failures]}

    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        result.to_frame().to_csv(csv_path, index=False)
        with open(summary_path, "w", encoding="utf-8") as f:
            json.dump(document, f, indent=2)
    except OSError as e:
        raise OSError(f"Could not write sweep report to {out_dir}: {e}") from e

    logger.info(f"Report written to {csv_path} and {summary_path}")
    return {"records": csv_path, "summary": summary_path}


def read_records(path: Path) -> SweepResult:
    """Load records.csv back into a SweepResult."""
    frame = pd.read_csv(path)
    missing = [c for c in CSV_COLUMNS if c not in frame.columns]
    if missing:
        raise ValueError(f"{path} is missing columns: {missing}")
    records = [
        SweepRecord(str(r.method), float(r.rate), float(r.snr_db), int(r.views), int(r.seed),
                    float(r.nmse), float(r.wall_time_s), int(r.iters))
        for r in frame.itertuples(index=False)
    ]
    return SweepResult(records=records)


@dataclass
class SelftestOutcome:
    """Pass/fail summary of one self-test suite."""
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def _oracle_suite(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    grid = Grid(3, 4)
    worst = 0.0
    for _ in range(cases):
        k = int(rng.integers(1, 7))
        rows = rng.choice(grid.N, size=k, replace=False)
        cols = rng.choice(grid.N, size=k, replace=False)
        x_i = Signal(grid, rng.uniform(0, 1, grid.N))
        z = Signal(grid, rng.uniform(0, 1, grid.N))
        C = build_cost_matrix(x_i, z, float(rng.uniform(0, 50)), 1.0)
        plan = solve_exact(C, Marginal.uniform_on(rows, grid.N), Marginal.uniform_on(cols, grid.N))
        sub = C.entries[np.ix_(np.sort(rows), np.sort(cols))]
        brute = min(sum(sub[i, p[i]] for i in range(k)) for p in itertools.permutations(range(k))) / k
        worst = max(worst, abs(plan.value - brute))
    return worst <= 1e-9, f"max |exact - brute force| = {worst:.3g}"


def _ipot_suite(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    grid = Grid(4, 8)
    u = Marginal.uniform_on(np.arange(grid.N), grid.N)
    worst = 0.0
    for _ in range(cases):
        C = CostMatrix(entries=rng.uniform(0, 1, (grid.N, grid.N)), lam=0.0, beta=1.0, grid=grid)
        exact = solve_exact(C, u, u).value
        approx = solve_ipot(C, u, u, PRECISE_IPOT).value
        worst = max(worst, abs(approx - exact) / max(exact, 1e-12))
    return worst <= 1e-3, f"max relative gap = {worst:.3g}"


def _feasibility_suite(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    grid = Grid(3, 4)
    failures = 0
    for _ in range(cases):
        rows = rng.choice(grid.N, size=int(rng.integers(2, 7)), replace=False)
        cols = rng.choice(grid.N, size=int(rng.integers(2, 7)), replace=False)
        u_w, v_w = np.zeros(grid.N), np.zeros(grid.N)
        u_w[rows] = rng.dirichlet(np.ones(rows.size))
        v_w[cols] = rng.dirichlet(np.ones(cols.size))
        u_w /= u_w.sum()
        v_w /= v_w.sum()
        u, v = Marginal(u_w), Marginal(v_w)
        x_i = Signal(grid, rng.uniform(0, 1, grid.N))
        z = Signal(grid, rng.uniform(0, 1, grid.N))
        for solver in ("exact", "ipot"):
            plan = transport_between(x_i, z, u, v, 10.0, 1.0, solver)
            if not plan.check_feasibility(1e-8):
                failures += 1
    return failures == 0, f"{failures} infeasible plans out of {2 * cases}"


SPARSE_GRADIENT_SUPPORT = 6


def gradient_case(rng: np.random.Generator,
                  support_size: Optional[int] = None) -> Tuple[Signal, Signal, ViewData, RecoveryConfig]:
    """
    Small 4x4 instance whose optimal plan is the identity by a wide margin.

    With support_size unset every pixel is in the support and values stay in
    [0.4, 1.6]. With support_size = K_s < 16, K_s pixels carry values in
    [0.4, 1.6] and the rest stay in [0, 0.2], so the threshold sits at least
    0.1 away from every value and no finite-difference step crosses it.
    """
    grid = Grid(4, 4)
    n = grid.N
    if support_size is None or support_size >= n:
        support_size = n
        x_i = rng.uniform(0.5, 1.5, n)
        z = x_i + rng.uniform(-0.1, 0.1, n)
    else:
        on = rng.choice(n, size=support_size, replace=False)
        x_i = rng.uniform(0.0, 0.2, n)
        z = rng.uniform(0.0, 0.2, n)
        x_i[on] = rng.uniform(0.5, 1.5, support_size)
        z[on] = x_i[on] + rng.uniform(-0.1, 0.1, support_size)
    F = DeformationOp.from_indices(rng.permutation(n))
    x = F.adjoint(z)
    A = LinearMeasurementOp(rng.standard_normal((6, n)) / 4.0)
    view = ViewData(rng.standard_normal(6), A, F)
    cfg = RecoveryConfig(beta=2.0, lambda_=1.0, support_size_per_view=support_size)
    return Signal(grid, x), Signal(grid, x_i), view, cfg


def current_plan(x: Signal, x_i: Signal, view: ViewData, cfg: RecoveryConfig) -> TransportPlan:
    """Optimal plan between x_i and F x under the configured support rule."""
    z = x.with_values(view.F.apply(x.values))
    u = support_marginal(x_i, cfg.K_s)
    v = support_marginal(z, cfg.K_s)
    return transport_between(x_i, z, u, v, cfg.lambda_, cfg.beta, cfg.solver, cfg.ipot)


def finite_difference(fn, values: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of a vector."""
    grad = np.zeros_like(values)
    for j in range(values.size):
        step = np.zeros_like(values)
        step[j] = h
        grad[j] = (fn(values + step) - fn(values - step)) / (2 * h)
    return grad


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def _gradient_suite(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    worst = 0.0
    for case in range(cases):
        # alternate full support with a sparse one where the marginal map is not constant
        x, x_i, view, cfg = gradient_case(rng, None if case % 2 == 0 else SPARSE_GRADIENT_SUPPORT)
        plan = current_plan(x, x_i, view, cfg)
        fd_xi = finite_difference(lambda v: objective(x, x_i.with_values(v), view, cfg), x_i.values)
        fd_x = finite_difference(lambda v: objective(x.with_values(v), x_i, view, cfg), x.values)
        worst = max(worst,
                    _relative_error(grad_xi(x, x_i, view, plan, cfg), fd_xi),
                    _relative_error(grad_x(x, x_i, view, plan, cfg), fd_x))
    return worst <= 1e-5, f"max relative gradient error = {worst:.3g}"


def _displacement_suite(rng: np.random.Generator, cases: int) -> Tuple[bool, str]:
    scene = SceneSpec.for_letter("E")
    violations = 0
    for trial in range(cases):
        radius = trial % 4
        P = make_local_permutation(scene.grid, scene.support, radius, rng)
        if max_displacement(P, scene.grid) > radius:
            violations += 1
    return violations == 0, f"{violations} permutations exceeded their radius"


SELFTEST_SUITES = {
    "oracle": (_oracle_suite, 100),
    "ipot": (_ipot_suite, 100),
    "feasibility": (_feasibility_suite, 50),
    "gradient": (_gradient_suite, 20),
    "displacement": (_displacement_suite, 1000),
}


def run_selftest(seed: int = 0, suites: Optional[Sequence[str]] = None) -> List[SelftestOutcome]:
    """
    Run the oracle, solver-accuracy, feasibility, gradient and displacement suites.

    Each suite draws from its own stream of SeedSequence(seed). Exceptions are
    reported as failures of the suite that raised them.
    """
    names = list(suites) if suites else list(SELFTEST_SUITES)
    unknown = [n for n in names if n not in SELFTEST_SUITES]
    if unknown:
        raise ValueError(f"Unknown selftest suites: {unknown}")
    streams = dict(zip(SELFTEST_SUITES, np.random.SeedSequence(seed).spawn(len(SELFTEST_SUITES))))

    outcomes = []
    for name in names:
        suite, cases = SELFTEST_SUITES[name]
        start = time.perf_counter()
        try:
            passed, detail = suite(np.random.default_rng(streams[name]), cases)
        except Exception as e:
            logger.error(f"Selftest suite {name} raised: {str(e)}")
            passed, detail = False, f"raised {type(e).__name__}: {e}"
        elapsed = time.perf_counter() - start
        logger.info(f"Selftest {name}: {'PASS' if passed else 'FAIL'} ({detail}, {elapsed:.2f}s)")
        outcomes.append(SelftestOutcome(name, passed, detail, elapsed))
    return outcomes
