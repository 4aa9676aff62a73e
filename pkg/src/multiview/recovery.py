"""
OT-regularized multiview recovery.

Alternates between per-view estimates x_i (data fit plus transport coupling to
the deformed prototype) and the prototype x (transport coupling to every view),
using envelope-theorem gradients with the optimal plans held fixed.
"""

from typing import Any, Dict, List, Optional, Sequence, Tuple
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from core import (
    DeformationOp,
    DimensionMismatch,
    Grid,
    Marginal,
    Signal,
    SupportSet,
    ViewData,
    check_finite,
    support_marginal,
)
from transport import IpotParams, Solver, TransportPlan, transport_between

logger = logging.getLogger(__name__)

# Relative slack before a monitored objective increase is reported
MONITOR_SLACK = 1e-9


class RecoveryConfig(BaseModel):
    """Weights, step schedule and loop bounds for the alternating recovery."""
    model_config = ConfigDict(arbitrary_types_allowed=True, populate_by_name=True)

    beta: float = Field(2.0, ge=0, description="Weight of the transport term")
    lambda_: float = Field(40.0, ge=0, alias="lambda", description="View coupling weight")
    step_size: Optional[float] = Field(None, ge=0, description="gamma_0; defaults to 0.5 / lambda")
    step_decay: float = Field(0.01, ge=0)
    inner_tmax: int = Field(30, ge=1)
    outer_tmax: int = Field(30, ge=1)
    support: Optional[SupportSet] = None
    support_size_per_view: Optional[int] = Field(None, ge=1)
    solver: Solver = "exact"
    ipot: IpotParams = Field(default_factory=IpotParams)
    project_support: bool = True

    @property
    def gamma0(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 0.5 / self.lambda_ if self.lambda_ > 0 else 0.0

    def step_at(self, t: int) -> float:
        return self.gamma0 / (1.0 + self.step_decay * t)

    @property
    def K_s(self) -> int:
        if self.support_size_per_view is not None:
            return self.support_size_per_view
        if self.support is not None:
            return self.support.size
        raise ValueError("RecoveryConfig needs either support or support_size_per_view")


@dataclass
class RecoveryState:
    """Iterates, last plans and objective trace of a recovery run."""
    prototype: Signal
    views: List[Signal]
    plans: List[Optional[TransportPlan]]
    objective_trace: List[float] = field(default_factory=list)
    iterations: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "views": len(self.views),
            "iterations": self.iterations,
            "objective_trace": list(self.objective_trace),
            "final_objective": self.objective_trace[-1] if self.objective_trace else None,
        }


def _solve(x_i: Signal, z: Signal, u: Marginal, v: Marginal, cfg: RecoveryConfig,
           warm_start: Optional[TransportPlan] = None) -> TransportPlan:
    return transport_between(x_i, z, u, v, cfg.lambda_, cfg.beta, cfg.solver, cfg.ipot, warm_start)


def _data_term(x_i: Signal, view: ViewData) -> float:
    residual = view.y - view.A.apply(x_i.values)
    return 0.5 * float(residual @ residual)


def _view_gradient(x_i: np.ndarray, z: np.ndarray, view: ViewData, plan: TransportPlan,
                   lam: float) -> np.ndarray:
    u = plan.row_marginal.weights
    data = view.A.adjoint(view.A.apply(x_i) - view.y)
    return data + lam * (u * x_i - plan.entries @ z)


def _prototype_gradient(x_i: np.ndarray, z: np.ndarray, F: DeformationOp, plan: TransportPlan,
                        lam: float) -> np.ndarray:
    v = plan.col_marginal.weights
    return lam * F.adjoint(v * z - plan.entries.T @ x_i)


def _check_shapes(x: Signal, x_i: Signal, view: ViewData, plan: Optional[TransportPlan] = None) -> None:
    n = x.grid.N
    if x_i.grid != x.grid or view.N != n:
        raise DimensionMismatch(f"Prototype, view estimate and operators disagree on size {n}")
    if plan is not None and plan.entries.shape != (n, n):
        raise DimensionMismatch(f"Plan shape {plan.entries.shape} does not match size {n}")


def objective(x: Signal, x_i: Signal, view: ViewData, cfg: RecoveryConfig) -> float:
    """
    Per-view objective 1/2 ||y_i - A_i x_i||^2 + beta * OT(a(x_i), a(F_i x)).

    The transport term is skipped when beta is zero.
    """
    _check_shapes(x, x_i, view)
    value = _data_term(x_i, view)
    if cfg.beta == 0:
        return value
    z = x.with_values(view.F.apply(x.values))
    u = support_marginal(x_i, cfg.K_s)
    v = support_marginal(z, cfg.K_s)
    plan = _solve(x_i, z, u, v, cfg)
    return value + cfg.beta * plan.value


def grad_x(x: Signal, x_i: Signal, view: ViewData, plan: TransportPlan, cfg: RecoveryConfig) -> np.ndarray:
    """Gradient in the prototype: lambda F^T (a(Fx) * Fx - P^T x_i), plan held fixed."""
    _check_shapes(x, x_i, view, plan)
    z = view.F.apply(x.values)
    return _prototype_gradient(x_i.values, z, view.F, plan, cfg.lambda_)


def grad_xi(x: Signal, x_i: Signal, view: ViewData, plan: TransportPlan, cfg: RecoveryConfig) -> np.ndarray:
    """Gradient in the view estimate: A^T (A x_i - y) + lambda (a(x_i) * x_i - P F x)."""
    _check_shapes(x, x_i, view, plan)
    z = view.F.apply(x.values)
    return _view_gradient(x_i.values, z, view, plan, cfg.lambda_)


def _monitor(trace: Optional[List[float]], value: float, what: str) -> None:
    if trace is None:
        return
    if trace and value > trace[-1] + MONITOR_SLACK * max(1.0, abs(trace[-1])):
        logger.debug(f"{what} objective increased from {trace[-1]:.6g} to {value:.6g}")
    trace.append(value)


def _require_beta(cfg: RecoveryConfig) -> None:
    if not cfg.beta > 0:
        raise ValueError("Recovery needs beta > 0 to build transport costs")


def _estimate_view(view: ViewData, x: Signal, x_i_init: Signal, cfg: RecoveryConfig,
                   trace: Optional[List[float]] = None,
                   warm_start: Optional[TransportPlan] = None) -> Tuple[Signal, Optional[TransportPlan]]:
    _require_beta(cfg)
    _check_shapes(x, x_i_init, view)
    z = x.with_values(view.F.apply(x.values))
    v = support_marginal(z, cfg.K_s)
    x_i = x_i_init.values.copy()
    plan = warm_start

    for t in range(cfg.inner_tmax):
        current = x_i_init.with_values(x_i)
        u = support_marginal(current, cfg.K_s)
        plan = _solve(current, z, u, v, cfg, plan)
        _monitor(trace, _data_term(current, view) + cfg.beta * plan.value, "View")
        x_i = x_i - cfg.step_at(t) * _view_gradient(x_i, z.values, view, plan, cfg.lambda_)
        check_finite(x_i, f"View iterate at step {t}")

    return x_i_init.with_values(x_i), plan


def estimate_view(view: ViewData, x: Signal, x_i_init: Signal, cfg: RecoveryConfig,
                  trace: Optional[List[float]] = None) -> Signal:
    """
    Estimate one view with the prototype fixed.

    Args:
        view: Measurements and operators of the view
        x: Current prototype
        x_i_init: Starting view estimate
        cfg: Recovery settings
        trace: Optional list receiving f(x, x_i^t) at every step

    Returns:
        View estimate after inner_tmax gradient steps
    """
    x_i, _ = _estimate_view(view, x, x_i_init, cfg, trace)
    return x_i


def _estimate_prototype(views_x: Sequence[Signal], F: Sequence[DeformationOp], x_init: Signal,
                        cfg: RecoveryConfig, trace: Optional[List[float]] = None,
                        warm_starts: Optional[List[Optional[TransportPlan]]] = None
                        ) -> Tuple[Signal, List[Optional[TransportPlan]]]:
    _require_beta(cfg)
    if len(views_x) != len(F):
        raise DimensionMismatch(f"{len(views_x)} view estimates but {len(F)} deformations")
    u = [support_marginal(x_i, cfg.K_s) for x_i in views_x]
    plans: List[Optional[TransportPlan]] = list(warm_starts) if warm_starts else [None] * len(F)
    x = x_init.values.copy()

    for t in range(cfg.inner_tmax):
        current = x_init.with_values(x)
        gradient = np.zeros_like(x)
        total = 0.0
        for i, (x_i, F_i) in enumerate(zip(views_x, F)):
            z = current.with_values(F_i.apply(x))
            v = support_marginal(z, cfg.K_s)
            plans[i] = _solve(x_i, z, u[i], v, cfg, plans[i])
            total += cfg.beta * plans[i].value
            gradient += _prototype_gradient(x_i.values, z.values, F_i, plans[i], cfg.lambda_)
        _monitor(trace, total, "Prototype")
        x = x - cfg.step_at(t) * gradient
        if cfg.project_support and cfg.support is not None:
            x = cfg.support.project(x)
        check_finite(x, f"Prototype iterate at step {t}")

    return x_init.with_values(x), plans


def estimate_prototype(views_x: Sequence[Signal], F: Sequence[DeformationOp], x_init: Signal,
                       cfg: RecoveryConfig, trace: Optional[List[float]] = None) -> Signal:
    """Estimate the prototype with the view estimates fixed."""
    x, _ = _estimate_prototype(views_x, F, x_init, cfg, trace)
    return x


def initial_prototype(views: Sequence[ViewData], cfg: RecoveryConfig, grid: Grid) -> Signal:
    """Backprojection of the first view mapped through F_1^T, support-projected."""
    first = views[0]
    x0 = first.F.adjoint(first.A.adjoint(first.y))
    if cfg.support is not None:
        x0 = cfg.support.project(x0)
    return Signal(grid, x0)


def initial_views(views: Sequence[ViewData], grid: Grid) -> List[Signal]:
    """Per-view backprojections A_i^T y_i."""
    return [Signal(grid, view.A.adjoint(view.y)) for view in views]


def recover(views: Sequence[ViewData], cfg: RecoveryConfig, x_init: Optional[Signal] = None,
            grid: Optional[Grid] = None, workers: int = 1) -> Tuple[Signal, RecoveryState]:
    """
    Alternate view and prototype estimation for outer_tmax rounds.

    Args:
        views: Measurement bundles, one per view
        cfg: Recovery settings
        x_init: Starting prototype; backprojection of the first view when omitted
        grid: Grid of the signals, required when x_init is omitted
        workers: Threads used for the independent per-view updates

    Returns:
        Tuple of (final prototype, RecoveryState)
    """
    if not views:
        raise ValueError("recover needs at least one view")
    _require_beta(cfg)
    if x_init is None:
        if grid is None:
            raise ValueError("Pass either x_init or grid")
        x_init = initial_prototype(views, cfg, grid)
    grid = x_init.grid

    x = x_init
    views_x = initial_views(views, grid)
    view_plans: List[Optional[TransportPlan]] = [None] * len(views)
    proto_plans: List[Optional[TransportPlan]] = [None] * len(views)
    state = RecoveryState(prototype=x, views=views_x, plans=[None] * len(views))
    logger.info(f"Recovering prototype from {len(views)} views (N={grid.N}, K_s={cfg.K_s})")

    def update_view(i: int) -> Tuple[Signal, Optional[TransportPlan]]:
        return _estimate_view(views[i], x, views_x[i], cfg, warm_start=view_plans[i])

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(cfg.outer_tmax):
            if executor is not None:
                results = list(executor.map(update_view, range(len(views))))
            else:
                results = [update_view(i) for i in range(len(views))]
            views_x = [r[0] for r in results]
            view_plans = [r[1] for r in results]

            x, proto_plans = _estimate_prototype(
                views_x, [view.F for view in views], x, cfg, warm_starts=proto_plans
            )
            state.iterations += cfg.inner_tmax
            total = sum(objective(x, x_i, view, cfg) for x_i, view in zip(views_x, views))
            state.objective_trace.append(total)
            logger.debug(f"Outer iteration {t + 1}/{cfg.outer_tmax}: objective {total:.6g}")
    finally:
        if executor is not None:
            executor.shutdown()

    state.prototype = x
    state.views = views_x
    state.plans = proto_plans
    return x, state
