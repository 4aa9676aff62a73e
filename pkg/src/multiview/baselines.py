"""
Comparison methods for multiview recovery.

Gradient: alternating gradient descent on the prototype and on relaxed
permutation matrices P_i in [0, 1]^{N x N}, with a penalty pulling row and
column sums toward one. IgnoreP: least squares assuming every P_i is the
identity.
"""

from typing import List, Optional, Sequence, Tuple
from concurrent.futures import ThreadPoolExecutor
import logging

import numpy as np
from pydantic import BaseModel, Field

from core import DimensionMismatch, Grid, Signal, ViewData, check_finite

logger = logging.getLogger(__name__)


class BaselineConfig(BaseModel):
    """Settings shared by both comparison methods."""
    # R(P) sums raw displacement mass, so its weight sits near beta / K_s of the proposed method
    beta: float = Field(0.05, ge=0, description="Weight of the displacement regularizer R(P)")
    mu: Optional[float] = Field(None, gt=0, description="Row/column-sum penalty; defaults to 10 * beta")
    step_size: float = Field(1.0, gt=0, description="Step relative to the subproblem's Lipschitz bound")
    plan_step_size: Optional[float] = Field(
        None, gt=0, description="gamma_0 of the relaxed-permutation steps; null means step_size / curvature"
    )
    step_decay: float = Field(0.01, ge=0)
    inner_tmax: int = Field(30, ge=1)
    outer_tmax: int = Field(30, ge=1)
    box_projection: bool = True
    use_normal_equations: bool = True

    @property
    def mu_value(self) -> float:
        if self.mu is not None:
            return self.mu
        return 10.0 * self.beta

    def step_at(self, t: int, lipschitz: float) -> float:
        if lipschitz <= 0:
            return 0.0
        return self.step_size / (lipschitz * (1.0 + self.step_decay * t))

    def plan_step_at(self, t: int, curvature: float) -> float:
        """gamma_t = gamma_0 / (1 + step_decay * t) for the P_i block."""
        if self.plan_step_size is not None:
            gamma0 = self.plan_step_size
        elif curvature > 0:
            gamma0 = self.step_size / curvature
        else:
            return 0.0
        return gamma0 / (1.0 + self.step_decay * t)


def diagonal_mass(P: np.ndarray) -> float:
    """Fraction of the plan's mass sitting on the diagonal."""
    total = float(P.sum())
    if total <= 0:
        return 0.0
    return float(np.trace(P)) / total


def _sum_penalty_gradient(P: np.ndarray, mu: float) -> np.ndarray:
    row_excess = P.sum(axis=1) - 1.0
    col_excess = P.sum(axis=0) - 1.0
    return 2.0 * mu * (row_excess[:, None] + col_excess[None, :])


def _update_plan(view: ViewData, z: np.ndarray, P: np.ndarray, distances: np.ndarray,
                 cfg: BaselineConfig, a_norm2: float) -> np.ndarray:
    mu = cfg.mu_value
    # data-term Lipschitz bound plus the per-entry curvature of the sum penalty
    curvature = a_norm2 * float(z @ z) + 4.0 * mu
    P = P.copy()
    for t in range(cfg.inner_tmax):
        residual = view.A.apply(P @ z) - view.y
        gradient = np.outer(view.A.adjoint(residual), z) + cfg.beta * distances
        gradient += _sum_penalty_gradient(P, mu)
        P -= cfg.plan_step_at(t, curvature) * gradient
        if cfg.box_projection:
            np.clip(P, 0.0, 1.0, out=P)
        check_finite(P, f"Relaxed permutation at step {t}")
    return P


def _effective_operator(view: ViewData, P: np.ndarray) -> np.ndarray:
    # A P F as a dense matrix
    return view.A.matrix @ P @ view.F.matrix


def _check_views(views: Sequence[ViewData], x_init: Signal) -> None:
    if not views:
        raise ValueError("Baselines need at least one view")
    for i, view in enumerate(views):
        if view.N != x_init.grid.N:
            raise DimensionMismatch(f"View {i} has size {view.N} but x_init has {x_init.grid.N}")


def baseline_gradient(views: Sequence[ViewData], cfg: BaselineConfig, x_init: Signal,
                      p_init: Optional[Sequence[np.ndarray]] = None,
                      trace: Optional[List[float]] = None, workers: int = 1) -> Signal:
    """
    Alternating gradient descent on x and relaxed permutations P_i.

    Minimizes sum_i 1/2 ||y_i - A_i P_i F_i x||^2 + beta * R(P_i)
    + mu * (||P_i 1 - 1||^2 + ||P_i^T 1 - 1||^2), clipping P_i to [0, 1]
    after every step when box_projection is set.

    Args:
        views: Measurement bundles, one per view
        cfg: Baseline settings
        x_init: Starting prototype
        p_init: Starting relaxed permutations; identity when omitted
        trace: Optional list receiving the mean diagonal mass after each outer iteration
        workers: Threads used for the independent per-view P updates

    Returns:
        Final prototype estimate
    """
    _check_views(views, x_init)
    grid: Grid = x_init.grid
    n = grid.N
    if p_init is None:
        plans = [np.eye(n) for _ in views]
    else:
        if len(p_init) != len(views):
            raise DimensionMismatch(f"{len(p_init)} initial plans for {len(views)} views")
        plans = [np.array(P, dtype=float) for P in p_init]
    a_norms = [float(np.linalg.norm(view.A.matrix, 2)) ** 2 for view in views]
    distances = grid.squared_distances
    x = x_init.values.copy()
    logger.info(f"Gradient baseline on {len(views)} views (N={n}, mu={cfg.mu_value:g})")

    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for outer in range(cfg.outer_tmax):
            def update(i: int) -> np.ndarray:
                z = views[i].F.apply(x)
                return _update_plan(views[i], z, plans[i], distances, cfg, a_norms[i])

            if executor is not None:
                plans = list(executor.map(update, range(len(views))))
            else:
                plans = [update(i) for i in range(len(views))]

            operators = [_effective_operator(view, P) for view, P in zip(views, plans)]
            lipschitz = sum(float(np.linalg.norm(B, 2)) ** 2 for B in operators)
            for t in range(cfg.inner_tmax):
                gradient = np.zeros_like(x)
                for B, view in zip(operators, views):
                    gradient += B.T @ (B @ x - view.y)
                x = x - cfg.step_at(t, lipschitz) * gradient
                check_finite(x, f"Gradient baseline prototype at outer iteration {outer}")

            if trace is not None:
                trace.append(float(np.mean([diagonal_mass(P) for P in plans])))
            logger.debug(f"Gradient baseline outer iteration {outer + 1}/{cfg.outer_tmax} done")
    finally:
        if executor is not None:
            executor.shutdown()

    return Signal(grid, x)


def stacked_system(views: Sequence[ViewData]) -> Tuple[np.ndarray, np.ndarray]:
    """Stack A_i F_i and y_i over the views."""
    stacked = np.vstack([view.A.matrix @ view.F.matrix for view in views])
    rhs = np.concatenate([view.y for view in views])
    return stacked, rhs


def solves_directly(stacked: np.ndarray, cfg: BaselineConfig) -> bool:
    return bool(cfg.use_normal_equations and np.linalg.matrix_rank(stacked) == stacked.shape[1])


def baseline_ignore_p(views: Sequence[ViewData], cfg: BaselineConfig, x_init: Signal) -> Signal:
    """
    Least squares over the stacked operators A_i F_i, treating every P_i as identity.

    Uses a direct least-squares solve when the stacked operator has full column
    rank and use_normal_equations is set; otherwise runs outer_tmax * inner_tmax
    gradient steps from x_init.
    """
    _check_views(views, x_init)
    stacked, rhs = stacked_system(views)
    n = x_init.grid.N

    if solves_directly(stacked, cfg):
        x, *_ = np.linalg.lstsq(stacked, rhs, rcond=None)
        check_finite(x, "IgnoreP least-squares solution")
        logger.debug(f"IgnoreP solved directly on a {stacked.shape[0]}x{n} system")
        return Signal(x_init.grid, x)

    lipschitz = float(np.linalg.norm(stacked, 2)) ** 2
    x = x_init.values.copy()
    for t in range(cfg.outer_tmax * cfg.inner_tmax):
        x = x - cfg.step_at(t, lipschitz) * (stacked.T @ (stacked @ x - rhs))
        check_finite(x, f"IgnoreP iterate at step {t}")
    logger.debug(f"IgnoreP ran {cfg.outer_tmax * cfg.inner_tmax} gradient steps (rank deficient)")
    return Signal(x_init.grid, x)
