"""
Optimal transport between view marginals.

Builds the ground cost that folds the permutation regularizer and the view
coupling into one matrix, and solves the resulting transport problem either
exactly (assignment / HiGHS LP) or with inexact proximal-point iterations.
Problems are always solved on the support-restricted submatrix and embedded
back into N x N.
"""

from typing import Literal, Optional, Tuple
from dataclasses import dataclass
import logging

import numpy as np
from pydantic import BaseModel, Field
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from core import (
    DimensionMismatch,
    Grid,
    InfeasibleMarginals,
    Marginal,
    NumericalUnderflow,
    Signal,
    reflectivity_marginal,
)

logger = logging.getLogger(__name__)

Solver = Literal["exact", "ipot"]

FEASIBILITY_TOL = 1e-8


class IpotParams(BaseModel):
    """Inexact proximal point settings."""
    prox_weight: float = Field(1.0, gt=0, description="Entropic proximal step on median-normalized costs")
    outer_iters: int = Field(200, gt=0)
    inner_sinkhorn_iters: int = Field(1, gt=0)
    convergence_tol: float = Field(1e-6, gt=0)


# Settings that meet the 1e-3 accuracy bound; runtime defaults stay cheaper and coarser
PRECISE_IPOT = IpotParams(prox_weight=0.05, outer_iters=3000, inner_sinkhorn_iters=1, convergence_tol=1e-13)


@dataclass(frozen=True, eq=False)
class CostMatrix:
    """Ground cost C(x_i, z) together with the weights that built it."""
    entries: np.ndarray
    lam: float
    beta: float
    grid: Grid

    @property
    def N(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Coupling between two marginals, embedded in N x N."""
    entries: np.ndarray
    row_marginal: Marginal
    col_marginal: Marginal
    value: float

    def restricted(self) -> np.ndarray:
        rows, cols = self.row_marginal.support, self.col_marginal.support
        return self.entries[np.ix_(rows, cols)]

    def check_feasibility(self, tol: float = FEASIBILITY_TOL) -> bool:
        """Nonnegativity, marginal sums and zero mass off the support product."""
        P = self.entries
        if np.any(P < 0):
            return False
        if np.max(np.abs(P.sum(axis=1) - self.row_marginal.weights)) > tol:
            return False
        if np.max(np.abs(P.sum(axis=0) - self.col_marginal.weights)) > tol:
            return False
        outside = P.copy()
        outside[np.ix_(self.row_marginal.support, self.col_marginal.support)] = 0
        return not np.any(outside)


def permutation_cost(P: np.ndarray, grid: Grid) -> float:
    """Squared-displacement cost sum_{n,n'} ||l[n] - l[n']||^2 P[n, n']."""
    P = np.asarray(P, dtype=float)
    if P.shape != (grid.N, grid.N):
        raise DimensionMismatch(f"Plan shape {P.shape} does not match grid size {grid.N}")
    return float(np.sum(grid.squared_distances * P))


def build_cost_matrix(x_i: Signal, z: Signal, lam: float, beta: float) -> CostMatrix:
    """
    Ground cost between a view estimate and the deformed prototype.

    C[n, n'] = ||l[n] - l[n']||^2 + lam / (2 beta) * (x_i[n] - z[n'])^2
    """
    if x_i.grid != z.grid:
        raise DimensionMismatch(f"Grids differ: {x_i.grid} vs {z.grid}")
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    diff = x_i.values[:, None] - z.values[None, :]
    entries = x_i.grid.squared_distances + (lam / (2.0 * beta)) * diff ** 2
    return CostMatrix(entries=entries, lam=lam, beta=beta, grid=x_i.grid)


def _check_marginals(C: CostMatrix, u: Marginal, v: Marginal) -> Tuple[np.ndarray, np.ndarray]:
    if u.size != C.N or v.size != C.N:
        raise DimensionMismatch(f"Marginal sizes ({u.size}, {v.size}) do not match cost size {C.N}")
    rows, cols = u.support, v.support
    if rows.size == 0 or cols.size == 0:
        raise InfeasibleMarginals("Marginals must have nonempty support")
    if abs(u.weights.sum() - v.weights.sum()) > 1e-9:
        raise InfeasibleMarginals("Marginals carry different total mass")
    return rows, cols


def round_to_marginals(P: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
    """
    Project an approximate coupling onto the plans with row sums r and column sums c.

    Rows and columns are scaled down where they overshoot, then the remaining
    deficit is distributed with a rank-one correction. Entries stay nonnegative.
    """
    P = np.clip(P, 0.0, None)
    row_sums = P.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(row_sums > 0, np.minimum(r / row_sums, 1.0), 1.0)
    P = x[:, None] * P
    col_sums = P.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.where(col_sums > 0, np.minimum(c / col_sums, 1.0), 1.0)
    P = P * y[None, :]
    err_r = np.clip(r - P.sum(axis=1), 0.0, None)
    err_c = np.clip(c - P.sum(axis=0), 0.0, None)
    mass = err_r.sum()
    if mass > 0:
        P = P + np.outer(err_r, err_c) / mass
    return P


def _embed(sub: np.ndarray, rows: np.ndarray, cols: np.ndarray, n: int) -> np.ndarray:
    P = np.zeros((n, n))
    P[np.ix_(rows, cols)] = sub
    return P


def _make_plan(C: CostMatrix, sub: np.ndarray, u: Marginal, v: Marginal,
               rows: np.ndarray, cols: np.ndarray) -> TransportPlan:
    entries = _embed(sub, rows, cols, C.N)
    value = float(np.sum(C.entries[np.ix_(rows, cols)] * sub))
    return TransportPlan(entries=entries, row_marginal=u, col_marginal=v, value=value)


def solve_exact(C: CostMatrix, u: Marginal, v: Marginal) -> TransportPlan:
    """
    Exact minimizer of <C, P> over the couplings of u and v.

    Uniform marginals on equal-size supports reduce to a linear assignment
    problem; everything else goes through the HiGHS linear program.
    """
    rows, cols = _check_marginals(C, u, v)
    Cs = C.entries[np.ix_(rows, cols)]
    n_r, n_c = rows.size, cols.size

    if n_r == n_c and u.is_uniform() and v.is_uniform():
        r_idx, c_idx = linear_sum_assignment(Cs)
        sub = np.zeros((n_r, n_c))
        sub[r_idx, c_idx] = 1.0 / n_r
        return _make_plan(C, sub, u, v, rows, cols)

    r, c = u.weights[rows], v.weights[cols]
    # Row-sum and column-sum constraints on the flattened (row-major) plan
    A_rows = sparse.kron(sparse.identity(n_r), np.ones((1, n_c)))
    A_cols = sparse.kron(np.ones((1, n_r)), sparse.identity(n_c))
    A_eq = sparse.vstack([A_rows, A_cols]).tocsc()
    b_eq = np.concatenate([r, c])
    res = linprog(Cs.reshape(-1), A_eq=A_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if res.status != 0 or res.x is None:
        raise InfeasibleMarginals(f"Transport LP failed: {res.message}")
    sub = round_to_marginals(res.x.reshape(n_r, n_c), r, c)
    return _make_plan(C, sub, u, v, rows, cols)


def solve_ipot(C: CostMatrix, u: Marginal, v: Marginal, params: Optional[IpotParams] = None,
               warm_start: Optional[TransportPlan] = None) -> TransportPlan:
    """
    Inexact proximal point transport.

    Each outer step multiplies the current plan by the kernel exp(-C / prox_weight)
    (costs normalized by their median nonzero entry) and rescales toward the
    marginals with a few Sinkhorn sweeps. The final plan is rounded onto the
    coupling set so marginal constraints hold to machine precision.

    The default IpotParams trade accuracy for speed: on small random costs the
    value lands within about 1e-2 relative of the exact optimum. Use
    PRECISE_IPOT when the 1e-3 relative bound against solve_exact is needed.

    Args:
        C: Cost matrix
        u: Row marginal
        v: Column marginal
        params: Iteration settings, defaults to IpotParams()
        warm_start: Previous plan on the same supports, blended with the product coupling

    Returns:
        TransportPlan with value <C, P>
    """
    params = params or IpotParams()
    rows, cols = _check_marginals(C, u, v)
    Cs = C.entries[np.ix_(rows, cols)]
    r, c = u.weights[rows], v.weights[cols]

    positive = Cs[Cs > 0]
    scale = float(np.median(positive)) if positive.size else 1.0
    kernel = np.exp(-Cs / (scale * params.prox_weight))
    if not np.all(kernel.any(axis=1)) or not np.all(kernel.any(axis=0)):
        raise NumericalUnderflow(
            f"Kernel underflowed (prox_weight={params.prox_weight:g}, cost scale {scale:g})"
        )

    P = np.outer(r, c)
    if warm_start is not None and np.array_equal(warm_start.row_marginal.support, rows) \
            and np.array_equal(warm_start.col_marginal.support, cols):
        P = 0.5 * P + 0.5 * warm_start.restricted()

    b = np.ones(cols.size)
    previous = np.inf
    increases = 0
    iteration = 0
    for iteration in range(1, params.outer_iters + 1):
        Q = kernel * P
        for _ in range(params.inner_sinkhorn_iters):
            Qb = Q @ b
            if np.any(Qb == 0):
                raise NumericalUnderflow(f"Row scaling underflowed at outer iteration {iteration}")
            a = r / Qb
            Qa = Q.T @ a
            if np.any(Qa == 0):
                raise NumericalUnderflow(f"Column scaling underflowed at outer iteration {iteration}")
            b = c / Qa
        P = a[:, None] * Q * b[None, :]
        value = float(np.sum(Cs * P))
        if iteration > 1 and value > previous + params.convergence_tol:
            increases += 1
        if abs(previous - value) < params.convergence_tol:
            break
        previous = value

    if increases:
        logger.warning(f"IPOT objective increased on {increases} of {iteration} outer iterations")
    logger.debug(f"IPOT stopped after {iteration} outer iterations on a {rows.size}x{cols.size} problem")

    sub = round_to_marginals(P, r, c)
    return _make_plan(C, sub, u, v, rows, cols)


def solve_plan(C: CostMatrix, u: Marginal, v: Marginal, solver: Solver = "exact",
               params: Optional[IpotParams] = None,
               warm_start: Optional[TransportPlan] = None) -> TransportPlan:
    """Dispatch to the exact or proximal-point solver."""
    if solver == "exact":
        return solve_exact(C, u, v)
    if solver == "ipot":
        return solve_ipot(C, u, v, params, warm_start)
    raise ValueError(f"Unknown solver: {solver}")


def transport_between(x_i: Signal, z: Signal, u: Marginal, v: Marginal, lam: float, beta: float,
                      solver: Solver = "exact", params: Optional[IpotParams] = None,
                      warm_start: Optional[TransportPlan] = None) -> TransportPlan:
    """Optimal plan between prepared marginals of x_i and z."""
    C = build_cost_matrix(x_i, z, lam, beta)
    return solve_plan(C, u, v, solver, params, warm_start)


def ot_distance(x_i: Signal, z: Signal, T_i: float, T_z: float, lam: float, beta: float,
                solver: Solver = "exact",
                params: Optional[IpotParams] = None) -> Tuple[float, TransportPlan]:
    """
    Transport distance between the thresholded marginals of x_i and z.

    Returns:
        Tuple of (optimal value, optimal plan)
    """
    u = reflectivity_marginal(x_i, T_i)
    v = reflectivity_marginal(z, T_z)
    plan = transport_between(x_i, z, u, v, lam, beta, solver, params)
    return plan.value, plan

