"""
Core domain types for multiview recovery.

Grids, signals, supports, marginals and the measurement/deformation operators
shared by every other module, plus the marginal map, the support threshold
rule, NMSE and SNR-calibrated noise.
"""

from typing import Any, Dict, List, Optional, Tuple, Union
from dataclasses import dataclass, field
from functools import cached_property
import logging
import math

import numpy as np

logger = logging.getLogger(__name__)

# Values at or below this are treated as zero when thresholding iterates
NUMERICAL_FLOOR = 1e-12


class MultiviewError(Exception):
    """Base class for all recovery, transport and data-generation errors."""


class EmptySupport(MultiviewError, ValueError):
    """No entry of a signal exceeds the marginal threshold."""


class ZeroReference(MultiviewError, ValueError):
    """NMSE requested against an all-zero reference."""


class ZeroClean(MultiviewError, ValueError):
    """Noise requested for an all-zero clean measurement."""


class DimensionMismatch(MultiviewError, ValueError):
    """Operands do not share the expected dimensions."""


class InfeasibleMarginals(MultiviewError):
    """The coupling set for a pair of marginals is empty."""


class NumericalUnderflow(MultiviewError):
    """A transport kernel underflowed to zero on a whole row or column."""


class NonFiniteIterate(MultiviewError):
    """An optimization iterate contains NaN or infinite values."""


class LetterDoesNotFit(MultiviewError, ValueError):
    """The requested letter does not fit in the grid."""


class NoCollisionFreePlacement(MultiviewError):
    """Component shifts kept colliding after the allowed resampling attempts."""


class ZeroRows(MultiviewError, ValueError):
    """A measurement rate rounds to zero rows."""


class EmptyResult(MultiviewError):
    """A report was requested for a sweep without records."""


@dataclass(frozen=True)
class Grid:
    """2-D pixel lattice; pixel n sits at (n // cols, n % cols)."""
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"Grid dimensions must be positive, got {self.rows}x{self.cols}")

    @property
    def N(self) -> int:
        return self.rows * self.cols

    @cached_property
    def positions(self) -> np.ndarray:
        """(N, 2) integer coordinates l[n] in row-major order."""
        n = np.arange(self.N)
        return np.stack([n // self.cols, n % self.cols], axis=1)

    @cached_property
    def squared_distances(self) -> np.ndarray:
        """N x N matrix of ||l[n] - l[n']||^2."""
        diff = self.positions[:, None, :] - self.positions[None, :, :]
        return np.sum(diff ** 2, axis=-1).astype(float)

    def index_of(self, row: int, col: int) -> int:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise ValueError(f"Coordinate ({row}, {col}) outside {self.rows}x{self.cols} grid")
        return row * self.cols + col

    def coordinate(self, n: int) -> Tuple[int, int]:
        if not 0 <= n < self.N:
            raise ValueError(f"Index {n} outside grid of size {self.N}")
        return n // self.cols, n % self.cols

    def to_dict(self) -> Dict[str, int]:
        return {"rows": self.rows, "cols": self.cols}


def _frozen_array(values: Any, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Signal:
    """Reflectivity vector over a grid."""
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values).reshape(-1)
        if values.shape[0] != self.grid.N:
            raise DimensionMismatch(
                f"Signal has {values.shape[0]} values but grid has {self.grid.N} pixels"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: Grid) -> "Signal":
        return cls(grid, np.zeros(grid.N))

    def with_values(self, values: np.ndarray) -> "Signal":
        return Signal(self.grid, values)

    def as_image(self) -> np.ndarray:
        return self.values.reshape(self.grid.rows, self.grid.cols)

    def to_dict(self) -> Dict[str, Any]:
        return {"grid": self.grid.to_dict(), "values": self.values.tolist()}


ArrayLike = Union[Signal, np.ndarray]


def as_vector(x: ArrayLike) -> np.ndarray:
    """Return the raw vector behind a Signal or array."""
    if isinstance(x, Signal):
        return x.values
    return np.asarray(x, dtype=float).reshape(-1)


@dataclass(frozen=True, eq=False)
class SupportSet:
    """Sorted, non-empty set of grid indices."""
    indices: np.ndarray

    def __post_init__(self):
        indices = np.unique(np.asarray(self.indices, dtype=np.int64))
        if indices.size == 0:
            raise ValueError("SupportSet must be non-empty")
        if indices[0] < 0:
            raise ValueError(f"SupportSet contains negative index {indices[0]}")
        indices.flags.writeable = False
        object.__setattr__(self, "indices", indices)

    @property
    def size(self) -> int:
        return int(self.indices.size)

    @classmethod
    def from_signal(cls, x: ArrayLike, floor: float = 0.0) -> "SupportSet":
        return cls(np.flatnonzero(as_vector(x) > floor))

    def mask(self, n: int) -> np.ndarray:
        if self.indices[-1] >= n:
            raise DimensionMismatch(f"Support index {self.indices[-1]} outside length {n}")
        m = np.zeros(n, dtype=bool)
        m[self.indices] = True
        return m

    def project(self, values: np.ndarray) -> np.ndarray:
        """Zero every entry outside the support."""
        out = np.zeros_like(values, dtype=float)
        out[self.indices] = values[self.indices]
        return out

    def to_list(self) -> List[int]:
        return self.indices.tolist()


@dataclass(frozen=True, eq=False)
class Marginal:
    """Probability vector over grid pixels."""
    weights: np.ndarray

    def __post_init__(self):
        weights = _frozen_array(self.weights).reshape(-1)
        if np.any(weights < 0):
            raise ValueError("Marginal weights must be nonnegative")
        total = weights.sum()
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"Marginal weights sum to {total!r}, expected 1")
        object.__setattr__(self, "weights", weights)

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.weights > 0)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    def is_uniform(self) -> bool:
        w = self.weights[self.support]
        return bool(np.all(w == w[0]))

    @classmethod
    def uniform_on(cls, indices: np.ndarray, n: int) -> "Marginal":
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size == 0:
            raise EmptySupport("Cannot build a marginal on an empty index set")
        weights = np.zeros(n)
        weights[indices] = 1.0 / indices.size
        return cls(weights)


@dataclass(frozen=True, eq=False)
class LinearMeasurementOp:
    """Dense M x N measurement matrix A_i."""
    matrix: np.ndarray

    def __post_init__(self):
        matrix = _frozen_array(self.matrix)
        if matrix.ndim != 2 or matrix.shape[0] < 1:
            raise ValueError(f"Measurement matrix must be 2-D with at least one row, got {matrix.shape}")
        object.__setattr__(self, "matrix", matrix)

    @property
    def M(self) -> int:
        return self.matrix.shape[0]

    @property
    def N(self) -> int:
        return self.matrix.shape[1]

    @property
    def rate(self) -> float:
        return self.M / self.N

    @classmethod
    def identity(cls, n: int) -> "LinearMeasurementOp":
        return cls(np.eye(n))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.matrix @ x

    def adjoint(self, y: np.ndarray) -> np.ndarray:
        return self.matrix.T @ y


@dataclass(frozen=True, eq=False)
class DeformationOp:
    """N x N deformation matrix F_i; permutations also keep their index vector."""
    matrix: np.ndarray
    is_permutation: bool = False
    indices: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        matrix = _frozen_array(self.matrix)
        if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
            raise DimensionMismatch(f"Deformation must be square, got {matrix.shape}")
        object.__setattr__(self, "matrix", matrix)
        if self.is_permutation:
            if not is_permutation_matrix(matrix):
                raise ValueError("Matrix flagged as permutation is not a permutation matrix")
            if self.indices is None:
                object.__setattr__(self, "indices", _frozen_array(np.argmax(matrix, axis=1), np.int64))

    @classmethod
    def from_indices(cls, indices: np.ndarray) -> "DeformationOp":
        """Permutation with (F x)[n] = x[indices[n]]."""
        indices = np.asarray(indices, dtype=np.int64)
        n = indices.size
        matrix = np.zeros((n, n))
        matrix[np.arange(n), indices] = 1.0
        return cls(matrix, is_permutation=True, indices=_frozen_array(indices, np.int64))

    @classmethod
    def identity(cls, n: int) -> "DeformationOp":
        return cls.from_indices(np.arange(n))

    @property
    def N(self) -> int:
        return self.matrix.shape[0]

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self.indices is not None:
            return x[self.indices]
        return self.matrix @ x

    def adjoint(self, z: np.ndarray) -> np.ndarray:
        if self.indices is not None:
            out = np.zeros_like(z, dtype=float)
            out[self.indices] = z
            return out
        return self.matrix.T @ z


def is_permutation_matrix(matrix: np.ndarray) -> bool:
    """True when every row and column holds exactly one 1 and zeros elsewhere."""
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        return False
    if not np.all((matrix == 0) | (matrix == 1)):
        return False
    return bool(np.all(matrix.sum(axis=0) == 1) and np.all(matrix.sum(axis=1) == 1))


@dataclass(frozen=True, eq=False)
class ViewData:
    """One view: measurements y with operators A and F."""
    y: np.ndarray
    A: LinearMeasurementOp
    F: DeformationOp

    def __post_init__(self):
        y = _frozen_array(self.y).reshape(-1)
        if y.shape[0] != self.A.M:
            raise DimensionMismatch(f"y has length {y.shape[0]} but A has {self.A.M} rows")
        if self.A.N != self.F.N:
            raise DimensionMismatch(f"A has {self.A.N} columns but F is {self.F.N}x{self.F.N}")
        object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.A.N


def check_finite(values: np.ndarray, what: str) -> None:
    """Raise NonFiniteIterate when values hold NaN or infinities."""
    if not np.all(np.isfinite(values)):
        raise NonFiniteIterate(f"{what} contains non-finite values")


def reflectivity_marginal(x: ArrayLike, T: float) -> Marginal:
    """
    Map reflectivities to the uniform distribution over entries above T.

    Args:
        x: Signal or vector of reflectivities (negative entries never pass)
        T: Positive threshold

    Returns:
        Marginal uniform over {n : x[n] > T}
    """
    if not T > 0:
        raise ValueError(f"Threshold must be positive, got {T}")
    values = as_vector(x)
    passing = np.flatnonzero(values > T)
    if passing.size == 0:
        raise EmptySupport(f"No entry exceeds threshold {T:g} (max {values.max():g})")
    return Marginal.uniform_on(passing, values.size)


def threshold_for_support(x: ArrayLike, K_s: int) -> float:
    """
    Threshold letting the K_s largest entries of x pass.

    The threshold is the midpoint between the K_s-th largest value and the
    next strictly smaller one, so ties at the K_s-th value all pass. When the
    K_s-th value is positive the result is clamped to at least NUMERICAL_FLOOR.
    """
    values = as_vector(x)
    if not 1 <= K_s <= values.size:
        raise ValueError(f"K_s must lie in [1, {values.size}], got {K_s}")
    ordered = np.sort(values)[::-1]
    kth = ordered[K_s - 1]
    below = ordered[ordered < kth]
    if below.size:
        T = 0.5 * (kth + below[0])
    else:
        T = kth - max(abs(kth), 1.0) * 0.5
    if kth > NUMERICAL_FLOOR:
        T = max(T, NUMERICAL_FLOOR)
    return float(T)


def support_marginal(x: ArrayLike, K_s: int) -> Marginal:
    """
    Marginal of x under the K_s-largest threshold rule.

    Falls back to the uniform distribution over the K_s largest entries when
    the K_s-th value has collapsed below the numerical floor.
    """
    values = as_vector(x)
    T = threshold_for_support(values, K_s)
    kth = np.sort(values)[::-1][K_s - 1]
    if kth <= NUMERICAL_FLOOR:
        top = np.argsort(-values, kind="stable")[:K_s]
        logger.debug(f"Threshold collapsed (K_s-th value {kth:g}); using top-{K_s} support")
        return Marginal.uniform_on(top, values.size)
    return reflectivity_marginal(values, T)


def nmse(x_hat: ArrayLike, x: ArrayLike) -> float:
    """Normalized squared error ||x_hat - x||^2 / ||x||^2."""
    if isinstance(x_hat, Signal) and isinstance(x, Signal) and x_hat.grid != x.grid:
        raise DimensionMismatch(f"Grids differ: {x_hat.grid} vs {x.grid}")
    estimate, reference = as_vector(x_hat), as_vector(x)
    if estimate.shape != reference.shape:
        raise DimensionMismatch(f"Lengths differ: {estimate.size} vs {reference.size}")
    ref_energy = float(reference @ reference)
    if ref_energy == 0:
        raise ZeroReference("Reference signal has zero norm")
    err = estimate - reference
    return float(err @ err) / ref_energy


def noise_for_snr(clean: np.ndarray, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """
    Gaussian noise rescaled so ||clean||^2 / ||noise||^2 is exactly 10^(snr_db/10).

    Args:
        clean: Noise-free measurement vector
        snr_db: Target input SNR in dB; +inf means noiseless
        rng: Explicit random stream

    Returns:
        Noise vector with the same shape as clean
    """
    clean = np.asarray(clean, dtype=float)
    if math.isinf(snr_db) and snr_db > 0:
        return np.zeros_like(clean)
    clean_energy = float(clean @ clean)
    if clean_energy == 0:
        raise ZeroClean("Cannot calibrate noise against a zero clean signal")
    noise = rng.standard_normal(clean.shape)
    target_energy = clean_energy / 10.0 ** (snr_db / 10.0)
    return noise * math.sqrt(target_energy / float(noise @ noise))


def snr_db_of(clean: np.ndarray, noisy: np.ndarray) -> float:
    """Realized input SNR in dB; +inf when noisy equals clean."""
    residual = np.asarray(noisy) - np.asarray(clean)
    noise_energy = float(residual @ residual)
    if noise_energy == 0:
        return math.inf
    return 10.0 * math.log10(float(clean @ clean) / noise_energy)
