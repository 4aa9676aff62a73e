"""
Synthetic multiview instances.

Letter scenes rasterized stroke by stroke with Pillow, rigid per-stroke
deformations F_i, bounded local permutations P_i, Gaussian measurement
operators and SNR-calibrated noise, combined as y_i = A_i P_i F_i x + n_i.
Instances serialize to a single JSON document.
"""

from typing import Any, Dict, List, Literal, Optional, Tuple
from dataclasses import dataclass, field
from pathlib import Path
import json
import logging
import math

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, Field

from core import (
    DeformationOp,
    DimensionMismatch,
    Grid,
    LetterDoesNotFit,
    LinearMeasurementOp,
    NoCollisionFreePlacement,
    Signal,
    SupportSet,
    ViewData,
    ZeroRows,
    noise_for_snr,
)

logger = logging.getLogger(__name__)

Letter = Literal["E", "T"]

DEFAULT_GRID = Grid(16, 32)

INSTANCE_FORMAT_VERSION = 1

# Strokes as (row0, col0, row1, col1), inclusive, relative to the letter's bounding box
LETTER_STROKES: Dict[str, List[Tuple[int, int, int, int]]] = {
    "E": [
        (0, 0, 9, 1),   # spine
        (0, 2, 1, 8),   # top arm
        (4, 2, 5, 7),   # middle arm
        (8, 2, 9, 8),   # bottom arm
    ],
    "T": [
        (0, 0, 1, 11),  # bar
        (2, 5, 9, 6),   # stem
    ],
}


def _bounding_box(strokes: List[Tuple[int, int, int, int]]) -> Tuple[int, int]:
    height = max(s[2] for s in strokes) + 1
    width = max(s[3] for s in strokes) + 1
    return height, width


def _rasterize(grid: Grid, stroke: Tuple[int, int, int, int], offset: Tuple[int, int]) -> np.ndarray:
    """Flat indices covered by one stroke drawn on a blank grid-sized canvas."""
    r0, c0, r1, c1 = stroke
    canvas = Image.new("L", (grid.cols, grid.rows), 0)
    draw = ImageDraw.Draw(canvas)
    draw.rectangle([c0 + offset[1], r0 + offset[0], c1 + offset[1], r1 + offset[0]], fill=255)
    return np.flatnonzero(np.asarray(canvas).reshape(-1) > 0)


@dataclass(frozen=True, eq=False)
class SceneSpec:
    """Binary letter scene with its stroke partition."""
    letter: Letter
    grid: Grid
    level: float
    components: Tuple[SupportSet, ...]

    def __post_init__(self):
        if not self.level > 0:
            raise ValueError(f"Reflectivity level must be positive, got {self.level}")
        if not self.components:
            raise ValueError("SceneSpec needs at least one component")
        seen = np.zeros(self.grid.N, dtype=bool)
        for component in self.components:
            mask = component.mask(self.grid.N)
            if np.any(seen & mask):
                raise ValueError("Scene components overlap")
            seen |= mask

    @classmethod
    def for_letter(cls, letter: str = "E", grid: Optional[Grid] = None, level: float = 1.0) -> "SceneSpec":
        """Center the letter's strokes on the grid, one component per stroke."""
        grid = grid or DEFAULT_GRID
        if letter not in LETTER_STROKES:
            raise ValueError(f"Unsupported letter: {letter!r} (choose from {sorted(LETTER_STROKES)})")
        strokes = LETTER_STROKES[letter]
        height, width = _bounding_box(strokes)
        if height > grid.rows or width > grid.cols:
            raise LetterDoesNotFit(
                f"Letter {letter} needs {height}x{width} pixels, grid is {grid.rows}x{grid.cols}"
            )
        offset = ((grid.rows - height) // 2, (grid.cols - width) // 2)
        components = tuple(SupportSet(_rasterize(grid, stroke, offset)) for stroke in strokes)
        return cls(letter=letter, grid=grid, level=level, components=components)

    @property
    def support(self) -> SupportSet:
        return SupportSet(np.concatenate([c.indices for c in self.components]))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "letter": self.letter,
            "grid": self.grid.to_dict(),
            "level": self.level,
            "components": [c.to_list() for c in self.components],
        }


class PerturbSpec(BaseModel):
    """Ranges for the per-stroke shifts and the local permutation."""
    displacement_radius: int = Field(2, ge=0, description="Max grid distance a pixel moves under P_i")
    shift_rows: int = Field(1, ge=0, description="Max absolute row shift of a component under F_i")
    shift_cols: int = Field(2, ge=0, description="Max absolute column shift of a component under F_i")
    swap_prob: float = Field(0.5, ge=0, le=1, description="Chance each support pixel starts a local swap")
    max_attempts: int = Field(100, ge=1, description="Resampling budget for collision-free shifts")


@dataclass(eq=False)
class Measurement:
    """Measurement matrix, noisy measurements and the noise that produced them."""
    y: np.ndarray
    A: LinearMeasurementOp
    noise: np.ndarray


def make_scene(spec: SceneSpec) -> Signal:
    """Binary image with spec.level on every stroke pixel."""
    values = np.zeros(spec.grid.N)
    values[spec.support.indices] = spec.level
    return Signal(spec.grid, values)


def _shift_range(coords: np.ndarray, limit: int, size: int) -> Tuple[int, int]:
    return max(-limit, -int(coords.min())), min(limit, size - 1 - int(coords.max()))


def make_deformation(scene: SceneSpec, perturb: PerturbSpec, rng: np.random.Generator) -> DeformationOp:
    """
    Rigidly shift each component by a sampled offset.

    Shifts are drawn per component inside ranges that keep it on the grid and
    redrawn together until no two moved components overlap.

    Returns:
        Permutation F with (F x)[n] = x[F.indices[n]]
    """
    grid = scene.grid
    positions = grid.positions
    ranges = []
    for component in scene.components:
        coords = positions[component.indices]
        ranges.append((
            _shift_range(coords[:, 0], perturb.shift_rows, grid.rows),
            _shift_range(coords[:, 1], perturb.shift_cols, grid.cols),
        ))

    for attempt in range(1, perturb.max_attempts + 1):
        targets = []
        for component, (row_range, col_range) in zip(scene.components, ranges):
            dr = int(rng.integers(row_range[0], row_range[1] + 1))
            dc = int(rng.integers(col_range[0], col_range[1] + 1))
            targets.append(component.indices + dr * grid.cols + dc)
        moved = np.concatenate(targets)
        if np.unique(moved).size == moved.size:
            break
    else:
        raise NoCollisionFreePlacement(
            f"Components still collide after {perturb.max_attempts} placement attempts"
        )

    indices = np.empty(grid.N, dtype=np.int64)
    sources = np.concatenate([c.indices for c in scene.components])
    indices[moved] = sources
    # Pair the remaining targets and sources in sorted order
    free_targets = np.setdiff1d(np.arange(grid.N), moved)
    free_sources = np.setdiff1d(np.arange(grid.N), sources)
    indices[free_targets] = free_sources
    logger.debug(f"Placed {len(scene.components)} components after {attempt} attempt(s)")
    return DeformationOp.from_indices(indices)


def _neighbor_offsets(radius: int) -> np.ndarray:
    span = np.arange(-radius, radius + 1)
    dr, dc = np.meshgrid(span, span, indexing="ij")
    keep = (dr ** 2 + dc ** 2 <= radius ** 2) & ((dr != 0) | (dc != 0))
    return np.stack([dr[keep], dc[keep]], axis=1)


def make_local_permutation(grid: Grid, support: SupportSet, radius: int, rng: np.random.Generator,
                           swap_prob: float = 0.5) -> DeformationOp:
    """
    Random transpositions between support pixels and nearby pixels.

    Support pixels are visited in random order; each untouched one starts a
    swap with probability swap_prob, pairing with an untouched pixel at most
    radius away. No pixel takes part in more than one swap, so every pixel
    moves at most radius.
    """
    if radius < 0:
        raise ValueError(f"radius must be nonnegative, got {radius}")
    indices = np.arange(grid.N, dtype=np.int64)
    if radius == 0:
        return DeformationOp.from_indices(indices)

    offsets = _neighbor_offsets(radius)
    touched = np.zeros(grid.N, dtype=bool)
    for n in rng.permutation(support.indices):
        if touched[n] or rng.random() >= swap_prob:
            continue
        row, col = grid.coordinate(int(n))
        candidates = offsets + np.array([row, col])
        inside = (
            (candidates[:, 0] >= 0) & (candidates[:, 0] < grid.rows)
            & (candidates[:, 1] >= 0) & (candidates[:, 1] < grid.cols)
        )
        partners = candidates[inside, 0] * grid.cols + candidates[inside, 1]
        partners = partners[~touched[partners]]
        if partners.size == 0:
            continue
        m = int(rng.choice(partners))
        indices[n], indices[m] = m, n
        touched[n] = touched[m] = True

    logger.debug(f"Local permutation moved {int(touched.sum())} pixels (radius {radius})")
    return DeformationOp.from_indices(indices)


def max_displacement(P: DeformationOp, grid: Grid) -> float:
    """Largest grid distance any pixel travels under the permutation."""
    if P.indices is None:
        raise ValueError("max_displacement needs a permutation with an index vector")
    diff = grid.positions - grid.positions[P.indices]
    return float(np.sqrt(np.max(np.sum(diff ** 2, axis=1))))


def measurement_rows(rate: float, n: int) -> int:
    """M = round(rate * N), halves rounded up."""
    if not 0 < rate <= 1:
        raise ValueError(f"Measurement rate must lie in (0, 1], got {rate}")
    rows = int(math.floor(rate * n + 0.5))
    if rows == 0:
        raise ZeroRows(f"Rate {rate} gives zero measurement rows for N={n}")
    return rows


def make_measurement(x_i_true: Signal, rate: float, snr_db: float, rng: np.random.Generator) -> Measurement:
    """
    Gaussian measurements of one view.

    Args:
        x_i_true: True view image P_i F_i x
        rate: Per-view measurement rate in (0, 1]
        snr_db: Input SNR in dB, +inf for noiseless
        rng: Explicit random stream

    Returns:
        Measurement with A ~ N(0, 1/N) entries and y = A x_i_true + noise
    """
    n = x_i_true.grid.N
    rows = measurement_rows(rate, n)
    A = LinearMeasurementOp(rng.normal(0.0, math.sqrt(1.0 / n), size=(rows, n)))
    clean = A.apply(x_i_true.values)
    noise = noise_for_snr(clean, snr_db, rng)
    return Measurement(y=clean + noise, A=A, noise=noise)


@dataclass(eq=False)
class Instance:
    """One synthetic multiview problem with its ground truth."""
    scene: SceneSpec
    x_true: Signal
    views: List[ViewData]
    P_true: List[DeformationOp]
    x_i_true: List[Signal]
    noise: List[np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.views)

    @property
    def support(self) -> SupportSet:
        return self.scene.support

    @property
    def rate(self) -> float:
        return float(self.metadata.get("rate", self.views[0].A.rate))

    @property
    def total_rate(self) -> float:
        return self.rate * self.K

    def to_dict(self) -> Dict[str, Any]:
        views = []
        for view, P, noise in zip(self.views, self.P_true, self.noise):
            if view.F.indices is None or P.indices is None:
                raise ValueError("Only permutation deformations can be serialized")
            views.append({
                "F": view.F.indices.tolist(),
                "P": P.indices.tolist(),
                "A": view.A.matrix.tolist(),
                "y": view.y.tolist(),
                "noise": np.asarray(noise).tolist(),
            })
        metadata = dict(self.metadata)
        if "snr_db" in metadata:
            metadata["snr_db"] = _encode_snr(metadata["snr_db"])
        return {
            "format_version": INSTANCE_FORMAT_VERSION,
            "scene": {"letter": self.scene.letter, "grid": self.scene.grid.to_dict(),
                      "level": self.scene.level},
            "metadata": metadata,
            "x_true": self.x_true.values.tolist(),
            "views": views,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Instance":
        version = data.get("format_version")
        if version != INSTANCE_FORMAT_VERSION:
            raise ValueError(f"Unsupported instance format version: {version}")
        scene_data = data["scene"]
        grid = Grid(**scene_data["grid"])
        scene = SceneSpec.for_letter(scene_data["letter"], grid, scene_data["level"])
        x_true = Signal(grid, data["x_true"])
        views, P_true, x_i_true, noise = [], [], [], []
        for entry in data["views"]:
            F = DeformationOp.from_indices(entry["F"])
            P = DeformationOp.from_indices(entry["P"])
            views.append(ViewData(np.asarray(entry["y"]), LinearMeasurementOp(np.asarray(entry["A"])), F))
            P_true.append(P)
            x_i_true.append(Signal(grid, P.apply(F.apply(x_true.values))))
            noise.append(np.asarray(entry["noise"], dtype=float))
        metadata = dict(data.get("metadata", {}))
        if "snr_db" in metadata:
            metadata["snr_db"] = _decode_snr(metadata["snr_db"])
        return cls(scene, x_true, views, P_true, x_i_true, noise, metadata)


def _encode_snr(snr_db: float) -> Any:
    return "inf" if math.isinf(snr_db) else snr_db


def _decode_snr(value: Any) -> float:
    return math.inf if value == "inf" else float(value)


def save_instance(instance: Instance, path: Path) -> Path:
    """Write the instance as one JSON document."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(instance.to_dict(), f)
    except OSError as e:
        raise OSError(f"Could not write instance to {path}: {e}") from e
    logger.info(f"Instance saved to {path}")
    return path


def load_instance(path: Path) -> Instance:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Instance file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return Instance.from_dict(json.load(f))


def build_instance(scene: SceneSpec, perturb: PerturbSpec, K: int, rate: float, snr_db: float,
                   seed: int) -> Instance:
    """
    Assemble K views y_i = A_i P_i F_i x + n_i from one seed.

    Each view draws its deformation, local permutation and measurements from
    its own child stream of SeedSequence(seed), so views never share randomness.
    """
    if K < 1:
        raise ValueError(f"Need at least one view, got K={K}")
    x_true = make_scene(scene)
    views, P_true, x_i_true, noise = [], [], [], []
    for view_seq in np.random.SeedSequence(seed).spawn(K):
        deform_rng, perm_rng, meas_rng = (np.random.default_rng(s) for s in view_seq.spawn(3))
        F = make_deformation(scene, perturb, deform_rng)
        P = make_local_permutation(scene.grid, scene.support, perturb.displacement_radius, perm_rng,
                                   perturb.swap_prob)
        x_i = x_true.with_values(P.apply(F.apply(x_true.values)))
        measurement = make_measurement(x_i, rate, snr_db, meas_rng)
        if measurement.A.N != scene.grid.N:
            raise DimensionMismatch(f"Measurement width {measurement.A.N} != grid size {scene.grid.N}")
        views.append(ViewData(measurement.y, measurement.A, F))
        P_true.append(P)
        x_i_true.append(x_i)
        noise.append(measurement.noise)

    metadata = {
        "seed": int(seed),
        "K": K,
        "rate": rate,
        "snr_db": snr_db,
        "perturb": perturb.model_dump(),
    }
    logger.info(f"Built {scene.letter} instance: K={K}, rate={rate}, snr={snr_db} dB, seed={seed}")
    return Instance(scene, x_true, views, P_true, x_i_true, noise, metadata)
