"""Deterministic sample generators for the benchmark distributions.

All generators run off numpy's PCG64 generator seeded explicitly, so batches
are reproducible across platforms.  The 2-d clouds are standardized with
fixed documented constants (not per-batch statistics), so transport metrics
are comparable across runs:

  gauss8     8 equal modes at angles 2 pi k / 8 on a circle of radius
             8/sqrt(2), mode variance 0.1, then divided by the analytic
             per-coordinate std sqrt(R^2/2 + s^2)
  moons      two interleaved half-circles of radius 1, noise std 0.1,
             centered at (0.5, 0.25) and divided by the analytic rms std
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

GAUSS8_RADIUS = 8.0 / math.sqrt(2.0)
GAUSS8_MODE_STD = math.sqrt(0.1)
GAUSS8_SCALE = math.sqrt(GAUSS8_RADIUS ** 2 / 2.0 + GAUSS8_MODE_STD ** 2)

MOONS_NOISE_STD = 0.1
MOONS_CENTER = np.array([0.5, 0.25])
# analytic per-coordinate variances of the noiseless half-circle mixture
_MOONS_VAR_X = 0.75
_MOONS_VAR_Y = (0.5 + 0.75 - 2.0 / math.pi) / 2.0 - 0.0625
MOONS_SCALE = math.sqrt((_MOONS_VAR_X + _MOONS_VAR_Y) / 2.0 + MOONS_NOISE_STD ** 2)

MULTIMODAL_CENTERS = (-2.0, 2.0)
MULTIMODAL_STD = 0.5


@dataclass(frozen=True)
class DatasetSpec:
    """One named distribution plus its scale parameters.

    ``mean``/``var`` apply to gaussian1d, ``point`` to dirac, ``dof`` to
    student_t; the 2-d clouds take no parameters.
    """

    name: str
    n: int
    seed: int = 0
    mean: float = 0.0
    var: float = 1.0
    point: float = 0.0
    dof: float = 2.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.dof <= 0:
            raise ValueError("dof must be positive")
        if self.var <= 0:
            raise ValueError("var must be positive")

    def with_(self, **kwargs) -> "DatasetSpec":
        return replace(self, **kwargs)


@dataclass
class SampleBatch:
    points: np.ndarray          # (n, d)
    provenance: str = "source"  # source | target | bridge
    seed: int | None = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def gauss8_centers() -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(8) / 8.0
    return GAUSS8_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1) / GAUSS8_SCALE


def generate(spec: DatasetSpec, provenance: str = "source") -> SampleBatch:
    """Draw spec.n samples; deterministic given spec.seed."""
    rng = np.random.default_rng(spec.seed)
    name = spec.name
    if name == "gauss8":
        idx = rng.integers(0, 8, size=spec.n)
        angles = 2.0 * np.pi * idx / 8.0
        centers = GAUSS8_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        pts = (centers + GAUSS8_MODE_STD * rng.standard_normal((spec.n, 2))) / GAUSS8_SCALE
    elif name == "moons":
        upper = rng.random(spec.n) < 0.5
        theta = rng.random(spec.n) * np.pi
        x = np.where(upper, np.cos(theta), 1.0 - np.cos(theta))
        y = np.where(upper, np.sin(theta), 0.5 - np.sin(theta))
        pts = np.stack([x, y], axis=1)
        pts += MOONS_NOISE_STD * rng.standard_normal((spec.n, 2))
        pts = (pts - MOONS_CENTER) / MOONS_SCALE
    elif name == "normal2d":
        pts = rng.standard_normal((spec.n, 2))
    elif name == "gaussian1d":
        pts = spec.mean + math.sqrt(spec.var) * rng.standard_normal((spec.n, 1))
    elif name == "dirac":
        pts = np.full((spec.n, 1), spec.point, dtype=np.float64)
    elif name == "student_t":
        # ratio construction: normal over sqrt(chi^2 / dof)
        z = rng.standard_normal(spec.n)
        chi2 = rng.chisquare(spec.dof, size=spec.n)
        pts = (z / np.sqrt(chi2 / spec.dof))[:, None]
    elif name == "multimodal1d":
        side = rng.random(spec.n) < 0.5
        mu = np.where(side, MULTIMODAL_CENTERS[0], MULTIMODAL_CENTERS[1])
        pts = (mu + MULTIMODAL_STD * rng.standard_normal(spec.n))[:, None]
    else:
        raise ValueError(f"unknown dataset name {name!r}")
    return SampleBatch(points=pts.astype(np.float64), provenance=provenance, seed=spec.seed)


def train_test_split(
    batch: SampleBatch, fraction: float, seed: int
) -> tuple[SampleBatch, SampleBatch]:
    """Disjoint deterministic partition with round(n * fraction) points in
    the first part."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    n = batch.n
    n_first = int(round(n * fraction))
    if n_first == 0 or n_first == n:
        raise ValueError(f"degenerate split sizes ({n_first}, {n - n_first})")
    perm = np.random.default_rng(seed).permutation(n)
    first = SampleBatch(batch.points[perm[:n_first]], batch.provenance, batch.seed)
    second = SampleBatch(batch.points[perm[n_first:]], batch.provenance, batch.seed)
    return first, second


def save_batch_csv(batch: SampleBatch, path: str | Path) -> Path:
    path = Path(path)
    d = batch.dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x_{i + 1}" for i in range(d)])
        for row in batch.points:
            writer.writerow([f"{v:.17g}" for v in row])
    return path


def load_batch_csv(path: str | Path, provenance: str = "source") -> SampleBatch:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    pts = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(header))
    return SampleBatch(points=pts, provenance=provenance)
