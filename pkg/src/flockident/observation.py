"""Position-velocity histograms and gridded density comparison.

Agent snapshots are binned on a uniform 6D grid covering the spatial box
[-R1, R1]^3 times the velocity box [-v_max, v_max]^3, with the same cell
count per axis on both.  From the 6D histogram we derive the per-cell
position density and momentum density used everywhere else, and compare
gridded densities with the squared Hellinger distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GridSpec",
    "PVHistogram",
    "build_histogram",
    "position_density",
    "momentum_density",
    "hellinger_sq",
    "max_speed",
]


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid: `cells_per_axis` cells on each of the six axes."""

    cells_per_axis: int
    spatial_half_width: float
    velocity_half_width: float = 1.0

    def __post_init__(self):
        if self.cells_per_axis < 1:
            raise ValueError("need at least one cell per axis")
        if self.spatial_half_width <= 0 or self.velocity_half_width <= 0:
            raise ValueError("half-widths must be positive")

    @property
    def dx(self) -> float:
        return 2.0 * self.spatial_half_width / self.cells_per_axis

    @property
    def dv(self) -> float:
        return 2.0 * self.velocity_half_width / self.cells_per_axis

    @property
    def cell_volume(self) -> float:
        return self.dx**3

    @property
    def velocity_cell_volume(self) -> float:
        return self.dv**3

    def centers(self) -> np.ndarray:
        """Spatial cell centers along one axis, shape (n,)."""
        n = self.cells_per_axis
        return -self.spatial_half_width + (np.arange(n) + 0.5) * self.dx

    def velocity_centers(self) -> np.ndarray:
        n = self.cells_per_axis
        return -self.velocity_half_width + (np.arange(n) + 0.5) * self.dv

    def center_points(self) -> np.ndarray:
        """All spatial cell centers, shape (n, n, n, 3) in ij indexing."""
        c = self.centers()
        X, Y, Z = np.meshgrid(c, c, c, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)

    def position_index(self, x) -> np.ndarray:
        """Cell index per axis; cells are [lo, hi) except the last, which
        is closed, so the upper domain face still bins into the grid."""
        idx = np.floor((np.asarray(x) + self.spatial_half_width) / self.dx)
        return np.clip(idx, 0, self.cells_per_axis - 1).astype(np.int64)

    def velocity_index(self, v) -> np.ndarray:
        """Like position_index; out-of-range velocities clip to the
        boundary cells so total histogram mass is preserved."""
        idx = np.floor((np.asarray(v) + self.velocity_half_width) / self.dv)
        return np.clip(idx, 0, self.cells_per_axis - 1).astype(np.int64)


@dataclass
class PVHistogram:
    """Sparse 6D histogram: mass (agent count / N) per occupied cell."""

    spec: GridSpec
    masses: dict[tuple[int, int, int, int, int, int], float]

    @property
    def total_mass(self) -> float:
        return float(sum(self.masses.values()))


def build_histogram(state, spec: GridSpec) -> PVHistogram:
    """Bin one snapshot; each agent contributes 1/N to exactly one cell."""
    n_agents = state.x.shape[0]
    masses: dict[tuple[int, ...], float] = {}
    if n_agents == 0:
        return PVHistogram(spec, masses)
    pi = spec.position_index(state.x)
    vi = spec.velocity_index(state.v)
    cells = np.concatenate([pi, vi], axis=1)
    uniq, counts = np.unique(cells, axis=0, return_counts=True)
    w = 1.0 / n_agents
    for row, cnt in zip(uniq, counts):
        masses[tuple(int(k) for k in row)] = cnt * w
    return PVHistogram(spec, masses)


def position_density(hist: PVHistogram) -> np.ndarray:
    """Velocity-marginal density per spatial cell (mass / cell volume)."""
    n = hist.spec.cells_per_axis
    q = np.zeros((n, n, n))
    for cell, mass in hist.masses.items():
        q[cell[0], cell[1], cell[2]] += mass
    return q / hist.spec.cell_volume


def momentum_density(hist: PVHistogram) -> np.ndarray:
    """First velocity moment per spatial cell, shape (3, n, n, n)."""
    spec = hist.spec
    n = spec.cells_per_axis
    vc = spec.velocity_centers()
    j = np.zeros((3, n, n, n))
    for cell, mass in hist.masses.items():
        i, k, l = cell[0], cell[1], cell[2]
        j[:, i, k, l] += mass * vc[list(cell[3:6])]
    return j / spec.cell_volume


def hellinger_sq(p, q, cell_volume: float) -> float:
    """Squared Hellinger distance between nonnegative gridded densities,
    0.5 * sum((sqrt(p) - sqrt(q))^2) * cell_volume.

    Lies in [0, 1] for unit-mass inputs (up to Riemann mass error).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"field shapes differ: {p.shape} vs {q.shape}")
    if np.any(p < 0) or np.any(q < 0):
        raise ValueError("densities must be nonnegative")
    diff = np.sqrt(p) - np.sqrt(q)
    return 0.5 * float(np.sum(diff * diff)) * cell_volume


def max_speed(velocities) -> float:
    """Largest absolute velocity component over a whole run; defines the
    velocity half-width of the histogram grid."""
    v = np.asarray(velocities)
    if v.size == 0:
        return 0.0
    return float(np.max(np.abs(v)))
