"""Cuboidal arena geometry: an outer cube minus disjoint cubic obstacles.

The flyable region is the closed outer cube with the closed obstacle cubes
removed, so a point exactly on an obstacle face counts as outside the
region.  Region index 0 is the outer cube; indices 1..M-1 are the
obstacles.  All cubes are axis-aligned (sup-norm balls), which keeps every
boundary face flat and every face normal a signed coordinate axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

__all__ = ["Workspace", "SegmentHit"]


class SegmentHit(NamedTuple):
    """Batched result of segment-boundary crossing queries."""

    hit: np.ndarray      # (N,) bool
    t: np.ndarray        # (N,) crossing fraction in [0, 1], inf if no hit
    point: np.ndarray    # (N, 3) crossing points (junk where hit is False)
    normal: np.ndarray   # (N, 3) outward face normal of the crossed cube
    region: np.ndarray   # (N,) region index of the crossed cube
    axis: np.ndarray     # (N,) axis of the crossed face


def _as_points(x) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    if pts.shape[-1] != 3:
        raise ValueError(f"expected 3-vectors, got shape {pts.shape}")
    return pts


@dataclass(frozen=True)
class Workspace:
    """Arena bounded by a cube of half-width R1 centered at the origin,
    cluttered with pairwise disjoint cubic obstacles contained in it
    (touching the outer boundary is allowed)."""

    outer_half_width: float
    obstacle_centers: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    obstacle_half_widths: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "outer_half_width", float(self.outer_half_width))
        centers = np.asarray(self.obstacle_centers, dtype=float).reshape(-1, 3)
        widths = np.atleast_1d(np.asarray(self.obstacle_half_widths, dtype=float))
        object.__setattr__(self, "obstacle_centers", centers)
        object.__setattr__(self, "obstacle_half_widths", widths)
        if self.outer_half_width <= 0:
            raise ValueError("outer half-width must be positive")
        if len(widths) != len(centers):
            raise ValueError("need one half-width per obstacle center")
        if np.any(widths <= 0):
            raise ValueError("obstacle half-widths must be positive")
        if np.any(widths >= self.outer_half_width):
            raise ValueError("obstacles must be strictly smaller than the arena")
        # Containment in the outer cube, checked per coordinate interval.
        # Touching the outer boundary is allowed (faces may coincide).
        reach = np.abs(centers) + widths[:, None]
        if np.any(reach > self.outer_half_width):
            raise ValueError("every obstacle must lie inside the outer cube")
        # Pairwise disjoint: some axis must separate the closed cubes.
        for i in range(len(widths)):
            for j in range(i + 1, len(widths)):
                gap = np.abs(centers[i] - centers[j]) - (widths[i] + widths[j])
                if not np.any(gap > 0):
                    raise ValueError(f"obstacles {i} and {j} overlap or touch")

    @property
    def n_obstacles(self) -> int:
        return len(self.obstacle_half_widths)

    @property
    def n_regions(self) -> int:
        return self.n_obstacles + 1

    def region_center(self, m: int) -> np.ndarray:
        if m == 0:
            return np.zeros(3)
        return self.obstacle_centers[m - 1]

    def region_half_width(self, m: int) -> float:
        if m == 0:
            return self.outer_half_width
        return float(self.obstacle_half_widths[m - 1])

    def _check_region(self, m: int) -> None:
        if not 0 <= m < self.n_regions:
            raise IndexError(f"region index {m} out of range (0..{self.n_regions - 1})")

    def contains(self, x) -> np.ndarray | bool:
        """True where x lies in the arena and strictly outside every obstacle."""
        pts = _as_points(x)
        inside = np.max(np.abs(pts), axis=-1) <= self.outer_half_width
        for c, r in zip(self.obstacle_centers, self.obstacle_half_widths):
            inside &= np.max(np.abs(pts - c), axis=-1) > r
        if pts.ndim == 1:
            return bool(inside)
        return inside

    def boundary_distance(self, x, m: int) -> np.ndarray | float:
        """Euclidean distance from x to the boundary surface of cube m.

        Well defined on both sides of the surface: for interior points it
        is the distance to the nearest face, for exterior points the
        distance to the nearest face/edge/corner.
        """
        self._check_region(m)
        pts = _as_points(x)
        d = np.abs(pts - self.region_center(m)) - self.region_half_width(m)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        dist = outside - inside
        if pts.ndim == 1:
            return float(dist)
        return dist

    def segment_exit_batch(self, p0, p1) -> SegmentHit:
        """Earliest point where each segment p0->p1 leaves the arena.

        A segment leaves by crossing the outer cube outward or by entering
        an obstacle.  Ties between faces at an edge/corner resolve to the
        smallest axis index.  The crossing coordinate along the face axis
        is snapped exactly onto the face plane.
        """
        P0 = np.atleast_2d(_as_points(p0))
        P1 = np.atleast_2d(_as_points(p1))
        n = P0.shape[0]
        D = P1 - P0
        r1 = self.outer_half_width
        inf = np.inf

        cand_t = []
        cand_axis = []
        cand_sign = []

        # Outer cube: exit through the face the motion points at.
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = (r1 - P0) / D
            t_lo = (-r1 - P0) / D
        t_out = np.where(D > 0, t_hi, np.where(D < 0, t_lo, inf))
        t_out = np.maximum(t_out, 0.0)
        ax_out = np.argmin(t_out, axis=1)
        rows = np.arange(n)
        cand_t.append(t_out[rows, ax_out])
        cand_axis.append(ax_out)
        cand_sign.append(np.sign(D[rows, ax_out]).astype(int))

        # Obstacles: slab test, entry face is the latest slab entry.
        for c, r in zip(self.obstacle_centers, self.obstacle_half_widths):
            lo, hi = c - r, c + r
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo - P0) / D
                t2 = (hi - P0) / D
            near = np.minimum(t1, t2)
            far = np.maximum(t1, t2)
            in_slab = (P0 >= lo) & (P0 <= hi)
            zero = D == 0
            near = np.where(zero, np.where(in_slab, -inf, inf), near)
            far = np.where(zero, np.where(in_slab, inf, -inf), far)
            tn = np.max(near, axis=1)
            tf = np.min(far, axis=1)
            ax = np.argmax(near, axis=1)
            ok = (tn <= tf) & (tn >= 0.0) & np.isfinite(tn)
            tm = np.where(ok, tn, inf)
            cand_t.append(tm)
            cand_axis.append(ax)
            cand_sign.append(-np.sign(D[rows, ax]).astype(int))

        all_t = np.stack(cand_t, axis=1)
        region = np.argmin(all_t, axis=1)
        t = all_t[rows, region]
        axis = np.stack(cand_axis, axis=1)[rows, region]
        sign = np.stack(cand_sign, axis=1)[rows, region]
        hit = np.isfinite(t) & (t <= 1.0)

        point = P0 + np.where(np.isfinite(t), t, 0.0)[:, None] * D
        normal = np.zeros((n, 3))
        idx = np.where(hit)[0]
        if idx.size:
            centers = np.vstack([np.zeros(3), self.obstacle_centers])
            widths = np.concatenate([[self.outer_half_width], self.obstacle_half_widths])
            m, a = region[idx], axis[idx]
            s = np.where(sign[idx] == 0, 1, sign[idx])
            point[idx, a] = centers[m, a] + s * widths[m]
            normal[idx, a] = s
        return SegmentHit(hit, t, point, normal, region, axis)

    def segment_exit(self, p0, p1):
        """Single-segment version; returns (t, point, normal) or None."""
        res = self.segment_exit_batch(np.asarray(p0)[None], np.asarray(p1)[None])
        if not res.hit[0]:
            return None
        return float(res.t[0]), res.point[0], res.normal[0]

    def indicator_grid(self, points, omega: float) -> np.ndarray:
        """Count of active region indicators at each point: 1 if within
        omega of the outer boundary, plus 1 per containing obstacle."""
        if omega <= 0:
            raise ValueError("omega must be positive")
        pts = _as_points(points)
        count = np.asarray(self.boundary_distance(pts, 0) < omega, dtype=float)
        for c, r in zip(self.obstacle_centers, self.obstacle_half_widths):
            count = count + (np.max(np.abs(pts - c), axis=-1) <= r)
        return count

    def region_mask(self, points) -> np.ndarray:
        """Cell classification: 0 fluid, 1 obstacle, 2 exterior."""
        pts = _as_points(points)
        mask = np.zeros(pts.shape[:-1], dtype=np.int8)
        for c, r in zip(self.obstacle_centers, self.obstacle_half_widths):
            mask[np.max(np.abs(pts - c), axis=-1) <= r] = 1
        mask[np.max(np.abs(pts), axis=-1) > self.outer_half_width] = 2
        return mask
