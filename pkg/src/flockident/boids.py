"""N-agent flocking simulator in a cluttered cuboidal arena.

Agents obey five steering forces: velocity alignment and position
cohesion averaged over metric neighborhoods, a short-range inverse-square
separation push, relaxation toward a cruising speed of 4, and a
short-range boundary term active within unit distance of any region
boundary.  Time stepping is kick-drift-kick velocity Verlet; a drift
segment that would leave the arena is folded back by specular reflection
off the flat boundary faces, as many times as needed within one step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flockident.workspace import Workspace

__all__ = [
    "BoidState",
    "BoidTrajectory",
    "ALIGNMENT_RADIUS",
    "COHESION_RADIUS",
    "SEPARATION_RADIUS",
    "neighborhood",
    "total_force",
    "all_forces",
    "specular_reflect",
    "verlet_step",
    "sample_initial",
    "simulate",
]

ALIGNMENT_RADIUS = 1.0
COHESION_RADIUS = 2.0
SEPARATION_RADIUS = 0.5
CRUISE_SPEED_SQ = 16.0       # relaxation force vanishes at speed 4
BOUNDARY_RANGE = 1.0
BOUNDARY_STRENGTH = 4.0


@dataclass
class BoidState:
    """Positions and velocities of all agents at one time."""

    t: float
    x: np.ndarray  # (N, 3)
    v: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1, 3)
        self.v = np.asarray(self.v, dtype=float).reshape(-1, 3)
        if self.x.shape != self.v.shape:
            raise ValueError("positions and velocities must have equal shapes")

    @property
    def n_agents(self) -> int:
        return self.x.shape[0]


@dataclass
class BoidTrajectory:
    """States at uniformly spaced sample times."""

    times: np.ndarray       # (S,)
    positions: np.ndarray   # (S, N, 3)
    velocities: np.ndarray  # (S, N, 3)

    @property
    def n_samples(self) -> int:
        return len(self.times)

    @property
    def n_agents(self) -> int:
        return self.positions.shape[1]

    def state(self, s: int) -> BoidState:
        return BoidState(float(self.times[s]), self.positions[s], self.velocities[s])


def neighborhood(state: BoidState, i: int, eps: float) -> np.ndarray:
    """Indices within Euclidean distance eps of agent i, itself included."""
    if eps <= 0:
        raise ValueError("neighborhood radius must be positive")
    d = np.linalg.norm(state.x - state.x[i], axis=1)
    return np.where(d <= eps)[0]


class _PositionTerms:
    """Per-configuration quantities reused by all velocity evaluations of
    one step: the alignment neighbor mask and every velocity-independent
    force term."""

    __slots__ = ("align_mask", "align_count", "static_force")

    def __init__(self, align_mask, align_count, static_force):
        self.align_mask = align_mask
        self.align_count = align_count
        self.static_force = static_force


def _position_terms(x: np.ndarray, w: Workspace) -> _PositionTerms:
    n = x.shape[0]
    if n == 0:
        return _PositionTerms(np.zeros((0, 0)), np.zeros(0), np.zeros((0, 3)))
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    off_diag = ~np.eye(n, dtype=bool)
    if np.any((d2 == 0.0) & off_diag):
        raise ValueError("coincident agent positions: separation force is singular")
    d = np.sqrt(d2)

    align_mask = (d <= ALIGNMENT_RADIUS).astype(float)
    align_count = align_mask.sum(axis=1)

    coh_mask = (d <= COHESION_RADIUS).astype(float)
    coh_count = coh_mask.sum(axis=1)
    cohesion = (coh_mask @ x) / coh_count[:, None] - x

    sep_mask = (d <= SEPARATION_RADIUS) & off_diag
    sep_count = sep_mask.sum(axis=1) + 1.0  # the neighborhood includes self
    with np.errstate(divide="ignore"):
        wgt = np.where(sep_mask, 1.0 / d2, 0.0)
    separation = (x * wgt.sum(axis=1)[:, None] - wgt @ x) / sep_count[:, None]

    boundary = np.zeros_like(x)
    for m in range(w.n_regions):
        dist = w.boundary_distance(x, m)
        active = dist < BOUNDARY_RANGE
        if not np.any(active):
            continue
        rel = x - w.region_center(m)
        norm = np.linalg.norm(rel, axis=1)
        direction = np.where(norm[:, None] > 0, rel / np.maximum(norm, 1e-300)[:, None], 0.0)
        scale = np.where(active, -BOUNDARY_STRENGTH / np.maximum(dist, 1e-300), 0.0)
        boundary += scale[:, None] * direction

    return _PositionTerms(align_mask, align_count, cohesion + separation + boundary)


def _velocity_force(v: np.ndarray, terms: _PositionTerms) -> np.ndarray:
    if v.shape[0] == 0:
        return np.zeros_like(v)
    align = (terms.align_mask @ v) / terms.align_count[:, None] - v
    relax = (1.0 - np.einsum("ij,ij->i", v, v) / CRUISE_SPEED_SQ)[:, None] * v
    return align + relax


def all_forces(x: np.ndarray, v: np.ndarray, w: Workspace) -> np.ndarray:
    """Total steering acceleration on every agent, shape (N, 3)."""
    terms = _position_terms(x, w)
    return terms.static_force + _velocity_force(v, terms)


def total_force(state: BoidState, w: Workspace, i: int) -> np.ndarray:
    """Total steering acceleration on agent i."""
    return all_forces(state.x, state.v, w)[i]


def specular_reflect(v, n):
    """Reflect velocity v about a unit face normal n: v - 2 (v . n) n.

    Preserves the speed exactly; works on batches over the leading axes.
    """
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    return v - 2.0 * np.sum(v * n, axis=-1, keepdims=True) * n


def _nudge_inside(w: Workspace, p: np.ndarray) -> np.ndarray:
    """Push points sitting on (or marginally past) a boundary strictly
    into the arena, so containment holds after every step."""
    eps = 1e-12 * w.outer_half_width
    np.clip(p, -w.outer_half_width, w.outer_half_width, out=p)
    for c, r in zip(w.obstacle_centers, w.obstacle_half_widths):
        rel = p - c
        bad = np.max(np.abs(rel), axis=1) <= r
        if not np.any(bad):
            continue
        rows = np.where(bad)[0]
        ax = np.argmax(np.abs(rel[rows]), axis=1)
        side = np.where(rel[rows, ax] >= 0, 1.0, -1.0)
        p[rows, ax] = c[ax] + side * (r + eps)
    return p


def _drift_reflect(w: Workspace, x: np.ndarray, v: np.ndarray, dt: float, cap: int):
    """Advance positions ballistically for dt, reflecting velocities at
    every boundary crossing.  Errors out past `cap` reflections per step
    (the step size is then too large for the geometry)."""
    p = x.copy()
    u = v.copy()
    rem = np.full(p.shape[0], float(dt))
    active = np.arange(p.shape[0])
    bounces = 0
    while active.size:
        target = p[active] + rem[active, None] * u[active]
        res = w.segment_exit_batch(p[active], target)
        done = active[~res.hit]
        p[done] = target[~res.hit]
        rem[done] = 0.0
        hit_rows = active[res.hit]
        if hit_rows.size == 0:
            break
        bounces += 1
        if bounces > cap:
            raise RuntimeError(
                f"more than {cap} boundary reflections in one step; reduce dt"
            )
        p[hit_rows] = res.point[res.hit]
        u[hit_rows] = specular_reflect(u[hit_rows], res.normal[res.hit])
        rem[hit_rows] *= 1.0 - res.t[res.hit]
        active = hit_rows
    _nudge_inside(w, p)
    return p, u


def _advance(x, v, terms, w, dt, force, cap):
    """One kick-drift-kick step.  The closing half-kick handles the
    velocity dependence of the forces with a single fixed-point pass:
    forces are evaluated once more at the predicted end velocity."""
    if force is None:
        a0 = terms.static_force + _velocity_force(v, terms)
    else:
        a0 = force(x, v)
    v_half = v + 0.5 * dt * a0
    x_new, v_half = _drift_reflect(w, x, v_half, dt, cap)
    if force is None:
        terms_new = _position_terms(x_new, w)
        a1 = terms_new.static_force + _velocity_force(v_half, terms_new)
        v_pred = v_half + 0.5 * dt * a1
        a2 = terms_new.static_force + _velocity_force(v_pred, terms_new)
    else:
        terms_new = None
        a1 = force(x_new, v_half)
        v_pred = v_half + 0.5 * dt * a1
        a2 = force(x_new, v_pred)
    v_new = v_half + 0.5 * dt * a2
    return x_new, v_new, terms_new


def verlet_step(state: BoidState, w: Workspace, dt: float, force=None,
                max_reflections: int = 8) -> BoidState:
    """One velocity-Verlet step with boundary reflections.

    `force` overrides the flocking forces with a callable (x, v) -> a of
    matching shapes; used for integrator verification on test problems.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    terms = _position_terms(state.x, w) if force is None else None
    x, v, _ = _advance(state.x, state.v, terms, w, dt, force, max_reflections)
    return BoidState(state.t + dt, x, v)


def sample_initial(w: Workspace, count: int, mean=(0.0, 0.0, 0.0), stddev: float = 1.0,
                   seed: int = 0, velocity_mean=(0.0, 0.0, 0.0), velocity_stddev: float = 1.0,
                   max_draws: int = 10**6) -> BoidState:
    """Gaussian initial conditions; positions are redrawn until they land
    inside the arena.  Deterministic for a fixed seed."""
    if stddev <= 0 or velocity_stddev <= 0:
        raise ValueError("standard deviations must be positive")
    rng = np.random.default_rng(seed)
    mean = np.asarray(mean, dtype=float)
    positions = np.empty((count, 3))
    have = 0
    drawn = 0
    while have < count:
        chunk = max(count - have, 256)
        if drawn + chunk > max_draws:
            chunk = max_draws - drawn
            if chunk <= 0:
                raise RuntimeError(
                    f"rejection sampling failed after {max_draws} draws; "
                    "the Gaussian barely overlaps the arena"
                )
        draws = rng.normal(mean, stddev, size=(chunk, 3))
        drawn += chunk
        keep = draws[w.contains(draws)]
        take = min(len(keep), count - have)
        positions[have : have + take] = keep[:take]
        have += take
    velocities = rng.normal(np.asarray(velocity_mean, dtype=float), velocity_stddev,
                            size=(count, 3))
    return BoidState(0.0, positions, velocities)


def simulate(initial: BoidState, w: Workspace, dt: float, total_time: float,
             sample_every: int = 1, force=None, max_reflections: int = 8) -> BoidTrajectory:
    """Integrate the flock and record every `sample_every`-th state
    (the initial state included)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if total_time < 0:
        raise ValueError("total_time must be nonnegative")
    if sample_every < 1:
        raise ValueError("sample_every must be at least 1")
    n_steps = int(round(total_time / dt))
    x = initial.x.copy()
    v = initial.v.copy()
    t = initial.t
    times = [t]
    xs = [x.copy()]
    vs = [v.copy()]
    terms = _position_terms(x, w) if force is None else None
    for step in range(1, n_steps + 1):
        x, v, terms = _advance(x, v, terms, w, dt, force, max_reflections)
        t = initial.t + step * dt
        if step % sample_every == 0:
            times.append(t)
            xs.append(x.copy())
            vs.append(v.copy())
    return BoidTrajectory(np.asarray(times), np.stack(xs), np.stack(vs))
