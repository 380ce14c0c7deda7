"""Finite-volume solver for the non-locally forced compressible Euler system.

State is the cell-averaged density rho and momentum j on a uniform cubic
grid masked by the arena geometry.  The hyperbolic part (pressureless
transport with flux (j, j j^T / rho)) uses a second-order central flux on
minmod-limited reconstructions, blended per face toward a first-order
Rusanov / local Lax-Friedrichs flux by a positivity-preserving scalar so
density never goes negative.  Wall faces (fluid next to obstacle,
exterior, or the domain boundary) see a reflected ghost state with the
normal momentum negated, which makes the wall mass flux exactly zero.
The source collects the nonlocal alignment exchange, the gradient of the
cohesion/repulsion/obstacle potentials, and relaxation toward a cruising
speed.  Time marching is strong-stability-preserving RK2 under an
adaptive CFL-limited step.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from flockident.kernels import (
    KernelCache,
    KernelParams,
    bessel_apply,
    default_near_radius,
    field_fft,
    field_ifft,
    offset_convolve,
    pad_len,
)
from flockident.observation import GridSpec
from flockident.workspace import Workspace

__all__ = [
    "PdeParams",
    "FieldState",
    "FieldTrajectory",
    "SolveStats",
    "BlowupError",
    "minmod",
    "heun_step",
    "mollifier_tensor",
    "obstacle_potential",
    "source_term",
    "flux_divergence",
    "positivity_limit",
    "cfl_dt",
    "ssp_rk2_step",
    "solve_forward",
]

CFL_DEFAULT = 0.05
DT_MAX_DEFAULT = 0.01
EPS_POS = 1e-12
RHO_EPS = 1e-12


class BlowupError(RuntimeError):
    """Raised when the field state stops being finite."""


@dataclass(frozen=True)
class PdeParams:
    """The ten physical parameters, ordered as the identification vector
    (five signed strengths, then five positive scales)."""

    align_strength: float = 0.0
    cohesion_strength: float = 0.0
    repulsion_strength: float = 0.0
    propulsion_strength: float = 0.0
    obstacle_strength: float = 0.0
    align_decay: float = 1.0
    cohesion_decay: float = 1.0
    repulsion_decay: float = 1.0
    cruise_speed: float = 1.0
    obstacle_range: float = 1.0

    def __post_init__(self):
        for name in ("align_decay", "cohesion_decay", "repulsion_decay",
                     "cruise_speed", "obstacle_range"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def to_vector(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in dc_fields(self)])

    @classmethod
    def from_vector(cls, vec) -> "PdeParams":
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (10,):
            raise ValueError("parameter vector must have 10 entries")
        return cls(*vec)


# Indices of the positive scale parameters within the vector form.
SCALE_SLICE = slice(5, 10)


@dataclass
class FieldState:
    """Density, momentum, and the cell mask at one time."""

    t: float
    rho: np.ndarray       # (n, n, n)
    momentum: np.ndarray  # (3, n, n, n)
    mask: np.ndarray      # (n, n, n) int8: 0 fluid, 1 obstacle, 2 exterior

    @property
    def fluid(self) -> np.ndarray:
        return self.mask == 0


@dataclass
class SolveStats:
    steps: int = 0
    min_density: float = np.inf
    mass_drift: float = 0.0
    dt_min: float = np.inf
    dt_max: float = 0.0


@dataclass
class FieldTrajectory:
    times: np.ndarray      # (S,)
    rhos: np.ndarray       # (S, n, n, n)
    momenta: np.ndarray    # (S, 3, n, n, n)
    mask: np.ndarray
    stats: SolveStats = field(default_factory=SolveStats)

    def state(self, s: int) -> FieldState:
        return FieldState(float(self.times[s]), self.rhos[s], self.momenta[s], self.mask)


def minmod(a, b):
    """Sign-matched minimum modulus: 0 on sign disagreement, else the
    smaller-magnitude argument."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    out = np.where(a * b > 0, np.where(np.abs(a) <= np.abs(b), a, b), 0.0)
    if out.ndim == 0:
        return float(out)
    return out


def heun_step(u, dt, rhs):
    """One SSP-RK2 (Heun) step for u' = rhs(u)."""
    u1 = u + dt * rhs(u)
    return 0.5 * (u + u1 + dt * rhs(u1))


def mollifier_tensor(spec: GridSpec, width: float) -> np.ndarray:
    """Compactly supported bump exp(1/(|x/width|^2 - 1)) sampled at all
    cell offsets and normalized to unit mass in the grid's own Riemann
    quadrature, so convolving an indicator that covers the whole support
    yields exactly 1."""
    if width <= 0:
        raise ValueError("mollifier width must be positive")
    n = spec.cells_per_axis
    off = (np.arange(2 * n - 1) - (n - 1)) * spec.dx
    r2 = off[:, None, None] ** 2 + off[None, :, None] ** 2 + off[None, None, :] ** 2
    q2 = r2 / width**2
    with np.errstate(divide="ignore"):
        arg = np.where(q2 < 1.0, 1.0 / (q2 - 1.0), -np.inf)
    core = np.exp(arg)
    return core / (core.sum() * spec.cell_volume)


def obstacle_potential(w: Workspace, spec: GridSpec, strength: float, width: float) -> np.ndarray:
    """Soft wall/obstacle potential: the boundary-proximity indicator
    field mollified by a bump of the given width, scaled by `strength`."""
    n = spec.cells_per_axis
    if strength == 0.0:
        return np.zeros((n, n, n))
    indicators = w.indicator_grid(spec.center_points(), width)
    eta = mollifier_tensor(spec, width)
    return strength * offset_convolve(indicators, eta, spec)


def _masked_gradient(phi: np.ndarray, fluid: np.ndarray, h: float) -> np.ndarray:
    """Gradient on fluid cells: central differences, falling back to
    one-sided differences where the neighbor across a face is not fluid,
    and zero where no fluid neighbor exists along an axis."""
    grad = np.zeros((3,) + phi.shape)
    for a in range(3):
        p = np.moveaxis(phi, a, 0)
        fl = np.moveaxis(fluid, a, 0)
        g = np.moveaxis(grad[a], a, 0)
        has_l = np.zeros_like(fl)
        has_r = np.zeros_like(fl)
        has_l[1:] = fl[:-1]
        has_r[:-1] = fl[1:]
        dl = np.zeros_like(p)
        dr = np.zeros_like(p)
        dl[1:] = p[1:] - p[:-1]
        dr[:-1] = p[1:] - p[:-1]
        central = has_l & has_r
        only_r = has_r & ~has_l
        only_l = has_l & ~has_r
        g[central] = (dl[central] + dr[central]) / (2.0 * h)
        g[only_r] = dr[only_r] / h
        g[only_l] = dl[only_l] / h
        g[~fl] = 0.0
    return grad


def source_term(state: FieldState, params: PdeParams, potential: np.ndarray,
                spec: GridSpec, cache: KernelCache | None = None,
                rho_eps: float = RHO_EPS) -> np.ndarray:
    """Momentum source: alignment exchange with the nonlocal fields,
    minus rho times the gradient of the cohesion/repulsion/obstacle
    potential, plus cruising-speed relaxation."""
    fluid = state.fluid
    rho = np.where(fluid, state.rho, 0.0)
    j = state.momentum * fluid
    near = default_near_radius(spec)

    align = np.zeros_like(j)
    if params.align_strength != 0.0:
        ka = KernelParams(params.align_strength, params.align_decay)
        pi_j = bessel_apply(j, ka, spec, near, cache)
        pi_rho = bessel_apply(rho, ka, spec, near, cache)
        align = rho * pi_j - j * pi_rho

    phi = potential.copy()
    if params.cohesion_strength != 0.0:
        phi += bessel_apply(rho, KernelParams(params.cohesion_strength,
                                              params.cohesion_decay), spec, near, cache)
    if params.repulsion_strength != 0.0:
        phi += bessel_apply(rho, KernelParams(params.repulsion_strength,
                                              params.repulsion_decay), spec, near, cache)
    drift = -rho * _masked_gradient(phi, fluid, spec.dx)

    relax = np.zeros_like(j)
    if params.propulsion_strength != 0.0:
        alive = fluid & (rho >= rho_eps)
        speed = np.where(alive, np.sqrt(np.sum(j * j, axis=0)) / np.maximum(rho, rho_eps), 0.0)
        shape_fn = 1.0 + np.tanh(speed**2 / params.cruise_speed**2 - 1.0)
        relax = params.propulsion_strength * j * ((1.0 - shape_fn) * alive)

    return (align + drift + relax) * fluid


def _mirror_signs(axis: int) -> np.ndarray:
    s = np.ones(4)
    s[1 + axis] = -1.0
    return s


def _axis_face_fluxes(U: np.ndarray, fluid: np.ndarray, axis: int,
                      alpha_global: float, rho_eps: float):
    """High- and low-order numerical fluxes on the n+1 faces along one
    axis, in axis-front layout (4, n+1, m, m)."""
    Um = np.moveaxis(U, 1 + axis, 1)
    fl = np.moveaxis(fluid, axis, 0)
    n = Um.shape[1]
    tail = fl.shape[1:]
    comp = 1 + axis

    fluid_l = np.zeros((n + 1,) + tail, dtype=bool)
    fluid_r = np.zeros((n + 1,) + tail, dtype=bool)
    fluid_l[1:] = fl
    fluid_r[:-1] = fl
    ff = fluid_l & fluid_r
    fw = fluid_l & ~fluid_r
    wf = ~fluid_l & fluid_r

    Ul = np.zeros((4, n + 1) + tail)
    Ur = np.zeros((4, n + 1) + tail)
    Ul[:, 1:] = Um
    Ur[:, :n] = Um

    # Face jumps driving the slopes; wall faces use the mirror ghost.
    dif = (Ur - Ul) * ff
    dif[comp][fw] = -2.0 * Ul[comp][fw]
    dif[comp][wf] = 2.0 * Ur[comp][wf]

    sigma = minmod(dif[:, :n], dif[:, 1:]) * fl

    UL = np.zeros((4, n + 1) + tail)
    UR = np.zeros((4, n + 1) + tail)
    UL[:, 1:] = Um + 0.5 * sigma
    UR[:, :n] = Um - 0.5 * sigma
    msign = _mirror_signs(axis)
    UR[:, fw] = UL[:, fw] * msign[:, None]
    UL[:, wf] = UR[:, wf] * msign[:, None]

    def _flux(uface):
        rho = uface[0]
        vn = np.where(rho > rho_eps, uface[comp] / np.maximum(rho, rho_eps), 0.0)
        f = np.empty_like(uface)
        f[0] = uface[comp]
        f[1:] = vn * uface[1:]
        return f, vn

    f_l, v_l = _flux(UL)
    f_r, v_r = _flux(UR)
    alpha = np.maximum(np.abs(v_l), np.abs(v_r))
    high = 0.5 * (f_l + f_r) - 0.5 * alpha * (UR - UL)

    Ull = Ul.copy()
    Url = Ur.copy()
    Url[:, fw] = Ull[:, fw] * msign[:, None]
    Ull[:, wf] = Url[:, wf] * msign[:, None]
    fl_l, _ = _flux(Ull)
    fl_r, _ = _flux(Url)
    low = 0.5 * (fl_l + fl_r) - 0.5 * alpha_global * (Url - Ull)
    return high, low


def positivity_limit(low, high, rho: np.ndarray, fluid: np.ndarray,
                     dt: float, h: float, eps_pos: float = EPS_POS):
    """Blend each face flux between its low- and high-order values so the
    forward-Euler density update stays nonnegative.

    `low`/`high` are per-axis face-flux arrays in axis-front layout.  Each
    cell's allowance above the floor (after the safe low-order update) is
    split over its draining faces; a face's blending factor is the minimum
    allowance ratio of its two neighbors, so theta is 1 wherever the
    high-order flux is already safe.  Cells the low-order update already
    leaves below the floor contribute zero allowance, which reduces those
    faces to the low-order flux.

    Returns (blended per-axis fluxes, per-axis theta arrays).
    """
    lam = dt / h
    low_div = np.zeros_like(rho)
    for a in range(3):
        f = low[a][0]
        low_div += np.moveaxis(f[1:] - f[:-1], 0, a)
    rho_low = rho - lam * low_div

    drain = np.zeros_like(rho)
    deltas = []
    for a in range(3):
        d = high[a][0] - low[a][0]
        deltas.append(d)
        drain += np.moveaxis(np.maximum(d[1:], 0.0) + np.maximum(-d[:-1], 0.0), 0, a)
    drain *= lam

    budget = np.maximum(rho_low - eps_pos, 0.0)
    ratio = np.where(drain > budget, budget / np.maximum(drain, 1e-300), 1.0)
    ratio = np.where(fluid, ratio, 1.0)

    blended = []
    thetas = []
    for a in range(3):
        d = deltas[a]
        r = np.moveaxis(ratio, a, 0)
        n = r.shape[0]
        r_left = np.ones_like(d)
        r_right = np.ones_like(d)
        r_left[1:] = r
        r_right[:n] = r
        theta = np.ones_like(d)
        theta = np.where(d > 0, np.minimum(theta, r_left), theta)
        theta = np.where(d < 0, np.minimum(theta, r_right), theta)
        blended.append(low[a] + theta[None] * (high[a] - low[a]))
        thetas.append(theta)
    return blended, thetas


def _global_max_speed(U: np.ndarray, fluid: np.ndarray, rho_eps: float) -> float:
    rho = U[0]
    alive = fluid & (rho > rho_eps)
    if not np.any(alive):
        return 0.0
    v = np.abs(U[1:]) / np.maximum(rho, rho_eps)
    return float(np.max(v[:, alive], initial=0.0))


def _flux_divergence_u(U: np.ndarray, fluid: np.ndarray, h: float, dt: float,
                       eps_pos: float, rho_eps: float) -> np.ndarray:
    alpha_g = _global_max_speed(U, fluid, rho_eps)
    high = []
    low = []
    for a in range(3):
        fh, fl_ = _axis_face_fluxes(U, fluid, a, alpha_g, rho_eps)
        high.append(fh)
        low.append(fl_)
    blended, _ = positivity_limit(low, high, U[0], fluid, dt, h, eps_pos)
    div = np.zeros_like(U)
    for a in range(3):
        f = blended[a]
        div += np.moveaxis(f[:, 1:] - f[:, :-1], 1, 1 + a)
    return div / h


def flux_divergence(state: FieldState, spec: GridSpec, dt: float,
                    eps_pos: float = EPS_POS, rho_eps: float = RHO_EPS):
    """Per-cell divergence of the positivity-blended numerical fluxes.

    Returns (density divergence, momentum divergence).  `dt` is the step
    the positivity blend must protect.
    """
    U = _stack(state.rho, state.momentum, state.fluid)
    div = _flux_divergence_u(U, state.fluid, spec.dx, dt, eps_pos, rho_eps)
    return div[0], div[1:]


def cfl_dt(state: FieldState, spec: GridSpec, cfl: float = CFL_DEFAULT,
           dt_max: float = DT_MAX_DEFAULT, rho_eps: float = RHO_EPS) -> float:
    """Adaptive step: cfl * h / (largest transport speed), capped at dt_max."""
    if not 0 < cfl < 1:
        raise ValueError("cfl must lie in (0, 1)")
    U = _stack(state.rho, state.momentum, state.fluid)
    speed = _global_max_speed(U, state.fluid, rho_eps)
    if speed < 1e-14:
        return dt_max
    return min(dt_max, cfl * spec.dx / speed)


def _stack(rho, momentum, fluid):
    U = np.concatenate([np.asarray(rho, dtype=float)[None],
                        np.asarray(momentum, dtype=float)], axis=0)
    return U * fluid


class _Model:
    """Bound solver pieces: parameters, grid, mask, cached kernels."""

    def __init__(self, params: PdeParams, spec: GridSpec, mask: np.ndarray,
                 cfl: float, dt_max: float, eps_pos: float, rho_eps: float,
                 potential: np.ndarray | None = None, w: Workspace | None = None):
        self.params = params
        self.spec = spec
        self.mask = mask
        self.fluid = mask == 0
        self.cfl = cfl
        self.dt_max = dt_max
        self.eps_pos = eps_pos
        self.rho_eps = rho_eps
        self.cache = KernelCache()
        if potential is None:
            if w is None:
                raise ValueError("need either a potential field or a workspace")
            potential = obstacle_potential(w, spec, params.obstacle_strength,
                                           params.obstacle_range)
        self.potential = potential
        # Kernel transforms are fixed for the lifetime of one model, so the
        # source evaluation can share one forward FFT of the density across
        # all three scalar kernels and batch the inverse transforms.
        near = default_near_radius(spec)
        self._pad = pad_len(spec.cells_per_axis)
        self._khat = {}
        p = params
        for name, strength, decay in (
            ("align", p.align_strength, p.align_decay),
            ("cohesion", p.cohesion_strength, p.cohesion_decay),
            ("repulsion", p.repulsion_strength, p.repulsion_decay),
        ):
            if strength != 0.0:
                self._khat[name] = self.cache.transform(decay, spec, near)

    def _source(self, rho: np.ndarray, j: np.ndarray) -> np.ndarray:
        """Source evaluation batching every convolution of one stage into
        a single forward and a single inverse FFT; matches source_term up
        to floating-point association."""
        p = self.params
        spec = self.spec
        n = spec.cells_per_axis
        vol = spec.cell_volume
        fluid = self.fluid
        need_align = "align" in self._khat

        tags = [name for name in ("align", "cohesion", "repulsion") if name in self._khat]
        convs = {}
        pi_j = None
        if tags:
            fwd = np.concatenate([rho[None], j]) if need_align else rho[None]
            hat = field_fft(fwd, n, self._pad)
            prods = [self._khat[name] * hat[0] for name in tags]
            if need_align:
                prods.extend(self._khat["align"] * hat[1:])
            out = field_ifft(np.stack(prods), n, self._pad)
            strengths = {"align": p.align_strength, "cohesion": p.cohesion_strength,
                         "repulsion": p.repulsion_strength}
            for i, name in enumerate(tags):
                convs[name] = out[i] * (strengths[name] * vol)
            if need_align:
                pi_j = out[len(tags):] * (p.align_strength * vol)

        align = np.zeros_like(j)
        if need_align:
            align = rho * pi_j - j * convs["align"]

        phi = self.potential
        for name in ("cohesion", "repulsion"):
            if name in convs:
                phi = phi + convs[name]
        drift = -rho * _masked_gradient(phi, fluid, spec.dx)

        relax = np.zeros_like(j)
        if p.propulsion_strength != 0.0:
            alive = fluid & (rho >= self.rho_eps)
            speed = np.where(alive, np.sqrt(np.sum(j * j, axis=0)) / np.maximum(rho, self.rho_eps), 0.0)
            shape_fn = 1.0 + np.tanh(speed**2 / p.cruise_speed**2 - 1.0)
            relax = p.propulsion_strength * j * ((1.0 - shape_fn) * alive)
        return (align + drift + relax) * fluid

    def rhs(self, U: np.ndarray, dt: float) -> np.ndarray:
        U = U * self.fluid
        div = _flux_divergence_u(U, self.fluid, self.spec.dx, dt,
                                 self.eps_pos, self.rho_eps)
        src = self._source(U[0], U[1:])
        out = -div
        out[1:] += src
        return out * self.fluid

    def step(self, U: np.ndarray, dt: float) -> np.ndarray:
        out = heun_step(U, dt, lambda u: self.rhs(u, dt))
        out *= self.fluid
        np.maximum(out[0], 0.0, out=out[0])
        if not np.isfinite(out.sum()):
            raise BlowupError("non-finite field state; the solve blew up")
        return out

    def dt_for(self, U: np.ndarray) -> float:
        speed = _global_max_speed(U, self.fluid, self.rho_eps)
        if speed < 1e-14:
            return self.dt_max
        return min(self.dt_max, self.cfl * self.spec.dx / speed)


def ssp_rk2_step(state: FieldState, params: PdeParams, potential: np.ndarray,
                 spec: GridSpec, dt: float, w: Workspace | None = None,
                 cfl: float = CFL_DEFAULT, dt_max: float = DT_MAX_DEFAULT,
                 eps_pos: float = EPS_POS, rho_eps: float = RHO_EPS) -> FieldState:
    """One SSP-RK2 step of the full semi-discrete system.

    `potential` is the precomputed obstacle potential on the grid (the
    workspace argument is only consulted when a potential of None is
    passed and one has to be built)."""
    model = _Model(params, spec, state.mask, cfl, dt_max, eps_pos, rho_eps,
                   potential=potential, w=w)
    U = _stack(state.rho, state.momentum, state.fluid)
    U_new = model.step(U, dt)
    return FieldState(state.t + dt, U_new[0], U_new[1:], state.mask)


def solve_forward(rho0, j0, params: PdeParams, w: Workspace, spec: GridSpec,
                  t0: float, tf: float, output_times,
                  snap: str = "exact",
                  cfl: float = CFL_DEFAULT, dt_max: float = DT_MAX_DEFAULT,
                  eps_pos: float = EPS_POS, rho_eps: float = RHO_EPS,
                  mask: np.ndarray | None = None, max_steps: int = 1_000_000,
                  validate: bool = True, mass_drift_tol: float = 1e-10) -> FieldTrajectory:
    """March the system from (rho0, j0) over [t0, tf] and record snapshots.

    snap="exact" shortens substeps to land exactly on each output time;
    snap="interp" lets the solver run at its own adaptive step and
    interpolates the recorded fields linearly in time, which is the mode
    the identification misfit uses.

    The conservative scheme with zero wall flux must keep the total mass
    constant; a relative drift beyond `mass_drift_tol` means the state is
    numerically corrupt and raises BlowupError.
    """
    if tf < t0:
        raise ValueError("tf must not precede t0")
    if mask is None:
        mask = w.region_mask(spec.center_points())
    fluid = mask == 0
    U = _stack(rho0, j0, fluid)
    if validate:
        if np.any(U[0] < 0):
            raise ValueError("initial density must be nonnegative")
        mass = float(U[0].sum()) * spec.cell_volume
        if abs(mass - 1.0) > 1e-6:
            raise ValueError(f"initial density mass {mass} is not 1 within 1e-6")
    out_times = np.sort(np.asarray(output_times, dtype=float))
    tiny = 1e-12 * max(1.0, abs(tf) + abs(t0))
    if out_times.size and (out_times[0] < t0 - tiny or out_times[-1] > tf + tiny):
        raise ValueError("output times must lie inside [t0, tf]")

    model = _Model(params, spec, mask, cfl, dt_max, eps_pos, rho_eps, w=w)
    stats = SolveStats()
    mass0 = float(U[0].sum()) * spec.cell_volume
    stats.min_density = float(U[0][fluid].min()) if np.any(fluid) else 0.0

    rec_t: list[float] = []
    rec_u: list[np.ndarray] = []
    k = 0
    while k < out_times.size and out_times[k] <= t0 + tiny:
        rec_t.append(float(out_times[k]))
        rec_u.append(U.copy())
        k += 1

    t = t0
    while t < tf - tiny:
        dt = model.dt_for(U)
        target = None
        if snap == "exact" and k < out_times.size and t + dt >= out_times[k] - tiny:
            target = float(out_times[k])
        elif t + dt > tf:
            target = tf
        if target is not None:
            dt = target - t
        if dt <= 0:
            raise RuntimeError("adaptive step collapsed to zero")
        U_new = model.step(U, dt)
        t_new = target if target is not None else t + dt
        stats.steps += 1
        if stats.steps > max_steps:
            raise RuntimeError(f"exceeded {max_steps} steps; runaway step shrinkage")
        stats.dt_min = min(stats.dt_min, dt)
        stats.dt_max = max(stats.dt_max, dt)
        stats.min_density = min(stats.min_density, float(U_new[0][fluid].min()))
        mass = float(U_new[0].sum()) * spec.cell_volume
        if mass0 != 0:
            stats.mass_drift = max(stats.mass_drift, abs(mass - mass0) / abs(mass0))
            if stats.mass_drift > mass_drift_tol:
                raise BlowupError(
                    f"relative mass drift {stats.mass_drift:.3e} exceeds "
                    f"{mass_drift_tol:.1e} at t={t_new:.6g}"
                )
        if snap == "interp":
            while k < out_times.size and out_times[k] <= t_new + tiny:
                ts = float(out_times[k])
                lam = 0.0 if t_new == t else np.clip((ts - t) / (t_new - t), 0.0, 1.0)
                rec_t.append(ts)
                rec_u.append((1.0 - lam) * U + lam * U_new)
                k += 1
        else:
            while k < out_times.size and out_times[k] <= t_new + tiny:
                rec_t.append(float(out_times[k]))
                rec_u.append(U_new.copy())
                k += 1
        t, U = t_new, U_new

    if k < out_times.size:
        # tf == t0 run or trailing outputs at tf
        while k < out_times.size:
            rec_t.append(float(out_times[k]))
            rec_u.append(U.copy())
            k += 1

    times = np.asarray(rec_t)
    if rec_u:
        stacked = np.stack(rec_u)
        rhos = stacked[:, 0]
        momenta = stacked[:, 1:]
    else:
        n = spec.cells_per_axis
        rhos = np.zeros((0, n, n, n))
        momenta = np.zeros((0, 3, n, n, n))
    return FieldTrajectory(times, rhos, momenta, mask, stats)
