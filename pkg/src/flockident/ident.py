"""Parameter identification by PDE-constrained optimization.

The misfit is the time-averaged squared Hellinger distance between the
solver density (interpolated linearly in time onto the observation
times) and the observed position densities.  It is minimized over the
ten physical parameters with a truncated Newton method: gradients by
central finite differences, Hessian-vector products by forward
differences of gradients, an inner conjugate-gradient solve with a
relative forcing tolerance, and a backtracking Armijo line search that
clamps the positive scale parameters away from zero.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from flockident.hydro import (
    BlowupError,
    CFL_DEFAULT,
    DT_MAX_DEFAULT,
    PdeParams,
    SCALE_SLICE,
    solve_forward,
)
from flockident.observation import GridSpec, hellinger_sq
from flockident.workspace import Workspace

__all__ = [
    "IdentProblem",
    "IdentResult",
    "NewtonConfig",
    "misfit",
    "misfit_full",
    "hellinger_trace",
    "fd_gradient",
    "newton_cg",
    "default_start",
    "make_twin_problem",
]

SENTINEL_LOSS = 10.0


@dataclass
class IdentProblem:
    """Everything a misfit evaluation needs."""

    rho0: np.ndarray           # (n, n, n), unit mass on fluid cells
    j0: np.ndarray             # (3, n, n, n)
    workspace: Workspace
    spec: GridSpec
    obs_times: np.ndarray      # (S,), strictly increasing, in [t0, tf]
    observations: np.ndarray   # (S, n, n, n) position densities
    t0: float
    tf: float
    cfl: float = CFL_DEFAULT
    dt_max: float = DT_MAX_DEFAULT
    sentinel: float = SENTINEL_LOSS
    mask: np.ndarray = None

    def __post_init__(self):
        self.obs_times = np.asarray(self.obs_times, dtype=float)
        self.observations = np.asarray(self.observations, dtype=float)
        if self.obs_times.ndim != 1 or len(self.obs_times) != len(self.observations):
            raise ValueError("need one observation per observation time")
        if np.any(np.diff(self.obs_times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if self.obs_times[0] < self.t0 - 1e-12 or self.obs_times[-1] > self.tf + 1e-12:
            raise ValueError("observation times must lie inside [t0, tf]")
        if self.mask is None:
            self.mask = self.workspace.region_mask(self.spec.center_points())


@dataclass
class IdentResult:
    params: PdeParams
    loss_trace: np.ndarray     # (K+1,) including the initial loss
    grad_norms: np.ndarray     # (K,) gradient norm per iteration
    termination: str
    n_iterations: int
    cg_iterations: list[int] = field(default_factory=list)


@dataclass(frozen=True)
class NewtonConfig:
    max_newton: int = 15
    max_cg: int = 10
    cg_tol: float = 0.1        # inner forcing: ||r|| <= cg_tol * ||g||
    h_rel: float = 1e-4
    hessvec_rel: float = 1e-3
    armijo_c: float = 1e-4
    backtrack_factor: float = 0.5
    max_backtracks: int = 25
    gtol: float = 1e-8
    scale_floor: float = 1e-8  # clamp for the positive scale parameters
    workers: int = 1


def _theta_params(theta) -> PdeParams:
    if isinstance(theta, PdeParams):
        return theta
    return PdeParams.from_vector(theta)


def misfit_full(theta, prob: IdentProblem):
    """(loss, blew_up) pair; a blow-up returns the sentinel loss so line
    searches back away instead of aborting."""
    params = _theta_params(theta)
    try:
        traj = solve_forward(
            prob.rho0, prob.j0, params, prob.workspace, prob.spec,
            prob.t0, prob.tf, prob.obs_times, snap="interp",
            cfl=prob.cfl, dt_max=prob.dt_max, mask=prob.mask,
        )
    except (BlowupError, RuntimeError):
        return prob.sentinel, True
    h2 = np.array([
        hellinger_sq(traj.rhos[s], prob.observations[s], prob.spec.cell_volume)
        for s in range(len(prob.obs_times))
    ])
    return _time_average(h2, prob.obs_times), False


def _time_average(values: np.ndarray, times: np.ndarray) -> float:
    """Left-endpoint Riemann average of a sampled time series."""
    if len(values) == 1:
        return float(values[0])
    weights = np.diff(times)
    return float(np.sum(values[:-1] * weights) / (times[-1] - times[0]))


def misfit(theta, prob: IdentProblem) -> float:
    """Time-averaged squared Hellinger distance at the given parameters."""
    return misfit_full(theta, prob)[0]


def hellinger_trace(theta, prob: IdentProblem) -> np.ndarray:
    """Squared Hellinger distance at every observation time."""
    params = _theta_params(theta)
    traj = solve_forward(
        prob.rho0, prob.j0, params, prob.workspace, prob.spec,
        prob.t0, prob.tf, prob.obs_times, snap="interp",
        cfl=prob.cfl, dt_max=prob.dt_max, mask=prob.mask,
    )
    return np.array([
        hellinger_sq(traj.rhos[s], prob.observations[s], prob.spec.cell_volume)
        for s in range(len(prob.obs_times))
    ])


def _eval_misfit_task(args):
    theta_vec, prob = args
    return misfit_full(theta_vec, prob)


def _eval_batch(thetas: list[np.ndarray], prob: IdentProblem, workers: int):
    """Evaluate several parameter vectors; results keep the input order,
    so parallel evaluation is bitwise equivalent to serial."""
    if workers > 1 and len(thetas) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_eval_misfit_task, [(t, prob) for t in thetas]))
    return [misfit_full(t, prob) for t in thetas]


def fd_gradient(theta, prob: IdentProblem, h_rel: float = 1e-4,
                workers: int = 1) -> np.ndarray:
    """Central-difference gradient of the misfit.

    Steps are relative per coordinate, and shrink for the positive scale
    parameters so both probe points stay valid.  If a probe blows up the
    step is halved and retried once; a still-failing coordinate falls
    back to a one-sided difference (zero if both sides failed).
    """
    theta = np.asarray(_theta_params(theta).to_vector(), dtype=float)
    if h_rel <= 0:
        raise ValueError("h_rel must be positive")
    scale_idx = set(range(*SCALE_SLICE.indices(len(theta))))

    def steps_for(h_scale):
        h = h_scale * np.maximum(np.abs(theta), 1.0)
        for i in scale_idx:
            if theta[i] - h[i] <= 0:
                h[i] = 0.5 * theta[i]
        return h

    h = steps_for(h_rel)
    probes = []
    for i in range(len(theta)):
        for s in (+1.0, -1.0):
            p = theta.copy()
            p[i] += s * h[i]
            probes.append(p)
    results = _eval_batch(probes, prob, workers)

    grad = np.zeros(len(theta))
    for i in range(len(theta)):
        f_plus, bad_p = results[2 * i]
        f_minus, bad_m = results[2 * i + 1]
        if bad_p or bad_m:
            # Halve the step and retry this coordinate once.
            hi = 0.5 * h[i]
            if i in scale_idx and theta[i] - hi <= 0:
                hi = 0.25 * theta[i]
            p_plus = theta.copy()
            p_plus[i] += hi
            p_minus = theta.copy()
            p_minus[i] -= hi
            f_plus, bad_p = misfit_full(p_plus, prob)
            f_minus, bad_m = misfit_full(p_minus, prob)
            if bad_p and bad_m:
                grad[i] = 0.0
                continue
            if bad_p or bad_m:
                f_center, bad_c = misfit_full(theta, prob)
                if bad_c:
                    grad[i] = 0.0
                elif bad_p:
                    grad[i] = (f_center - f_minus) / hi
                else:
                    grad[i] = (f_plus - f_center) / hi
                continue
            grad[i] = (f_plus - f_minus) / (2.0 * hi)
        else:
            grad[i] = (f_plus - f_minus) / (2.0 * h[i])
    return grad


def _clamp_scales(theta: np.ndarray, floor: float) -> np.ndarray:
    out = theta.copy()
    out[SCALE_SLICE] = np.maximum(out[SCALE_SLICE], floor)
    return out


def newton_cg(theta0, prob: IdentProblem, config: NewtonConfig = NewtonConfig()) -> IdentResult:
    """Truncated Newton minimization of the misfit.

    The inner CG solve uses Hessian-vector products from forward
    differences of gradients and stops on the forcing tolerance, the
    iteration cap, or negative curvature (falling back to steepest
    descent if curvature fails on the first inner iteration).
    """
    theta = _clamp_scales(np.asarray(_theta_params(theta0).to_vector(), dtype=float),
                          config.scale_floor)
    f_cur, blew = misfit_full(theta, prob)
    if blew:
        raise RuntimeError("misfit blew up at the starting parameters")
    loss_trace = [f_cur]
    grad_norms = []
    cg_iters = []
    termination = "max_iterations"

    for _ in range(config.max_newton):
        g = fd_gradient(theta, prob, config.h_rel, config.workers)
        gnorm = float(np.linalg.norm(g))
        grad_norms.append(gnorm)
        if gnorm <= config.gtol:
            termination = "gradient_tolerance"
            break

        # Inner CG on the Newton system H p = -g.
        p = np.zeros_like(theta)
        r = -g
        d = r.copy()
        rr = float(r @ r)
        n_cg = 0
        for _cg in range(config.max_cg):
            delta = config.hessvec_rel * (1.0 + np.linalg.norm(theta)) / np.linalg.norm(d)
            # Keep the probe point valid for the scale parameters.
            for i in range(*SCALE_SLICE.indices(len(theta))):
                if d[i] < 0:
                    delta = min(delta, -0.5 * theta[i] / d[i])
            g_shift = fd_gradient(theta + delta * d, prob, config.h_rel, config.workers)
            Hd = (g_shift - g) / delta
            n_cg += 1
            curv = float(d @ Hd)
            if curv <= 0:
                if np.all(p == 0):
                    p = -g
                break
            alpha = rr / curv
            p += alpha * d
            r -= alpha * Hd
            rr_new = float(r @ r)
            if np.sqrt(rr_new) <= config.cg_tol * gnorm:
                break
            d = r + (rr_new / rr) * d
            rr = rr_new
        cg_iters.append(n_cg)

        slope = float(g @ p)
        if slope >= 0:
            p = -g
            slope = -float(g @ g)

        accepted = False
        alpha = 1.0
        for _bt in range(config.max_backtracks):
            cand = _clamp_scales(theta + alpha * p, config.scale_floor)
            f_new, blew = misfit_full(cand, prob)
            if not blew and f_new <= f_cur + config.armijo_c * alpha * slope:
                theta = cand
                f_cur = f_new
                accepted = True
                break
            alpha *= config.backtrack_factor
        if not accepted:
            termination = "line_search_failure"
            break
        loss_trace.append(f_cur)

    return IdentResult(
        params=PdeParams.from_vector(theta),
        loss_trace=np.asarray(loss_trace),
        grad_norms=np.asarray(grad_norms),
        termination=termination,
        n_iterations=len(loss_trace) - 1,
        cg_iterations=cg_iters,
    )


def default_start() -> np.ndarray:
    """Documented default starting point: unit strengths with a negative
    repulsion sign, unit scales."""
    return np.array([1.0, 1.0, -1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0])


def make_twin_problem(rho0, j0, theta_true, w: Workspace, spec: GridSpec,
                      obs_times, cfl: float = CFL_DEFAULT,
                      dt_max: float = DT_MAX_DEFAULT) -> IdentProblem:
    """Synthesize observations from the solver itself at known parameters.

    The observations go through the same interpolated-snapshot path the
    misfit uses, so the misfit at the true parameters is exactly zero.
    """
    obs_times = np.asarray(obs_times, dtype=float)
    mask = w.region_mask(spec.center_points())
    traj = solve_forward(rho0, j0, _theta_params(theta_true), w, spec,
                         float(obs_times[0]), float(obs_times[-1]), obs_times,
                         snap="interp", cfl=cfl, dt_max=dt_max, mask=mask)
    return IdentProblem(
        rho0=np.asarray(rho0, dtype=float), j0=np.asarray(j0, dtype=float),
        workspace=w, spec=spec, obs_times=obs_times, observations=traj.rhos,
        t0=float(obs_times[0]), tf=float(obs_times[-1]),
        cfl=cfl, dt_max=dt_max, mask=mask,
    )
