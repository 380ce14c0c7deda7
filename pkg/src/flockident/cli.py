"""Command-line pipeline: generate, fit-init, identify, evaluate.

Every command takes a configuration file and derives its input/output
paths from the configured output directory, so a full run is

    flockident generate --config run.cfg
    flockident fit-init --config run.cfg
    flockident identify --config run.cfg
    flockident evaluate --config run.cfg

Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 I/O error.  All outputs are deterministic for a fixed (config, seed);
wall-clock timings go to stdout only.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from flockident import boids, ident, initfit, observation, storage
from flockident.config import ConfigError, RunConfig, canonical_dump, config_hash, load_config
from flockident.hydro import BlowupError, PdeParams, solve_forward
from flockident.ident import IdentProblem, NewtonConfig
from flockident.observation import GridSpec
from flockident.workspace import Workspace

TRAJECTORY_CSV_MAX_AGENTS = 100


def build_workspace(cfg: RunConfig) -> Workspace:
    ws = cfg.workspace
    centers = np.asarray(ws.obstacle_centers, dtype=float).reshape(-1, 3)
    return Workspace(ws.outer_half_width, centers, np.asarray(ws.obstacle_half_widths))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_generate(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    w = build_workspace(cfg)
    bc = cfg.boids
    t_start = time.perf_counter()
    initial = boids.sample_initial(
        w, bc.count, mean=bc.position_mean, stddev=bc.position_std, seed=bc.seed,
        velocity_mean=bc.velocity_mean, velocity_stddev=bc.velocity_std)
    traj = boids.simulate(initial, w, bc.dt, bc.total_time, bc.sample_every)
    sim_time = time.perf_counter() - t_start

    v_max = max(observation.max_speed(traj.velocities), 1e-9)
    spec = GridSpec(cfg.grid.cells_per_axis, w.outer_half_width, v_max)

    hists = [observation.build_histogram(traj.state(s), spec) for s in range(traj.n_samples)]
    densities = np.stack([observation.position_density(h) for h in hists])
    j0_hat = observation.momentum_density(hists[0])

    dt_sample = bc.dt * bc.sample_every
    storage.write_trajectory(out / "trajectory.bin", traj, dt_sample)
    if traj.n_agents <= TRAJECTORY_CSV_MAX_AGENTS:
        storage.write_trajectory_csv(out / "trajectory.csv", traj)
    storage.write_histogram_series(out / "histograms.bin", traj.times, hists, spec)
    storage.write_density_series(out / "densities.bin", traj.times, densities, spec)
    storage.write_momentum_field(out / "momentum0.bin", j0_hat, spec)
    storage.write_manifest(out / "manifest.json", {
        "command": "generate",
        "config_sha256": config_hash(cfg),
        "seed": bc.seed,
        "n_agents": traj.n_agents,
        "n_samples": traj.n_samples,
        "v_max": v_max,
        "sample_dt": dt_sample,
    })
    print(f"generate: {traj.n_agents} agents, {traj.n_samples} samples, "
          f"v_max={v_max:.6g} ({sim_time:.1f}s)")


def cmd_fit_init(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    w = build_workspace(cfg)
    times, densities, spec = storage.read_density_series(out / "densities.bin")
    j0_hat = storage.read_momentum_field(out / "momentum0.bin")
    mask = w.region_mask(spec.center_points())

    fc = cfg.initfit
    t_start = time.perf_counter()
    wts, trace = initfit.adam_train(densities[0], j0_hat, spec, mask,
                                    hidden_widths=fc.hidden_widths, steps=fc.steps,
                                    base_rate=fc.base_rate, seed=fc.seed)
    fit_time = time.perf_counter() - t_start

    storage.write_checkpoint(out / "checkpoint.bin", wts)
    storage.write_csv(out / "fit_curve.csv", ["iteration", "loss"],
                      [[i, v] for i, v in enumerate(trace)])
    storage.write_manifest(out / "manifest_fit.json", {
        "command": "fit-init",
        "config_sha256": config_hash(cfg),
        "seed": fc.seed,
        "final_loss": float(trace[-1]),
        "best_loss": float(trace.min()),
        "n_weights": len(wts.values),
    })
    print(f"fit-init: {fc.steps} iterations, loss {trace[0]:.6g} -> {trace.min():.6g} "
          f"({fit_time:.1f}s)")


def _twin_problem(cfg: RunConfig, w: Workspace) -> tuple[IdentProblem, np.ndarray]:
    """Observations synthesized by the solver at known parameters; the
    start point scales the true parameters."""
    tw = cfg.twin
    spec = GridSpec(cfg.grid.cells_per_axis, w.outer_half_width, 1.0)
    mask = w.region_mask(spec.center_points())
    fluid = mask == 0
    pts = spec.center_points()
    blob = np.exp(-np.sum((pts - np.asarray(tw.blob_center)) ** 2, axis=-1)
                  / (2.0 * tw.blob_std**2))
    rho0 = np.where(fluid, blob, 0.0)
    rho0 /= rho0.sum() * spec.cell_volume
    j0 = rho0[None] * np.asarray(tw.flow, dtype=float)[:, None, None, None]
    n_obs = int(round((tw.tf - tw.t0) / tw.obs_dt))
    obs_times = tw.t0 + np.arange(n_obs + 1) * tw.obs_dt
    obs_times[-1] = tw.tf
    prob = ident.make_twin_problem(rho0, j0, np.asarray(tw.true_params), w, spec,
                                   obs_times, cfl=cfg.ident.cfl, dt_max=cfg.ident.dt_max)
    prob.sentinel = cfg.ident.sentinel_loss
    start = np.asarray(tw.true_params) * tw.start_scale
    return prob, start


def _dataset_problem(cfg: RunConfig, w: Workspace) -> tuple[IdentProblem, np.ndarray]:
    out = _out_dir(cfg)
    times, densities, spec = storage.read_density_series(out / "densities.bin")
    wts = storage.read_checkpoint(out / "checkpoint.bin")
    mask = w.region_mask(spec.center_points())
    rho0, j0 = initfit.initial_fields(wts, spec, mask)
    prob = IdentProblem(
        rho0=rho0, j0=j0, workspace=w, spec=spec,
        obs_times=times, observations=densities,
        t0=float(times[0]), tf=float(times[-1]),
        cfl=cfg.ident.cfl, dt_max=cfg.ident.dt_max,
        sentinel=cfg.ident.sentinel_loss, mask=mask,
    )
    return prob, np.asarray(cfg.ident.start_params, dtype=float)


def cmd_identify(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    w = build_workspace(cfg)
    if cfg.twin.enabled:
        prob, start = _twin_problem(cfg, w)
    else:
        prob, start = _dataset_problem(cfg, w)

    ic = cfg.ident
    newton_cfg = NewtonConfig(
        max_newton=ic.max_newton, max_cg=ic.max_cg, cg_tol=ic.cg_tol,
        h_rel=ic.h_rel, hessvec_rel=ic.hessvec_rel, armijo_c=ic.armijo_c,
        backtrack_factor=ic.backtrack_factor, max_backtracks=ic.max_backtracks,
        gtol=ic.gtol, scale_floor=ic.scale_floor, workers=ic.workers,
    )
    t_start = time.perf_counter()
    result = ident.newton_cg(start, prob, newton_cfg)
    ident_time = time.perf_counter() - t_start

    h2 = ident.hellinger_trace(result.params, prob)

    storage.write_csv(out / "loss_trace.csv", ["iteration", "loss"],
                      [[k, v] for k, v in enumerate(result.loss_trace)])
    storage.write_csv(out / "hellinger_trace.csv", ["time", "hellinger_sq"],
                      [[t, v] for t, v in zip(prob.obs_times, h2)])

    # Field snapshots near the most- and least-matched late times.
    s_peak = int(np.argmax(h2))
    s_late = max(s_peak, len(h2) - max(1, len(h2) // 6))
    snap_times = sorted({float(prob.obs_times[s_peak]), float(prob.obs_times[s_late])})
    traj = solve_forward(prob.rho0, prob.j0, result.params, w, prob.spec,
                         prob.t0, prob.tf, snap_times, snap="exact",
                         cfl=prob.cfl, dt_max=prob.dt_max, mask=prob.mask)
    storage.write_field_series(out / "fields.bin", traj.times, traj.rhos,
                               traj.momenta, prob.spec)
    mid_z = prob.spec.cells_per_axis // 2
    for s, t in enumerate(traj.times):
        storage.write_field_slice_csv(out / f"density_slice_{s}.csv",
                                      traj.rhos[s], prob.spec, mid_z)

    storage.write_manifest(out / "report.json", {
        "command": "identify",
        "config_sha256": config_hash(cfg),
        "twin_mode": bool(cfg.twin.enabled),
        "params": {f: getattr(result.params, f) for f in
                   ("align_strength", "cohesion_strength", "repulsion_strength",
                    "propulsion_strength", "obstacle_strength", "align_decay",
                    "cohesion_decay", "repulsion_decay", "cruise_speed",
                    "obstacle_range")},
        "theta": [float(v) for v in result.params.to_vector()],
        "loss_trace": [float(v) for v in result.loss_trace],
        "grad_norms": [float(v) for v in result.grad_norms],
        "cg_iterations": result.cg_iterations,
        "termination": result.termination,
        "n_iterations": result.n_iterations,
    })
    print(f"identify: {result.n_iterations} iterations, loss "
          f"{result.loss_trace[0]:.6g} -> {result.loss_trace[-1]:.6g}, "
          f"terminated by {result.termination} ({ident_time:.1f}s)")


def _read_theta_file(path: Path) -> np.ndarray:
    text = Path(path).read_text(encoding="utf-8")
    try:
        payload = json.loads(text)
        if isinstance(payload, dict) and "theta" in payload:
            return np.asarray(payload["theta"], dtype=float)
        return np.asarray(payload, dtype=float)
    except json.JSONDecodeError:
        return np.asarray([float(v) for v in text.split()], dtype=float)


def cmd_evaluate(cfg: RunConfig) -> None:
    out = _out_dir(cfg)
    w = build_workspace(cfg)
    times, densities, spec = storage.read_density_series(out / "densities.bin")
    wts = storage.read_checkpoint(out / "checkpoint.bin")
    mask = w.region_mask(spec.center_points())
    rho0, j0 = initfit.initial_fields(wts, spec, mask)
    params_path = Path(cfg.evaluate.params_file) if cfg.evaluate.params_file else out / "report.json"
    theta = _read_theta_file(params_path)
    params = PdeParams.from_vector(theta)

    t_start = time.perf_counter()
    traj = solve_forward(rho0, j0, params, w, spec, float(times[0]), float(times[-1]),
                         times, snap="interp", cfl=cfg.ident.cfl, dt_max=cfg.ident.dt_max,
                         mask=mask)
    solve_time = time.perf_counter() - t_start
    h2 = [observation.hellinger_sq(traj.rhos[s], densities[s], spec.cell_volume)
          for s in range(len(times))]
    avg = ident._time_average(np.asarray(h2), times)

    storage.write_csv(out / "metrics.csv", ["time", "hellinger_sq"],
                      [[t, v] for t, v in zip(times, h2)])
    storage.write_manifest(out / "evaluate_summary.json", {
        "command": "evaluate",
        "config_sha256": config_hash(cfg),
        "time_averaged_loss": float(avg),
        "mass_drift": traj.stats.mass_drift,
        "min_density": traj.stats.min_density,
        "steps": traj.stats.steps,
        "dt_min": traj.stats.dt_min,
        "dt_max": traj.stats.dt_max,
    })
    print(f"evaluate: loss {avg:.12g}, mass drift {traj.stats.mass_drift:.3g}, "
          f"min rho {traj.stats.min_density:.3g} ({solve_time:.1f}s)")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="flockident",
        description="Flocking data generation and PDE parameter identification.")
    parser.add_argument("command", choices=["generate", "fit-init", "identify", "evaluate"])
    parser.add_argument("--config", required=True, help="configuration file path")
    parser.add_argument("--seed", type=int, default=None, help="override the stage seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--threads", type=int, default=None,
                        help="override ident.workers for parallel loss evaluations")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
        if args.out is not None:
            cfg.output.directory = args.out
        if args.threads is not None:
            cfg.ident.workers = max(1, args.threads)
        if args.seed is not None:
            if args.command == "generate":
                cfg.boids.seed = args.seed
            elif args.command == "fit-init":
                cfg.initfit.seed = args.seed
        {"generate": cmd_generate,
         "fit-init": cmd_fit_init,
         "identify": cmd_identify,
         "evaluate": cmd_evaluate}[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (BlowupError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 4
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
