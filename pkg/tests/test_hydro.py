import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flockident import hydro
from flockident.hydro import (
    BlowupError,
    FieldState,
    PdeParams,
    cfl_dt,
    flux_divergence,
    heun_step,
    minmod,
    mollifier_tensor,
    obstacle_potential,
    positivity_limit,
    solve_forward,
    source_term,
    ssp_rk2_step,
)
from flockident.observation import GridSpec
from flockident.workspace import Workspace

ARENA = Workspace(5.0, [[2.5, 2.5, -4.0], [2.5, -2.5, -4.0], [-2.5, 2.5, -4.0], [-2.5, -2.5, -4.0]],
                  [1.0, 1.0, 1.0, 1.0])
OPEN = Workspace(5.0)
SPEC = GridSpec(11, 5.0, 1.0)


def make_blob(w, spec, center=(0.0, 0.0, 2.0), std=1.0, flow=(0.0, 0.0, 0.0)):
    mask = w.region_mask(spec.center_points())
    fluid = mask == 0
    pts = spec.center_points()
    blob = np.exp(-np.sum((pts - np.asarray(center)) ** 2, axis=-1) / (2.0 * std**2))
    rho = np.where(fluid, blob, 0.0)
    rho /= rho.sum() * spec.cell_volume
    j = rho[None] * np.asarray(flow, dtype=float)[:, None, None, None]
    return rho, j, mask


class TestPdeParams:
    def test_vector_round_trip(self):
        vec = np.array([1.0, -0.5, 0.25, 2.0, 0.1, 1.1, 1.2, 1.3, 1.4, 1.5])
        assert np.array_equal(PdeParams.from_vector(vec).to_vector(), vec)

    def test_scale_positivity_enforced(self):
        with pytest.raises(ValueError):
            PdeParams(align_decay=0.0)
        with pytest.raises(ValueError):
            PdeParams(cruise_speed=-1.0)

    def test_wrong_length_rejected(self):
        with pytest.raises(ValueError):
            PdeParams.from_vector(np.ones(9))


class TestMinmod:
    def test_same_sign_takes_smaller(self):
        assert minmod(1.0, 2.0) == 1.0

    def test_sign_disagreement_is_zero(self):
        assert minmod(-1.0, 2.0) == 0.0

    def test_negative_pair(self):
        assert minmod(-2.0, -3.0) == -2.0

    @given(st.floats(-10, 10), st.floats(-10, 10))
    @settings(max_examples=200, deadline=None)
    def test_properties(self, a, b):
        m = minmod(a, b)
        assert abs(m) <= min(abs(a), abs(b)) + 1e-15
        if a * b > 0:
            assert np.sign(m) == np.sign(a)
        else:
            assert m == 0.0


class TestObstaclePotential:
    def test_zero_strength(self):
        assert np.all(obstacle_potential(ARENA, SPEC, 0.0, 0.9) == 0.0)

    def test_compact_support(self):
        U = obstacle_potential(ARENA, SPEC, 2.0, 0.9)
        # the arena midpoint is over a cell width away from every indicator
        assert abs(U[5, 5, 7]) <= 1e-13

    def test_deep_inside_equals_strength(self):
        # obstacle far from the outer wall so only its own indicator fires
        w = Workspace(5.0, [[0.0, 0.0, 0.0]], [1.2])
        U = obstacle_potential(w, SPEC, 2.0, 0.9)
        mask = w.region_mask(SPEC.center_points())
        inner = U[mask == 1]
        assert np.allclose(inner, 2.0, atol=1e-12)

    def test_mollifier_has_unit_discrete_mass(self):
        eta = mollifier_tensor(SPEC, 1.7)
        assert eta.sum() * SPEC.cell_volume == pytest.approx(1.0, abs=1e-13)
        assert np.all(eta >= 0.0)


class TestSourceTerm:
    def test_zero_strengths_zero_source(self):
        rho, j, mask = make_blob(ARENA, SPEC)
        state = FieldState(0.0, rho, j, mask)
        S = source_term(state, PdeParams(), np.zeros((11, 11, 11)), SPEC)
        assert np.all(S == 0.0)

    def test_relaxation_vanishes_at_cruise_speed(self):
        rho, _, mask = make_blob(OPEN, SPEC)
        cruise = 1.7
        j = rho[None] * np.array([cruise, 0.0, 0.0])[:, None, None, None]
        state = FieldState(0.0, rho, j, mask)
        params = PdeParams(propulsion_strength=3.0, cruise_speed=cruise)
        S = source_term(state, params, np.zeros((11, 11, 11)), SPEC)
        assert np.max(np.abs(S)) <= 1e-12

    def test_relaxation_shape_function_value(self):
        # at rest the relaxation prefactor is 1 - F(0) = tanh(1)
        rho, j, mask = make_blob(OPEN, SPEC)
        state = FieldState(0.0, rho, j, mask)
        params = PdeParams(propulsion_strength=2.0, cruise_speed=1.0)
        S = source_term(state, params, np.zeros((11, 11, 11)), SPEC)
        assert np.all(S == 0.0)  # j = 0 so the term is zero regardless
        assert 1.0 + np.tanh(-1.0) == pytest.approx(0.23840584404423515)

    def test_symmetric_density_antisymmetric_source(self):
        # j = 0, rho even under x -> -x: the potential-gradient source is odd
        mask = OPEN.region_mask(SPEC.center_points())
        pts = SPEC.center_points()
        rho = np.exp(-np.sum(pts**2, axis=-1) / 4.0)
        rho += rho[::-1, ::-1, ::-1]
        rho /= rho.sum() * SPEC.cell_volume
        state = FieldState(0.0, rho, np.zeros((3, 11, 11, 11)), mask)
        params = PdeParams(cohesion_strength=-0.8, repulsion_strength=0.5,
                           cohesion_decay=1.0, repulsion_decay=2.0)
        S = source_term(state, params, np.zeros((11, 11, 11)), SPEC)
        flipped = -S[:, ::-1, ::-1, ::-1]
        assert np.max(np.abs(S - flipped)) <= 1e-12
        assert np.allclose(S[:, 5, 5, 5], 0.0, atol=1e-13)


def scalar_kt_flux_divergence_1d(rho, u0, h):
    """Independent 1D central-scheme oracle for advection at uniform
    speed with reflecting walls, written with plain loops."""
    n = len(rho)

    def mm(a, b):
        if a * b <= 0:
            return 0.0
        return a if abs(a) <= abs(b) else b

    # mirror ghosts: wall faces carry zero mass flux
    re = np.concatenate([[rho[0]], rho, [rho[-1]]])
    me = np.concatenate([[-rho[0] * u0], rho * u0, [-rho[-1] * u0]])
    sig = np.zeros(n + 2)
    for i in range(1, n + 1):
        sig[i] = mm(re[i] - re[i - 1], re[i + 1] - re[i])
    flux = np.zeros(n + 1)
    for f in range(n + 1):
        left, right = f, f + 1
        rl = re[left] + 0.5 * sig[left] if 1 <= left <= n else None
        rr = re[right] - 0.5 * sig[right] if 1 <= right <= n else None
        if rl is None:
            rl = rr
            ml, mr = -rr * u0, rr * u0
        elif rr is None:
            rr = rl
            ml, mr = rl * u0, -rl * u0
        else:
            ml, mr = rl * u0, rr * u0
        flux[f] = 0.5 * (ml + mr) - 0.5 * abs(u0) * (rr - rl)
    return (flux[1:] - flux[:-1]) / h


class TestFluxDivergence:
    def test_uniform_state_is_exactly_steady(self):
        mask = ARENA.region_mask(SPEC.center_points())
        fluid = mask == 0
        rho = np.where(fluid, 0.5, 0.0)
        state = FieldState(0.0, rho, np.zeros((3, 11, 11, 11)), mask)
        div_rho, div_j = flux_divergence(state, SPEC, 1e-3)
        assert np.all(div_rho == 0.0)
        assert np.all(div_j == 0.0)

    def test_matches_scalar_advection_oracle(self):
        # y,z-uniform slab moving along x reduces to 1D scalar advection
        n = SPEC.cells_per_axis
        mask = OPEN.region_mask(SPEC.center_points())
        u0 = 0.7
        prof = 1.0 + np.where(np.arange(n) < n // 2, 1.0, 0.0)
        rho = np.broadcast_to(prof[:, None, None], (n, n, n)).copy()
        j = np.zeros((3, n, n, n))
        j[0] = u0 * rho
        state = FieldState(0.0, rho, j, mask)
        div_rho, _ = flux_divergence(state, SPEC, 1e-6)
        oracle = scalar_kt_flux_divergence_1d(prof, u0, SPEC.dx)
        # interior cells of every pencil follow the 1D scheme
        assert np.max(np.abs(div_rho[:, 5, 5] - oracle)) <= 1e-12

    def test_wall_faces_carry_no_mass_flux(self):
        n = SPEC.cells_per_axis
        mask = ARENA.region_mask(SPEC.center_points())
        fluid = mask == 0
        rng = np.random.default_rng(0)
        rho = np.where(fluid, 0.5 + rng.random((n, n, n)), 0.0)
        j = np.where(fluid, rng.normal(size=(3, n, n, n)), 0.0)
        U = hydro._stack(rho, j, fluid)
        for axis in range(3):
            high, low = hydro._axis_face_fluxes(U, fluid, axis, 1.0, 1e-12)
            fl = np.moveaxis(fluid, axis, 0)
            fluid_l = np.zeros((n + 1,) + fl.shape[1:], dtype=bool)
            fluid_r = np.zeros_like(fluid_l)
            fluid_l[1:] = fl
            fluid_r[:-1] = fl
            wall = fluid_l ^ fluid_r
            assert np.all(high[0][wall] == 0.0)
            assert np.all(low[0][wall] == 0.0)

    def test_total_mass_flux_telescopes_to_zero(self):
        n = SPEC.cells_per_axis
        mask = ARENA.region_mask(SPEC.center_points())
        fluid = mask == 0
        rng = np.random.default_rng(1)
        rho = np.where(fluid, 0.5 + rng.random((n, n, n)), 0.0)
        j = np.where(fluid, rng.normal(size=(3, n, n, n)), 0.0)
        state = FieldState(0.0, rho, j, mask)
        div_rho, _ = flux_divergence(state, SPEC, 1e-4)
        assert abs(div_rho.sum()) <= 1e-12 * np.abs(div_rho).max()


class TestPositivityLimit:
    def _faces(self, n, rho, fluid, extra_high=None):
        U = hydro._stack(rho, np.zeros((3, n, n, n)), fluid)
        high, low = [], []
        for a in range(3):
            fh, fl_ = hydro._axis_face_fluxes(U, fluid, a, 1.0, 1e-12)
            high.append(fh)
            low.append(fl_)
        if extra_high is not None:
            high[0] = high[0] + extra_high
        return high, low

    def test_safe_flux_keeps_theta_one(self):
        n = 5
        spec = GridSpec(n, 5.0, 1.0)
        w = Workspace(5.0)
        fluid = w.region_mask(spec.center_points()) == 0
        rng = np.random.default_rng(2)
        rho = 1.0 + rng.random((n, n, n))
        j = 0.1 * rng.normal(size=(3, n, n, n))
        U = hydro._stack(rho, j, fluid)
        high, low = [], []
        for a in range(3):
            fh, fl_ = hydro._axis_face_fluxes(U, fluid, a, 2.0, 1e-12)
            high.append(fh)
            low.append(fl_)
        blended, thetas = positivity_limit(low, high, rho, fluid, 1e-4, spec.dx)
        for th in thetas:
            assert np.all(th == 1.0)

    def test_identical_fluxes_give_theta_one(self):
        n = 5
        spec = GridSpec(n, 5.0, 1.0)
        fluid = np.ones((n, n, n), dtype=bool)
        rho = np.ones((n, n, n))
        high, low = self._faces(n, rho, fluid)
        blended, thetas = positivity_limit(low, high, rho, fluid, 1e-3, spec.dx)
        for th, hi in zip(thetas, high):
            assert np.all(th == 1.0)
        for b, h in zip(blended, high):
            assert np.array_equal(b, h)

    def test_draining_face_is_limited(self):
        n = 5
        spec = GridSpec(n, 5.0, 1.0)
        fluid = np.ones((n, n, n), dtype=bool)
        rho = np.full((n, n, n), 1e-9)
        # manufacture a large high-order outflow on one face along x
        extra = np.zeros((4, n + 1, n, n))
        extra[0, 3, 2, 2] = 1.0
        high, low = self._faces(n, rho, fluid, extra_high=extra)
        dt = 1e-3
        blended, thetas = positivity_limit(low, high, rho, fluid, dt, spec.dx)
        # apply the forward-Euler update; density must stay nonnegative
        rho_new = rho.copy()
        for a in range(3):
            f = blended[a][0]
            rho_new -= dt / spec.dx * np.moveaxis(f[1:] - f[:-1], 0, a)
        assert rho_new.min() >= 0.0
        assert thetas[0][3, 2, 2] < 1.0


class TestCflDt:
    def test_at_rest_clamps_to_dt_max(self):
        rho, j, mask = make_blob(ARENA, SPEC)
        state = FieldState(0.0, rho, j, mask)
        assert cfl_dt(state, SPEC, 0.05, dt_max=0.013) == 0.013

    def test_known_speed(self):
        mask = OPEN.region_mask(SPEC.center_points())
        rho = np.ones((11, 11, 11))
        j = np.zeros((3, 11, 11, 11))
        j[0] = 5.0
        state = FieldState(0.0, rho, j, mask)
        assert cfl_dt(state, SPEC, 0.05, dt_max=1.0) == pytest.approx(0.05 * (10.0 / 11.0) / 5.0)

    def test_doubling_speed_halves_dt(self):
        mask = OPEN.region_mask(SPEC.center_points())
        rho = np.ones((11, 11, 11))
        j = np.zeros((3, 11, 11, 11))
        j[1] = 2.5
        s1 = FieldState(0.0, rho, j, mask)
        s2 = FieldState(0.0, rho, 2.0 * j, mask)
        assert cfl_dt(s1, SPEC, 0.05, dt_max=1.0) == pytest.approx(
            2.0 * cfl_dt(s2, SPEC, 0.05, dt_max=1.0))


class TestHeunStep:
    def test_zero_rhs_is_identity(self):
        u = np.array([1.0, -2.0, 3.0])
        out = heun_step(u, 0.1, lambda x: np.zeros_like(x))
        assert np.array_equal(out, u)

    def test_linear_ode_one_step(self):
        alpha, dt, u = -1.7, 0.05, 2.0
        out = heun_step(u, dt, lambda x: alpha * x)
        assert out == pytest.approx(u * (1 + alpha * dt + (alpha * dt) ** 2 / 2), rel=1e-15)

    def test_second_order_on_smooth_ode(self):
        # u' = cos(t) u via augmented state (u, t); exact u = exp(sin t)
        errs = []
        dts = [0.1, 0.05, 0.025, 0.0125]
        for dt in dts:
            u = np.array([1.0, 0.0])
            n = int(round(2.0 / dt))
            rhs = lambda s: np.array([np.cos(s[1]) * s[0], 1.0])
            for _ in range(n):
                u = heun_step(u, dt, rhs)
            errs.append(abs(u[0] - np.exp(np.sin(2.0))))
        slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert 1.8 <= slope <= 2.2


class TestSspRk2Step:
    def test_steady_state_unchanged(self):
        mask = OPEN.region_mask(SPEC.center_points())
        fluid = mask == 0
        rho = np.where(fluid, 1.0 / (fluid.sum() * SPEC.cell_volume), 0.0)
        state = FieldState(0.0, rho, np.zeros((3, 11, 11, 11)), mask)
        out = ssp_rk2_step(state, PdeParams(), np.zeros((11, 11, 11)), SPEC, 0.01)
        assert np.array_equal(out.rho, state.rho)
        assert np.array_equal(out.momentum, state.momentum)
        assert out.t == pytest.approx(0.01)

    def test_mass_conserved_per_step(self):
        rho, j, mask = make_blob(ARENA, SPEC, flow=(0.8, -0.3, 0.2))
        state = FieldState(0.0, rho, j, mask)
        params = PdeParams(1.0, -0.8, 0.5, 1.0, 1.0, 1.0, 1.2, 2.0, 1.0, 0.8)
        pot = obstacle_potential(ARENA, SPEC, params.obstacle_strength, params.obstacle_range)
        out = ssp_rk2_step(state, params, pot, SPEC, 5e-3)
        m0 = rho.sum() * SPEC.cell_volume
        m1 = out.rho.sum() * SPEC.cell_volume
        assert abs(m1 - m0) / m0 <= 1e-12

    def test_blowup_detection(self):
        mask = OPEN.region_mask(SPEC.center_points())
        rho = np.ones((11, 11, 11))
        rho[0, 0, 0] = np.nan
        state = FieldState(0.0, rho, np.zeros((3, 11, 11, 11)), mask)
        with pytest.raises(BlowupError):
            ssp_rk2_step(state, PdeParams(), np.zeros((11, 11, 11)), SPEC, 1e-3)


class TestSolveForward:
    def test_zero_duration(self):
        rho, j, mask = make_blob(ARENA, SPEC)
        traj = solve_forward(rho, j, PdeParams(), ARENA, SPEC, 0.0, 0.0, [0.0])
        assert len(traj.times) == 1
        assert np.array_equal(traj.rhos[0], rho)

    def test_frozen_dynamics(self):
        mask = OPEN.region_mask(SPEC.center_points())
        fluid = mask == 0
        rho = np.where(fluid, 1.0 / (fluid.sum() * SPEC.cell_volume), 0.0)
        traj = solve_forward(rho, np.zeros((3, 11, 11, 11)), PdeParams(), OPEN, SPEC,
                             0.0, 0.5, [0.25, 0.5])
        for s in range(len(traj.times)):
            assert np.array_equal(traj.rhos[s], rho)

    def test_mass_conservation_and_positivity_over_run(self):
        rho, j, mask = make_blob(ARENA, SPEC, flow=(0.8, 0.3, -0.4))
        params = PdeParams(1.0, -0.8, 0.5, 1.0, 1.0, 1.0, 1.2, 2.0, 1.0, 0.8)
        traj = solve_forward(rho, j, params, ARENA, SPEC, 0.0, 1.0, [1.0])
        assert traj.stats.mass_drift <= 1e-10
        assert traj.stats.min_density >= 0.0

    def test_reflection_symmetry_preserved(self):
        # symmetric arena, even density, odd momentum: evolution keeps both
        spec = GridSpec(9, 5.0, 1.0)
        mask = OPEN.region_mask(spec.center_points())
        fluid = mask == 0
        pts = spec.center_points()
        rho = np.exp(-np.sum(pts**2, axis=-1) / 3.0)
        rho = rho + rho[::-1, ::-1, ::-1]
        rho = np.where(fluid, rho, 0.0)
        rho /= rho.sum() * spec.cell_volume
        j = 0.3 * pts.transpose(3, 0, 1, 2) * rho
        params = PdeParams(0.7, -0.5, 0.3, 0.8, 0.0, 1.0, 1.0, 1.5, 1.0, 1.0)
        traj = solve_forward(rho, j, params, OPEN, spec, 0.0, 0.2, [0.2])
        r = traj.rhos[-1]
        m = traj.momenta[-1]
        assert np.max(np.abs(r - r[::-1, ::-1, ::-1])) <= 1e-10
        assert np.max(np.abs(m + m[:, ::-1, ::-1, ::-1])) <= 1e-10

    def test_interp_mode_brackets_outputs(self):
        rho, j, mask = make_blob(ARENA, SPEC, flow=(0.5, 0.0, 0.0))
        params = PdeParams(0.5, -0.4, 0.2, 0.5, 0.5, 1.0, 1.0, 1.0, 1.0, 1.0)
        times = [0.0, 0.077, 0.2]
        exact = solve_forward(rho, j, params, ARENA, SPEC, 0.0, 0.2, times, snap="exact")
        interp = solve_forward(rho, j, params, ARENA, SPEC, 0.0, 0.2, times, snap="interp")
        assert np.allclose(exact.times, times)
        assert np.allclose(interp.times, times)
        # linear interpolation stays within O(dt^2) of the exact landing
        assert np.max(np.abs(exact.rhos[1] - interp.rhos[1])) <= 1e-4
        assert np.array_equal(exact.rhos[0], interp.rhos[0])

    def test_invalid_initial_mass_rejected(self):
        rho, j, mask = make_blob(ARENA, SPEC)
        with pytest.raises(ValueError, match="mass"):
            solve_forward(2.0 * rho, j, PdeParams(), ARENA, SPEC, 0.0, 0.1, [0.1])

    def test_output_times_outside_window_rejected(self):
        rho, j, mask = make_blob(ARENA, SPEC)
        with pytest.raises(ValueError):
            solve_forward(rho, j, PdeParams(), ARENA, SPEC, 0.0, 0.1, [0.2])
