import math

import numpy as np
import pytest

from repairsys.model import Grid, SystemState, cfg_a, dist_x, marginals, norm_x, pulse_state, availability
from repairsys.openloop import (
    ConvergedBeforeWindow,
    Trajectory,
    boundary_values,
    decay_rate_fit,
    from_advected,
    solve_open_loop,
    steady_state,
    to_advected,
    upwind_oracle,
)

PE0_EXACT = 2.0 / (3.0 * (1.0 + math.exp(-1.0)))


@pytest.fixture(scope="module")
def params():
    return cfg_a()


@pytest.fixture(scope="module")
def grid200():
    return Grid(200, 1.0)


@pytest.fixture(scope="module")
def steady200(params, grid200):
    return steady_state(params, grid200)


@pytest.fixture(scope="module")
def pulse_traj200(params, grid200):
    return solve_open_loop(params, pulse_state(grid200), 10.0, grid200)


class TestSteadyState:
    def test_cfg_a_closed_form(self, params):
        # C1 = int (1-x) = 1/2, C0 = int e^{-x}(1-x) = 1/e by hand integration,
        # so p_e0 = 2/(3(1+1/e))
        g = Grid(400, 1.0)
        se = steady_state(params, g)
        assert se.p0 == pytest.approx(PE0_EXACT, abs=1e-6)
        x = g.nodes
        p1_exact = PE0_EXACT * np.exp(-x) * (1.0 - x)
        p2_exact = PE0_EXACT * (1.0 + math.exp(-1.0)) * (1.0 - x)
        assert np.abs(se.p1 - p1_exact).max() < 1e-6
        assert np.abs(se.p2 - p2_exact).max() < 1e-6

    def test_boundary_and_end_values(self, params):
        g = Grid(64, 1.0)
        se = steady_state(params, g)
        assert se.p1[0] == pytest.approx(params.lambda1 * se.p0, rel=1e-12)
        assert se.p1[-1] == 0.0
        assert se.p2[-1] == 0.0

    def test_normalized(self, params, grid200, steady200):
        assert norm_x(steady200, grid200) == pytest.approx(1.0, abs=1e-9)

    def test_marginals_closed_form(self, params):
        # int p_e1 = p_e0/e, int p_e2 = p_e0 (1 + 1/e)/2 from the closed forms
        g = Grid(400, 1.0)
        se = steady_state(params, g)
        ph1, ph2 = marginals(se, g)
        assert ph1 == pytest.approx(se.p0 * math.exp(-1.0), abs=1e-6)
        assert ph2 == pytest.approx(se.p0 * (1.0 + math.exp(-1.0)) / 2.0, abs=1e-6)

    def test_availability_is_pe0(self, params, grid200, steady200):
        assert availability(steady200, grid200) == pytest.approx(PE0_EXACT, abs=1e-5)


class TestBoundaryValues:
    def test_pulse(self, params, grid200):
        b1, b2 = boundary_values(1.0, np.zeros(201), grid200, params)
        assert (b1, b2) == (params.lambda1, params.lambda2)

    def test_zero(self, params, grid200):
        assert boundary_values(0.0, np.zeros(201), grid200, params) == (0.0, 0.0)

    def test_steady_consistency(self, params, grid200, steady200):
        b1, b2 = boundary_values(steady200.p0, steady200.p1, grid200, params)
        assert b1 == pytest.approx(steady200.p1[0], abs=1e-6)
        assert b2 == pytest.approx(steady200.p2[0], abs=1e-6)


class TestOpenLoopMarch:
    def test_conservation_pulse(self, pulse_traj200):
        assert np.abs(pulse_traj200.norms - 1.0).max() < 4e-4  # ~1e-4 at n=400

    def test_positivity(self, pulse_traj200):
        for s in pulse_traj200.states:
            assert s.p0 >= -1e-12
            assert s.p1.min() >= -1e-12
            assert s.p2.min() >= -1e-12

    def test_density_vanishes_at_max_repair_time(self, pulse_traj200):
        for s in pulse_traj200.states[1:]:
            assert s.p1[-1] == 0.0
            assert s.p2[-1] == 0.0

    def test_steady_state_is_fixed_point(self, params, grid200, steady200):
        traj = solve_open_loop(params, steady200, 10.0, grid200)
        assert max(traj.dist_to(steady200)) < 1e-3

    def test_pulse_approaches_steady(self, params, grid200, steady200, pulse_traj200):
        d = pulse_traj200.dist_to(steady200)
        assert d[-1] < 1e-3

    def test_branch_continuity_with_compatible_data(self, params, grid200, steady200):
        sol = solve_open_loop(params, steady200, 2.0, grid200).solution
        eps = 1e-9
        for x0, t0 in [(0.4, 0.4), (0.25, 0.5), (0.3, 0.6)]:
            assert abs(sol.p1_at(x0, t0 + eps) - sol.p1_at(x0, t0 - eps)) < 1e-8
            assert abs(sol.p2_at(x0, t0 + eps) - sol.p2_at(x0, t0 - eps)) < 1e-8

    def test_unaligned_dt_matches_aligned(self, params):
        g_al = Grid(100, 1.0)
        g_un = Grid(100, 1.0, dt=0.8 / 100)
        assert not g_un.aligned
        init = pulse_state(g_al)
        a = solve_open_loop(params, init, 3.0, g_al)
        b = solve_open_loop(params, init, 3.0, g_un)
        sa = a.states[-1]
        sb = b.solution.state_at(3.0)
        assert dist_x(sa, sb, g_al) < 2e-3

    def test_input_validation(self, params, grid200):
        bad = SystemState(-0.5, np.zeros(201), np.zeros(201))
        with pytest.raises(ValueError):
            solve_open_loop(params, bad, 1.0, grid200)
        with pytest.raises(ValueError):
            solve_open_loop(params, pulse_state(grid200), -1.0, grid200)


class TestUpwindOracle:
    def test_steady_stays_constant_within_dx(self, params, grid200, steady200):
        traj = upwind_oracle(params, steady200, 3.0, grid200)
        assert max(traj.dist_to(steady200)) < 5.0 * grid200.dx

    def test_matches_characteristics_solver(self, params):
        g = Grid(100, 1.0)
        a = solve_open_loop(params, pulse_state(g), 5.0, g, max_snapshots=2000)
        b = upwind_oracle(params, pulse_state(g), 5.0, g, max_snapshots=2000)
        assert np.allclose(a.times, b.times)
        gap = max(dist_x(sa, sb, g) for sa, sb in zip(a.states, b.states))
        assert gap < 4e-2  # empirically ~2e-2 at n=100, first order

    def test_q_transform_round_trip(self, params, grid200):
        rng = np.random.default_rng(7)
        shape = 1.0 - grid200.nodes
        st = SystemState(0.3, rng.random(201) * shape, rng.random(201) * shape)
        q1, q2 = to_advected(st, params, grid200)
        back = from_advected(st.p0, q1, q2, params, grid200)
        assert np.abs(back.p1[:-1] - st.p1[:-1]).max() < 1e-13
        assert np.abs(back.p2[:-1] - st.p2[:-1]).max() < 1e-13


class TestDecayFit:
    def _synthetic(self):
        g = Grid(16, 1.0)
        times = np.linspace(0.0, 8.0, 33)
        z = np.zeros(17)
        states = [SystemState(2.0 * math.exp(-0.7 * t), z, z) for t in times]
        return Trajectory(times, states, np.ones_like(times), g)

    def test_exact_log_linear_data(self):
        traj = self._synthetic()
        ref = SystemState(0.0, np.zeros(17), np.zeros(17))
        fit = decay_rate_fit(traj, ref, window=(0.0, 8.0), floor=1e-30)
        assert fit.m_amp == pytest.approx(2.0, abs=1e-6)
        assert fit.eps == pytest.approx(0.7, abs=1e-6)
        assert fit.residual < 1e-10

    def test_identical_trajectory_signals(self, params, grid200, steady200):
        traj = solve_open_loop(params, steady200, 2.0, grid200)
        with pytest.raises(ConvergedBeforeWindow):
            decay_rate_fit(traj, steady200, window=(0.5, 1.5))

    def test_cfg_a_transient_window_has_positive_rate(self, params, grid200, steady200, pulse_traj200):
        # decay is fast (spectral gap ~3.6); fit where distances are well
        # above the discretization floor
        fit = decay_rate_fit(pulse_traj200, steady200, window=(0.3, 2.0))
        assert fit.eps > 0.0
        assert fit.eps == pytest.approx(3.6, rel=0.5)

    def test_window_too_small(self, params, grid200, steady200, pulse_traj200):
        with pytest.raises(ValueError):
            decay_rate_fit(pulse_traj200, steady200, window=(1.0, 1.001))


def test_trajectory_times_validated(grid200):
    z = np.zeros(201)
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 0.0]), [SystemState(1, z, z)] * 2, np.ones(2), grid200)
