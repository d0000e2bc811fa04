"""Mild-form dynamics: linear profile, Duhamel integrals, solvers."""

import numpy as np
import pytest

from bqflow.errors import CoverageError, DivergedError
from bqflow.grid import (
    Field,
    GridSpec,
    gaussian_bump,
    heat_semigroup,
    leray_project,
    lp_norm,
)
from bqflow.dynamics import (
    ConvergenceHistory,
    FlowState,
    InitialData,
    LinearFlow,
    Trajectory,
    advection_duhamel,
    buoyancy_duhamel,
    buoyancy_feedback_duhamel,
    cross_validate,
    linear_state,
    make_initial_data,
    march_solve,
    picard_solve,
    transport_duhamel,
)

G16 = GridSpec(n=16, length=16.0)


def single_mode_u(grid, amplitude=1.0):
    """Steady divergence-free single-mode velocity A cos(k1 x1) e3."""
    x = grid.x1
    k1 = 2 * np.pi / grid.length
    comp = amplitude * np.broadcast_to(
        np.cos(k1 * x)[:, None, None], (grid.n,) * 3).copy()
    z = np.zeros_like(comp)
    return Field.from_real(grid, np.stack([z, z, comp]))


def single_mode_theta(grid, amplitude=1.0):
    x = grid.x1
    k1 = 2 * np.pi / grid.length
    return Field.from_real(grid, amplitude * np.broadcast_to(
        np.cos(k1 * x)[:, None, None], (grid.n,) * 3).copy())


def steady_trajectory(times, u=None, theta=None, grid=G16):
    u = u if u is not None else Field.zeros(grid, "vector")
    theta = theta if theta is not None else Field.zeros(grid)
    return Trajectory(np.asarray(times),
                      [FlowState(t=t, u=u, theta=theta) for t in times])


class TestInitialData:
    def test_mass_frozen(self):
        d = make_initial_data(G16, mass=2.5, width=1.0)
        assert abs(d.mass - 2.5) < 1e-10

    def test_dipole_zero_mass_unit_l1(self):
        d = make_initial_data(G16, theta_kind="dipole", width=1.5, dipole_l1=0.7)
        assert abs(d.mass) < 1e-12
        assert abs(lp_norm(d.theta0, 1) - 0.7) < 1e-10

    def test_nondivfree_rejected(self):
        bad = Field.from_real(G16, np.stack([
            np.broadcast_to(np.sin(2 * np.pi * G16.x1 / 16)[:, None, None],
                            (16,) * 3).copy(),
            np.zeros((16,) * 3), np.zeros((16,) * 3)]))
        with pytest.raises(ValueError):
            InitialData(u0=bad, theta0=Field.zeros(G16))

    def test_random_u0_divergence_free(self):
        d = make_initial_data(G16, u0_amplitude=0.3, seed=5)
        assert lp_norm(d.u0, np.inf) > 0


class TestTrajectory:
    def test_node_validation(self):
        s = FlowState(0.0, Field.zeros(G16, "vector"), Field.zeros(G16))
        with pytest.raises(ValueError):
            Trajectory(np.array([0.0, 1.0, 0.5]), [s, s, s])
        with pytest.raises(ValueError):
            Trajectory(np.array([0.5, 1.0]), [s, s])

    def test_coverage_error(self):
        traj = steady_trajectory([0.0, 0.5, 1.0])
        with pytest.raises(CoverageError):
            advection_duhamel(traj, traj, 2.0)
        with pytest.raises(CoverageError):
            advection_duhamel(traj, traj, 0.3)


class TestLinearProfile:
    def test_t_zero_is_data(self):
        d = make_initial_data(G16, mass=1.0, width=1.0, u0_amplitude=0.1, seed=1)
        s = linear_state(d, 0.0)
        assert lp_norm(s.u - d.u0, np.inf) <= 1e-13
        assert lp_norm(s.theta - d.theta0, np.inf) <= 1e-13

    def test_single_mode_by_hand(self):
        # theta0 = cos(k x1): carrier modes are orthogonal to e3, so the
        # projector passes e3 through and u(t) = t e^{-k^2 t} theta0 e3
        th = single_mode_theta(G16)
        d = InitialData(u0=Field.zeros(G16, "vector"), theta0=th)
        t = 0.8
        k = 2 * np.pi / G16.length
        s = linear_state(d, t)
        expected = t * np.exp(-k * k * t) * th.real_values
        assert np.max(np.abs(s.u.real_values[2] - expected)) <= 1e-12
        assert np.max(np.abs(s.u.real_values[:2])) <= 1e-12

    def test_velocity_divergence_free(self):
        from bqflow.grid import divergence_residual

        d = make_initial_data(G16, mass=1.0, width=1.5, u0_amplitude=0.2, seed=2)
        s = linear_state(d, 1.3)
        assert divergence_residual(s.u) <= 1e-12

    def test_compensated_norm_approaches_kernel_column(self):
        # t^{(1/2)(1 - 3/p)} || u_lin ||_p -> |m| t^... matches m t K(t) e3
        # built on the same box as the bump sharpens relative to sqrt(t)
        from bqflow.kernels import build_kernel

        g = GridSpec(n=64, length=32.0)
        d = make_initial_data(g, mass=1.3, width=0.75)
        lin = LinearFlow(d)
        errs = []
        for t in (4.0, 9.0):
            s = lin.state(t)
            K = build_kernel("projected_heat", g, t)
            ref = 1.3 * t * K.column(2).real_values
            errs.append(np.sqrt(((s.u.real_values - ref) ** 2).sum())
                        / np.sqrt((ref**2).sum()))
        assert errs[1] < errs[0]
        assert errs[1] <= 0.05


class TestDuhamelIntegrals:
    def test_zero_arguments(self):
        times = np.linspace(0, 1, 9)
        traj0 = steady_trajectory(times)
        traj_u = steady_trajectory(times, u=single_mode_u(G16))
        assert lp_norm(advection_duhamel(traj0, traj0, 1.0), np.inf) == 0
        assert lp_norm(transport_duhamel(traj_u, traj0, 1.0), np.inf) == 0
        assert lp_norm(buoyancy_feedback_duhamel(traj_u, traj0, 1.0), np.inf) == 0
        assert lp_norm(buoyancy_duhamel(traj0, 1.0), np.inf) == 0

    def test_t_zero_empty_integral(self):
        times = np.linspace(0, 1, 9)
        traj = steady_trajectory(times, u=single_mode_u(G16),
                                 theta=single_mode_theta(G16))
        assert lp_norm(advection_duhamel(traj, traj, 0.0), np.inf) == 0
        assert lp_norm(transport_duhamel(traj, traj, 0.0), np.inf) == 0

    def test_advection_single_mode_oracle(self):
        # steady u = A cos(k x1) e3: the quadratic term rides on the mode
        # K = 2k e1 and the exact time factor is (1 - e^{-K^2 t})/K^2
        g = G16
        A = 0.7
        k = 2 * np.pi / g.length
        K = 2 * k
        t = 1.0
        results = {}
        for M in (17, 33, 65):
            times = np.linspace(0, t, M)
            traj = steady_trajectory(times, u=single_mode_u(g, A), grid=g)
            out = advection_duhamel(traj, traj, t)
            # projection of [i K T33(K)] e1-mode onto component 3 is itself
            c = out.component(2).spectral_values
            i_k = np.where(g.mode_index == 2)[0][0]
            results[M] = c[i_k, 0, 0]
        closed = 1j * K * (A * A / 4) * (1 - np.exp(-K * K * t)) / (K * K)
        err = {M: abs(results[M] - closed) for M in results}
        assert err[65] < 1e-3 * abs(closed)
        order1 = np.log2(err[17] / err[33])
        order2 = np.log2(err[33] / err[65])
        assert 1.6 < order1 < 2.4 and 1.6 < order2 < 2.4

    def test_transport_single_mode_oracle(self):
        g = G16
        A, B = 0.5, 0.9
        k = 2 * np.pi / g.length
        t = 1.0
        times = np.linspace(0, t, 65)
        traj = steady_trajectory(times, u=single_mode_u(g, A),
                                 theta=single_mode_theta(g, B), grid=g)
        out = transport_duhamel(traj, traj, t)
        # u theta = A B cos^2(k x1) e3-component; div picks d3 -> 0 since
        # the product depends on x1 only but u points along e3: the
        # divergence is d3(u3 theta) = 0.  the result must vanish.
        assert lp_norm(out, np.inf) <= 1e-14

    def test_transport_nonzero_oracle(self):
        # u = A cos(k x1) e1-directed would not be divergence-free; use
        # u = A cos(k x2) e1 (div-free) and theta = B cos(k x1):
        # u theta rides on modes (+-k, +-k, 0); d1 contributes
        g = G16
        A, B = 0.4, 0.8
        k = 2 * np.pi / g.length
        x = g.x1
        comp = A * np.broadcast_to(np.cos(k * x)[None, :, None], (g.n,) * 3).copy()
        z = np.zeros_like(comp)
        u = Field.from_real(g, np.stack([comp, z, z]))
        th = single_mode_theta(g, B)
        t = 0.75
        times = np.linspace(0, t, 65)
        traj = steady_trajectory(times, u=u, theta=th, grid=g)
        out = transport_duhamel(traj, traj, t)
        # mode q = (k, k, 0): coefficient of u1 theta there is AB/4;
        # integrand i q1 (AB/4) e^{-|q|^2 (t-s)}
        q2 = 2 * k * k
        closed = 1j * k * (A * B / 4) * (1 - np.exp(-q2 * t)) / q2
        c = out.spectral_values
        i_k = np.where(g.mode_index == 1)[0][0]
        got = c[i_k, i_k, 0]
        assert abs(got - closed) <= 2e-4 * abs(closed)

    def test_buoyancy_duhamel_constant_theta(self):
        g = G16
        th = single_mode_theta(g, 1.1)
        t = 1.2
        k = 2 * np.pi / g.length
        times = np.linspace(0, t, 33)
        traj = steady_trajectory(times, theta=th, grid=g)
        out = buoyancy_duhamel(traj, t)
        factor = (1 - np.exp(-k * k * t)) / (k * k)
        expected = factor * th.real_values
        # carrier mode is along e1 so the projector passes e3 through
        assert np.max(np.abs(out.real_values[2] - expected)) <= 1e-12
        assert np.max(np.abs(out.real_values[:2])) <= 1e-13

    def test_buoyancy_duhamel_pure_heat_theta(self):
        # with theta(s) = e^{s Lap} theta0 the integrand is constant in s
        # and the integral telescopes to t e^{t Lap} P theta0 e3 exactly
        g = G16
        th0 = gaussian_bump(g, width=1.0, mass=1.0)
        d = InitialData(u0=Field.zeros(g, "vector"), theta0=th0)
        t = 1.0
        times = np.linspace(0, t, 17)
        states = [FlowState(s, Field.zeros(g, "vector"), heat_semigroup(th0, s))
                  for s in times]
        traj = Trajectory(times, states)
        out = buoyancy_duhamel(traj, t)
        lin = linear_state(d, t)
        assert lp_norm(out - lin.u, np.inf) <= 1e-12 * lp_norm(lin.u, np.inf)

    def test_bilinearity(self):
        g = G16
        times = np.linspace(0, 1, 9)
        u = single_mode_u(g, 1.0)
        th = single_mode_theta(g, 1.0)
        tu = steady_trajectory(times, u=u, theta=th, grid=g)
        tu_scaled = steady_trajectory(times, u=2.0 * u, theta=3.0 * th, grid=g)
        a = buoyancy_feedback_duhamel(tu_scaled, tu_scaled, 1.0)
        b = buoyancy_feedback_duhamel(tu, tu, 1.0)
        assert lp_norm(a - 6.0 * b, np.inf) <= 1e-12 * max(lp_norm(a, np.inf), 1e-30)


class TestPicard:
    def test_zero_data(self):
        d = InitialData(u0=Field.zeros(G16, "vector"), theta0=Field.zeros(G16))
        traj, hist = picard_solve(d, T=1.0, n_nodes=9)
        assert hist.converged and hist.sweeps == 1
        assert all(lp_norm(s.u, np.inf) == 0 for s in traj.states)

    def test_linear_only_returns_profile(self):
        d = make_initial_data(G16, mass=0.5, width=1.5)
        traj, hist = picard_solve(d, T=1.0, n_nodes=9, bilinear=False)
        lin = LinearFlow(d)
        for t, s in zip(traj.times, traj.states):
            ref = lin.state(t)
            assert lp_norm(s.u - ref.u, np.inf) <= 1e-12
            assert lp_norm(s.theta - ref.theta, np.inf) <= 1e-12

    def test_contraction_and_amplitude_halving(self):
        hists = {}
        for amp in (0.2, 0.1):
            d = make_initial_data(G16, mass=amp, width=1.5)
            traj, hist = picard_solve(d, T=1.0, n_nodes=17, tol=1e-13)
            hists[amp] = hist
        # quadratic first correction: first increment scales ~ amp^2,
        # so halving the data at least halves it
        assert hists[0.1].increments[0] <= 0.5 * hists[0.2].increments[0] * 1.05
        # small data contracts fast
        r = hists[0.1].ratios[0]
        assert r < 0.5

    def test_divergence_detected(self):
        d = make_initial_data(G16, mass=2000.0, width=1.5)
        with pytest.raises(DivergedError) as exc:
            picard_solve(d, T=2.0, n_nodes=17, n_max=30)
        assert "data norm" in str(exc.value)

    def test_mean_conserved(self):
        d = make_initial_data(G16, mass=0.8, width=1.5)
        traj, _ = picard_solve(d, T=1.0, n_nodes=9)
        means = [s.theta.mean() for s in traj.states]
        assert np.max(np.abs(np.array(means) - means[0])) <= 1e-12 * abs(means[0])


class TestMarch:
    def test_zero_data(self):
        d = InitialData(u0=Field.zeros(G16, "vector"), theta0=Field.zeros(G16))
        traj = march_solve(d, T=0.5, dt=0.1)
        assert all(lp_norm(s.u, np.inf) == 0 for s in traj.states)

    def test_bad_args(self):
        d = make_initial_data(G16, mass=0.1, width=1.5)
        with pytest.raises(ValueError):
            march_solve(d, T=1.0, dt=-0.1)
        with pytest.raises(ValueError):
            march_solve(d, T=1.0, dt=0.1, scheme="euler")

    def test_small_amplitude_matches_linear(self):
        amp = 1e-5
        th = single_mode_theta(G16, amp)
        d = InitialData(u0=Field.zeros(G16, "vector"), theta0=th)
        traj = march_solve(d, T=0.5, dt=0.0125, scheme="if_rk4", store_every=40)
        lin = linear_state(d, 0.5)
        err = lp_norm(traj.states[-1].u - lin.u, np.inf)
        assert err <= 10 * amp * amp + 1e-14

    def test_self_convergence_orders(self):
        d = make_initial_data(G16, mass=1.0, width=1.5)
        for scheme, order in (("if_rk2", 2.0), ("if_rk4", 4.0)):
            sols = {}
            for dt in (0.1, 0.05, 0.025):
                traj = march_solve(d, T=1.0, dt=dt,
                                   scheme=scheme, store_every=10**6)
                sols[dt] = traj.states[-1].u.real_values
            e1 = np.max(np.abs(sols[0.1] - sols[0.05]))
            e2 = np.max(np.abs(sols[0.05] - sols[0.025]))
            observed = np.log2(e1 / e2)
            assert abs(observed - order) <= 0.3

    def test_mean_exactly_conserved_and_divergence_free(self):
        from bqflow.grid import divergence_residual

        d = make_initial_data(G16, mass=1.2, width=1.5, u0_amplitude=0.1, seed=3)
        traj = march_solve(d, T=1.0, dt=0.05, store_every=5)
        m0 = traj.states[0].theta.mean()
        for s in traj.states:
            assert abs(s.theta.mean() - m0) <= 1e-12 * abs(m0)
            assert divergence_residual(s.u) <= 1e-9

    def test_symmetry_inheritance(self):
        # theta0 even in x1 and x2: u1, u2 stay odd and u3, theta stay
        # even in those coordinates (discrete uniqueness consequence)
        g = G16
        d = make_initial_data(g, mass=1.0, width=1.5)
        traj = march_solve(d, T=0.5, dt=0.05, store_every=10)
        s = traj.states[-1]

        def reflect(a, axis):
            return np.roll(np.flip(a, axis=axis), 1, axis=axis)

        u = s.u.real_values
        th = s.theta.real_values
        scale = max(np.max(np.abs(u)), np.max(np.abs(th)))
        for ax in (0, 1):
            assert np.max(np.abs(reflect(th, ax) - th)) <= 1e-9 * scale
            assert np.max(np.abs(reflect(u[2], ax) - u[2])) <= 1e-9 * scale
        assert np.max(np.abs(reflect(u[0], 0) + u[0])) <= 1e-9 * scale
        assert np.max(np.abs(reflect(u[1], 1) + u[1])) <= 1e-9 * scale


class TestCrossValidate:
    def test_zero_data(self):
        d = InitialData(u0=Field.zeros(G16, "vector"), theta0=Field.zeros(G16))
        rep = cross_validate(d, T=0.5, picard_nodes=9, march_dt=0.0625)
        assert rep["max_discrepancy"] == 0.0

    def test_linear_only(self):
        d = make_initial_data(G16, mass=0.5, width=1.5)
        rep = cross_validate(d, T=1.0, picard_nodes=9, march_dt=0.125,
                             bilinear=False)
        assert rep["max_discrepancy"] <= 1e-10

    def test_small_data_agreement(self):
        d = make_initial_data(G16, mass=0.4, width=1.5)
        rep = cross_validate(d, T=1.0, picard_nodes=33, scheme="if_rk4")
        assert rep["picard_converged"]
        assert rep["max_discrepancy"] <= 1e-3
