import math

import numpy as np
import pytest

from morseflow.dynamics import (
    HistoryState,
    VariationalState,
    energy_residual,
    energy_series,
    integrate,
    integrate_variational,
    lyapunov_budget,
    lyapunov_value,
    quartic_diag,
    toy_1d,
    toy_2d,
    two_solution_divergence,
    validate_potential,
)
from morseflow.errors import Blowup, GridMismatch, StepTooLarge
from morseflow.kernels import HistoryFunction, KernelPair, exp_kernel, zero_kernel


@pytest.fixture(scope="module")
def std_kernels():
    A = exp_kernel(1.0)
    return KernelPair(A, exp_kernel(2.0, s_max=A.s_max))


@pytest.fixture(scope="module")
def nomem_kernels():
    A = exp_kernel(1.0)
    return KernelPair(A, zero_kernel(1, s_max=A.s_max))


def bump_history(grid, direction, amp=1.0):
    # smooth profile vanishing at s = 0 with an exponential tail
    prof = amp * (1.0 - np.exp(-2.0 * grid)) * np.exp(-grid)
    return HistoryFunction(grid, prof[:, None] * np.atleast_1d(direction))


class TestPotential:
    def test_toy_invariants(self):
        validate_potential(toy_1d())
        validate_potential(toy_2d())

    def test_toy_values(self):
        P = toy_1d()
        assert P.F(np.array([1.0])) == pytest.approx(0.25)
        assert P.grad_F(np.array([0.5]))[0] == pytest.approx(0.5 - 0.125)
        assert P.hess_F(np.array([1.0]))[0, 0] == pytest.approx(-2.0)
        R, C_F = P.dissipativity
        assert R == pytest.approx(math.sqrt(2.0))
        assert C_F == pytest.approx(0.5)
        gamma, delta = P.quad_bound
        assert gamma == pytest.approx(0.25)
        assert delta == pytest.approx(9.0 / 16.0)

    def test_anisotropic_coefficients(self):
        P = quartic_diag([2.0, 1.0], [1.0, 4.0])
        validate_potential(P)
        assert P.dim == 2


class TestIntegrate:
    def test_flows_to_sink(self, nomem_kernels):
        # 1D phase line: 0 < x0 < 1 flows monotonically to the sink at 1
        traj = integrate(HistoryState(np.array([0.5]), None), toy_1d(),
                         nomem_kernels, 0.0, 10.0, 0.01)
        xs = traj.x[:, 0]
        assert abs(xs[-1] - 1.0) < 1e-4
        assert np.all(np.diff(xs) > -1e-12)

    def test_equilibrium_is_fixed(self, nomem_kernels):
        traj = integrate(HistoryState(np.array([1.0]), None), toy_1d(),
                         nomem_kernels, 0.0, 5.0, 0.01)
        assert np.max(np.abs(traj.x - 1.0)) < 1e-10

    def test_perturbed_sink_location(self, std_kernels):
        # root of x - x^3 + eps*(1/2)*x = 0: x* = sqrt(1 + eps/2)
        eps = 0.01
        x_star = math.sqrt(1.0 + eps / 2.0)
        traj = integrate(HistoryState(np.array([0.5]), None), toy_1d(),
                         std_kernels, eps, 30.0, 0.01)
        assert abs(traj.x[-1, 0] - x_star) < 1e-4

    def test_eta_head_zero_at_every_step(self, std_kernels):
        traj = integrate(HistoryState(np.array([0.3]), None), toy_1d(),
                         std_kernels, 0.05, 2.0, 0.01)
        for k in (0, 7, traj.n_steps):
            eta = traj.eta_at(k)
            assert np.all(eta.values[0] == 0.0)

    def test_initial_history_is_spliced(self, std_kernels):
        grid = np.linspace(0.0, 5.0, 501)
        eta0 = bump_history(grid, 1.0, amp=0.2)
        traj = integrate(HistoryState(np.array([0.5]), eta0), toy_1d(),
                         std_kernels, 0.05, 1.0, 0.01)
        got = traj.eta_at(0)
        # beyond the supplied grid the tail is zero by convention
        want = np.interp(got.grid, grid, eta0.values[:, 0], right=0.0)
        np.testing.assert_allclose(got.values[:, 0], want, atol=1e-12)

    def test_incompatible_head_rejected(self, std_kernels):
        grid = np.linspace(0.0, 5.0, 51)
        eta0 = HistoryFunction(grid, np.ones_like(grid))
        with pytest.raises(ValueError):
            integrate(HistoryState(np.array([0.5]), eta0), toy_1d(),
                      std_kernels, 0.05, 1.0, 0.01)

    def test_blowup_detected(self, nomem_kernels):
        from morseflow.dynamics import Potential

        P = Potential(
            F=lambda x: float(0.25 * x[0] ** 4),
            grad_F=lambda x: x**3,
            hess_F=lambda x: np.diag(3.0 * x**2),
            third_deriv_bound=60.0,
            dissipativity=(math.sqrt(2.0), 0.5),
            quad_bound=(0.25, 9.0 / 16.0),
            dim=1,
        )
        with pytest.raises(Blowup):
            integrate(HistoryState(np.array([1.2]), None), P,
                      nomem_kernels, 0.0, 10.0, 0.005)

    def test_step_too_large(self, nomem_kernels):
        with pytest.raises(StepTooLarge):
            integrate(HistoryState(np.array([0.5]), None), toy_1d(),
                      nomem_kernels, 0.0, 10.0, 1.0)

    def test_dimension_mismatch(self, std_kernels):
        with pytest.raises(GridMismatch):
            integrate(HistoryState(np.array([0.5, 0.5]), None), toy_2d(),
                      std_kernels, 0.0, 1.0, 0.01)

    def test_states_sequence_and_stride(self, std_kernels):
        traj = integrate(HistoryState(np.array([0.4]), None), toy_1d(),
                         std_kernels, 0.02, 1.0, 0.01)
        assert len(traj.states) == traj.n_steps + 1
        s0 = traj.states[0]
        assert s0.t == 0.0 and s0.eta is not None
        traj.eta_stride = 7
        assert traj.states[7].eta is not None
        assert traj.states[8].eta is None
        assert np.allclose(np.diff(traj.times), traj.dt)

    def test_convergence_order(self, std_kernels):
        # whole-scheme error should drop by at least ~4x when dt halves
        # (memory quadrature is second order)
        def run(dt):
            traj = integrate(HistoryState(np.array([0.5]), None), toy_1d(),
                             std_kernels, 0.05, 2.0, dt)
            return traj.x[-1, 0]

        ref = run(0.002)
        e1 = abs(run(0.016) - ref)
        e2 = abs(run(0.008) - ref)
        assert e2 < e1 / 3.0


class TestLyapunov:
    def test_zero_state(self, std_kernels):
        state = HistoryState(np.array([0.0]), None)
        assert lyapunov_value(state, 0.0, 0.1, toy_1d(), std_kernels) == 0.0

    def test_sink_value(self, std_kernels):
        state = HistoryState(np.array([1.0]), None)
        # -2F(1) = -1/2
        assert lyapunov_value(state, 0.0, 0.1, toy_1d(), std_kernels) == pytest.approx(-0.5)

    def test_constant_history_value(self, std_kernels):
        # eta = e1 constant has ||eta||^2 = int e^{-s} = 1
        grid = np.linspace(0.0, std_kernels.A.s_max, 4001)
        eta = HistoryFunction(grid, np.ones_like(grid))
        state = HistoryState(np.array([0.0]), eta)
        val = lyapunov_value(state, 0.0, 0.1, toy_1d(), std_kernels)
        assert val == pytest.approx(0.1, rel=1e-4)

    def test_budget_no_memory(self, nomem_kernels):
        E0, eps0_of = lyapunov_budget(toy_1d(), nomem_kernels)
        assert E0 == pytest.approx(0.5, rel=1e-4)
        assert eps0_of(E0 / 2.0) == math.inf

    def test_budget_cross_checked_by_scan(self, std_kernels):
        E0, eps0_of = lyapunov_budget(toy_1d(), std_kernels)
        c = std_kernels.constants
        G1 = c.D_A_bar**2 * c.int_norm_A
        G2 = c.C_A
        G3 = c.D_M_bar**2 * c.int_norm_A + c.D_A_bar**2 * c.int_norm_M
        G4 = c.D_M_bar**2 * c.int_norm_M
        assert E0 == pytest.approx(G2 / (2 * G1))
        for E in (E0, E0 / 2, E0 / 5):
            eps_grid = np.linspace(0.0, 1.0, 200001)
            ok = eps_grid * G3 * G2 / (2 * G1) + eps_grid**2 * G4 <= E * G2 / 4
            scan = eps_grid[ok][-1]
            assert eps0_of(E) == pytest.approx(scan, abs=1e-5)

    def test_lower_bound(self, std_kernels):
        # L >= E||eta||^2 + (2 gamma - eps int||M||)|x|^2 - 2 delta
        P = toy_1d()
        gamma, delta = P.quad_bound
        rng = np.random.default_rng(1)
        grid = np.linspace(0.0, 10.0, 401)
        for _ in range(25):
            x = rng.uniform(-3, 3, 1)
            eta = bump_history(grid, rng.standard_normal(1), amp=rng.uniform(0, 2))
            state = HistoryState(x, eta)
            eps, E = rng.uniform(0, 0.1), rng.uniform(0.01, 0.5)
            from morseflow.kernels import weighted_norm_sq

            lhs = lyapunov_value(state, eps, E, P, std_kernels)
            nsq = weighted_norm_sq(eta, std_kernels.A)
            rhs = (E * nsq
                   + (2 * gamma - eps * std_kernels.constants.int_norm_M) * float(x @ x)
                   - 2 * delta)
            assert lhs >= rhs - 1e-9

    def test_monotone_along_flow(self, std_kernels):
        P = toy_2d()
        A2 = exp_kernel(1.0, dim=2)
        pair = KernelPair(A2, exp_kernel(2.0, dim=2, s_max=A2.s_max))
        E0, eps0_of = lyapunov_budget(P, pair)
        E = E0 / 2.0
        eps = 0.99 * eps0_of(E)
        rng = np.random.default_rng(7)
        grid = np.linspace(0.0, 8.0, 161)
        for i in range(6):
            x0 = rng.uniform(-1.8, 1.8, 2)
            eta0 = None if i % 2 == 0 else bump_history(grid, rng.standard_normal(2), 0.3)
            traj = integrate(HistoryState(x0, eta0), P, pair, eps, 3.0, 1e-3)
            L = traj.lyapunov_series(E)
            assert float(np.max(np.diff(L))) <= 1e-6

    def test_dissipation_surplus_refines(self, std_kernels):
        # per-step decrease of L should cover (|x'|^2 + E C_A/4 ||eta||^2) dt
        # up to a violation that shrinks with dt
        P = toy_1d()
        E0, eps0_of = lyapunov_budget(P, std_kernels)
        E = E0 / 2.0
        eps = 0.5 * eps0_of(E)
        C_A = std_kernels.constants.C_A

        def max_violation(dt):
            traj = integrate(HistoryState(np.array([0.4]), None), P,
                             std_kernels, eps, 2.0, dt)
            L = traj.lyapunov_series(E)
            nsq = traj.eta_norm_sq_series()
            dx = np.gradient(traj.x[:, 0], dt)
            surplus = (dx**2 + E * C_A / 4.0 * nsq) * dt
            return float(np.max(np.diff(L) + surplus[:-1]))

        v1 = max_violation(2e-3)
        v2 = max_violation(1e-3)
        assert v2 <= max(v1 / 1.5, 1e-10)


class TestEnergyResidual:
    def test_equilibrium_residuals_vanish(self, std_kernels):
        traj = integrate(HistoryState(np.array([1.0]), None), toy_1d(),
                         std_kernels, 0.0, 2.0, 0.01)
        r = energy_residual(traj, std_kernels)
        assert np.max(np.abs(r)) < 1e-10

    def test_residual_size_and_refinement(self, std_kernels):
        def max_res(dt):
            traj = integrate(HistoryState(np.array([0.5]), None), toy_1d(),
                             std_kernels, 0.0, 10.0, dt)
            return float(np.max(np.abs(energy_residual(traj, std_kernels))))

        r1 = max_res(1e-3)
        assert r1 <= 5e-3
        r2 = max_res(5e-4)
        assert r2 <= r1 / 1.8

    def test_exponential_decay_form(self, std_kernels):
        # ||eta^{t2}||^2 = e^{-C_A(t2-t1)}||eta^{t1}||^2
        #                 - 2 int_{t1}^{t2} e^{-C_A(t2-tau)} (int A eta, x') dtau
        # with equality for an exactly exponential weight kernel
        traj = integrate(HistoryState(np.array([0.5]), None), toy_1d(),
                         std_kernels, 0.01, 5.0, 1e-3)
        nsq, coup = energy_series(traj, std_kernels)
        C_A = std_kernels.constants.C_A
        dt = traj.dt
        k1, k2 = 1000, 4000
        taus = traj.times[k1:k2 + 1]
        weights = np.full(len(taus), dt)
        weights[0] = weights[-1] = dt / 2.0
        kern = np.exp(-C_A * (taus[-1] - taus))
        corr = -2.0 * float(np.sum(weights * kern * coup[k1:k2 + 1]))
        rhs = math.exp(-C_A * (taus[-1] - taus[0])) * nsq[k1] + corr
        assert nsq[k2] == pytest.approx(rhs, rel=1e-3, abs=1e-9)


class TestVariational:
    def test_zero_stays_zero(self, std_kernels):
        base = integrate(HistoryState(np.array([0.5]), None), toy_1d(),
                         std_kernels, 0.05, 2.0, 0.01)
        out = integrate_variational(base, VariationalState(np.array([0.0])), 0.05)
        assert np.max(np.abs(out.w)) == 0.0

    def test_linearization_at_sink(self, nomem_kernels):
        # Df(1) = -2: w(t) = e^{-2t}
        base = integrate(HistoryState(np.array([1.0]), None), toy_1d(),
                         nomem_kernels, 0.0, 5.0, 0.01)
        out = integrate_variational(base, VariationalState(np.array([1.0])), 0.0)
        t = np.arange(len(out)) * base.dt
        assert np.max(np.abs(out.w[:, 0] - np.exp(-2.0 * t))) < 1e-6

    def test_matches_finite_differences(self, std_kernels):
        eps = 0.02
        P = toy_1d()
        x0 = np.array([0.4])
        base = integrate(HistoryState(x0, None), P, std_kernels, eps, 2.0, 0.01)
        out = integrate_variational(base, VariationalState(np.array([1.0])), eps)
        errs = []
        for h in (1e-3, 1e-4):
            pert = integrate(HistoryState(x0 + h, None), P, std_kernels, eps, 2.0, 0.01)
            fd = (pert.x[-1, 0] - base.x[-1, 0]) / h
            errs.append(abs(fd - out.w[-1, 0]))
        assert errs[0] < 5e-3
        assert errs[1] < errs[0] / 5.0  # O(h) forward difference

    def test_theta_head_zero(self, std_kernels):
        base = integrate(HistoryState(np.array([0.4]), None), toy_1d(),
                         std_kernels, 0.05, 1.0, 0.01)
        out = integrate_variational(base, VariationalState(np.array([1.0])), 0.05)
        th = out.theta_at(len(out) - 1)
        assert np.all(th.values[0] == 0.0)


class TestDivergence:
    def test_identical_inputs(self, std_kernels):
        traj = integrate(HistoryState(np.array([0.5]), None), toy_1d(),
                         std_kernels, 0.01, 2.0, 0.01)
        C_pre, C_rate = two_solution_divergence(traj, traj, 0.01, 0.01)
        assert C_pre == 0.0 and C_rate == 0.0

    def test_envelope_dominates_and_rate_bounded(self, std_kernels):
        P = toy_1d()
        t1 = integrate(HistoryState(np.array([0.5]), None), P, std_kernels, 0.0, 10.0, 0.01)
        t2 = integrate(HistoryState(np.array([0.5 + 1e-6]), None), P, std_kernels,
                       0.0, 10.0, 0.01)
        C_pre, C_rate = two_solution_divergence(t1, t2, 0.0, 0.0)
        # growth rate cannot beat max Df on [0.5, 1] (= 1 - 3*0.25)
        assert C_rate <= 0.25 + 0.1
        D = t1.timeline - t2.timeline
        from morseflow.dynamics import _eta_norm_sq_series

        gap = (np.linalg.norm(D[t1.n_pre:], axis=1)
               + np.sqrt(_eta_norm_sq_series(D, t1.n_pre, t1.dt, std_kernels.A)))
        D0 = gap[0]
        envelope = C_pre * D0 * np.exp(C_rate * t1.times)
        assert np.all(gap <= envelope * (1.0 + 1e-9))

    def test_doubling_perturbation_doubles_gap(self, std_kernels):
        P = toy_1d()
        base = integrate(HistoryState(np.array([0.5]), None), P, std_kernels, 0.0, 1.0, 0.01)

        def gap_at_one(delta):
            other = integrate(HistoryState(np.array([0.5 + delta]), None), P,
                              std_kernels, 0.0, 1.0, 0.01)
            return abs(base.x[-1, 0] - other.x[-1, 0])

        g1 = gap_at_one(1e-6)
        g2 = gap_at_one(2e-6)
        assert abs(g2 / g1 - 2.0) < 0.2

    def test_linear_in_eps(self, std_kernels):
        P = toy_1d()
        x0 = HistoryState(np.array([0.5]), None)
        t0 = integrate(x0, P, std_kernels, 0.0, 1.0, 0.01)
        ta = integrate(x0, P, std_kernels, 1e-3, 1.0, 0.01)
        tb = integrate(x0, P, std_kernels, 2e-3, 1.0, 0.01)
        d1 = abs(t0.x[-1, 0] - ta.x[-1, 0])
        d2 = abs(t0.x[-1, 0] - tb.x[-1, 0])
        assert d2 / d1 == pytest.approx(2.0, rel=0.5)
