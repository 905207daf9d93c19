"""Tests for the per-mode fractional relaxation solvers."""
from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad

from backfrac.errors import (
    DegenerateModeError,
    MeshMismatchError,
    NonUniformGridError,
    ParameterError,
)
from backfrac.modal import (
    ModalTrajectory,
    TimeGrid,
    backward_mode,
    caputo_l1,
    convolution_profile,
    convolve_kernel,
    forward_mode,
    residual_mode,
)
from backfrac.modal import _moment_tables
from backfrac.special import certify_ml_bounds, gamma, kernel_antiderivative, mlf, mlf_grid


def jittered_grid(T: float, K: int, seed: int = 7) -> TimeGrid:
    """Non-uniform grid: uniform nodes with interior jitter."""
    rng = np.random.default_rng(seed)
    nodes = np.linspace(0.0, T, K + 1)
    h = T / K
    nodes[1:-1] += rng.uniform(-0.3, 0.3, K - 1) * h
    return TimeGrid(np.sort(nodes))


class TestTimeGrid:
    def test_uniform(self):
        g = TimeGrid.uniform(2.0, 8)
        assert g.horizon == 2.0
        assert g.n_steps == 8
        assert g.is_uniform
        assert g.kind == "uniform"
        assert_allclose(g.max_spacing, 0.25)

    def test_graded(self):
        g = TimeGrid.graded(1.0, 10, 2.0)
        assert g.kind == "graded"
        assert g.grade == 2.0
        assert not g.is_uniform
        assert_allclose(g.nodes, (np.arange(11) / 10.0) ** 2)

    def test_default_step_count(self):
        assert TimeGrid.uniform(1.0).n_steps == 256

    def test_validation(self):
        with pytest.raises(ParameterError):
            TimeGrid(np.array([0.1, 0.5, 1.0]))
        with pytest.raises(ParameterError):
            TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
        with pytest.raises(ParameterError):
            TimeGrid(np.array([0.0]))
        with pytest.raises(ParameterError):
            TimeGrid.graded(1.0, 10, 0.0)


class TestMomentTables:
    """The closed-form kernel moments against independent quadrature."""

    @pytest.mark.parametrize("alpha,m", [(0.3, 2.0), (0.5, 1.0), (0.8, 5.0)])
    def test_zeroth_moment_is_kernel_antiderivative(self, alpha, m):
        x = np.array([0.0, 0.05, 0.3, 1.0, 4.0])
        phi, _ = _moment_tables(alpha, m, x)
        expect = np.array([kernel_antiderivative(alpha, m, 0.0, xv) for xv in x])
        assert_allclose(phi, expect, rtol=1e-11, atol=1e-14)

    @pytest.mark.parametrize("alpha,m", [(0.4, 2.0), (0.6, 1.0), (0.9, 3.0)])
    def test_first_moment_vs_quadrature(self, alpha, m):
        for x in (0.2, 1.0, 3.0):
            _, psi = _moment_tables(alpha, m, np.array([x]))
            val, err = quad(
                lambda w: w ** alpha * mlf(alpha, alpha, -m * w ** alpha), 0.0, x
            )
            assert abs(psi[0] - val) <= 50.0 * err + 1e-10 * abs(val)

    def test_alpha_one_closed_forms(self):
        m, x = 2.0, np.array([0.3, 1.5, 4.0])
        phi, psi = _moment_tables(1.0, m, x)
        assert_allclose(phi, (1.0 - np.exp(-m * x)) / m, rtol=1e-12)
        assert_allclose(
            psi, (1.0 - (1.0 + m * x) * np.exp(-m * x)) / m ** 2, rtol=1e-11
        )


class TestConvolution:
    def test_zero_forcing(self):
        g = TimeGrid.uniform(1.0, 16)
        assert np.all(convolution_profile(np.zeros(17), 0.5, 2.0, g) == 0.0)

    @pytest.mark.parametrize("alpha,m", [(0.3, 1.0), (0.5, 4.0), (0.9, 0.5)])
    def test_constant_forcing_exact(self, alpha, m):
        # F = c: convolution equals c (1 - E_{alpha,1}(-m t^alpha)) / m exactly
        g = TimeGrid.uniform(2.0, 32)
        c = 3.0
        conv = convolution_profile(np.full(33, c), alpha, m, g)
        expect = c * (1.0 - mlf_grid(alpha, 1.0, -m * g.nodes ** alpha)) / m
        assert_allclose(conv, expect, rtol=1e-11, atol=1e-13)

    def test_classical_exponential_case(self):
        # alpha = 1, m = 1, F = 1: 1 - e^{-t}
        g = TimeGrid.uniform(3.0, 64)
        conv = convolution_profile(np.ones(65), 1.0, 1.0, g)
        assert_allclose(conv, 1.0 - np.exp(-g.nodes), rtol=1e-11, atol=1e-13)

    def test_single_node_matches_profile(self):
        g = TimeGrid.uniform(1.0, 20)
        F = np.sin(3.0 * g.nodes) + 2.0
        prof = convolution_profile(F, 0.6, 2.0, g)
        for n in (1, 7, 20):
            assert_allclose(convolve_kernel(F, 0.6, 2.0, g, n), prof[n], rtol=1e-13)

    def test_nonuniform_path_matches_single_node(self):
        g = jittered_grid(1.0, 24)
        F = np.cos(2.0 * g.nodes) + 1.5
        prof = convolution_profile(F, 0.5, 1.5, g)
        single = np.array(
            [convolve_kernel(F, 0.5, 1.5, g, n) for n in range(1, 25)]
        )
        assert_allclose(prof[1:], single, rtol=1e-12, atol=1e-15)

    def test_nonuniform_path_vs_quadrature(self):
        alpha, m = 0.5, 1.5
        g = jittered_grid(1.0, 200)
        F = lambda tau: np.cos(2.0 * tau) + 1.5
        prof = convolution_profile(F(g.nodes), alpha, m, g)
        t = g.horizon
        val, err = quad(
            lambda w: F(t - w) * w ** (alpha - 1.0) * mlf(alpha, alpha, -m * w ** alpha),
            0.0,
            t,
            limit=200,
        )
        assert abs(prof[-1] - val) <= 3e-5

    def test_second_order_convergence(self):
        alpha, m, T = 0.6, 2.0, 1.0
        F = lambda tau: np.sin(3.0 * tau) + 2.0
        ref_grid = TimeGrid.uniform(T, 4096)
        ref = convolution_profile(F(ref_grid.nodes), alpha, m, ref_grid)[-1]
        errs = []
        for K in (64, 128, 256):
            g = TimeGrid.uniform(T, K)
            errs.append(abs(convolution_profile(F(g.nodes), alpha, m, g)[-1] - ref))
        assert 3.3 <= errs[0] / errs[1] <= 4.7
        assert 3.3 <= errs[1] / errs[2] <= 4.7

    def test_parameter_guards(self):
        g = TimeGrid.uniform(1.0, 4)
        with pytest.raises(ParameterError):
            convolution_profile(np.zeros(5), 0.5, 0.0, g)
        with pytest.raises(ParameterError):
            convolution_profile(np.zeros(5), 1.5, 1.0, g)
        with pytest.raises(MeshMismatchError):
            convolution_profile(np.zeros(4), 0.5, 1.0, g)
        with pytest.raises(ParameterError):
            convolve_kernel(np.zeros(5), 0.5, 1.0, g, 0)


class TestForwardMode:
    def test_homogeneous_is_ml_decay(self):
        g = TimeGrid.uniform(2.0, 40)
        traj = forward_mode(3.0, 0.5, 1.7, np.zeros(41), g)
        expect = 1.7 * mlf_grid(0.5, 1.0, -3.0 * g.nodes ** 0.5)
        assert_allclose(traj.values, expect, rtol=1e-12)

    def test_classical_limit(self):
        g = TimeGrid.uniform(1.0, 32)
        traj = forward_mode(2.0, 1.0, 0.9, np.zeros(33), g)
        assert_allclose(traj.values, 0.9 * np.exp(-2.0 * g.nodes), rtol=1e-11)

    def test_initial_value_exact(self):
        g = TimeGrid.uniform(1.0, 8)
        F = np.sin(g.nodes)
        traj = forward_mode(1.0, 0.7, 2.5, F, g)
        assert traj.values[0] == 2.5

    def test_steady_state_consistency(self):
        # u0 = 0, F = c: u(T) -> c/m; algebraic ML tails make the approach
        # slow, the T = 50 gap for alpha = 0.9 is ~3.3e-3
        g = TimeGrid.uniform(50.0, 512)
        traj = forward_mode(1.0, 0.9, 0.0, np.ones(513), g)
        assert abs(traj.values[-1] - 1.0) < 5e-3

    def test_linearity(self):
        g = TimeGrid.uniform(1.0, 24)
        rng = np.random.default_rng(11)
        F1, F2 = rng.normal(size=25), rng.normal(size=25)
        a1, a2 = 0.7, -1.2
        lhs = forward_mode(2.0, 0.5, a1 * 1.1 + a2 * 0.4, a1 * F1 + a2 * F2, g).values
        rhs = (
            a1 * forward_mode(2.0, 0.5, 1.1, F1, g).values
            + a2 * forward_mode(2.0, 0.5, 0.4, F2, g).values
        )
        assert_allclose(lhs, rhs, atol=1e-10)

    def test_positivity(self):
        g = TimeGrid.uniform(3.0, 50)
        rng = np.random.default_rng(2)
        F = np.abs(rng.normal(size=51))
        traj = forward_mode(1.5, 0.4, 0.8, F, g)
        assert np.all(traj.values > 0.0)


class TestBackwardMode:
    def test_terminal_value_exact(self):
        g = TimeGrid.uniform(1.0, 30)
        rng = np.random.default_rng(4)
        F = rng.normal(size=31)
        traj = backward_mode(2.0, 0.6, 1.234, F, g)
        assert_allclose(traj.values[-1], 1.234, rtol=1e-12)
        assert traj.t0_amplified

    def test_amplification_reported(self):
        g = TimeGrid.uniform(1.0, 16)
        m, alpha = 100.0, 0.5
        traj = backward_mode(m, alpha, 1.0, np.zeros(17), g)
        e_T = mlf(alpha, 1.0, -m)
        assert_allclose(traj.amplification, 1.0 / e_T, rtol=1e-11)
        assert_allclose(traj.values[0], 1.0 / e_T, rtol=1e-11)

    def test_amplification_lower_bound(self):
        # 1/E_{alpha,1}(-m T^alpha) >= (1 + m T^alpha) / c_hi
        alpha, T = 0.5, 1.0
        bounds = certify_ml_bounds(alpha)
        g = TimeGrid.uniform(T, 8)
        for m in (1.0, 10.0, 1000.0):
            traj = backward_mode(m, alpha, 1.0, np.zeros(9), g)
            assert traj.amplification >= (1.0 + m * T ** alpha) / bounds.c_hi

    def test_round_trip_homogeneous(self):
        g = TimeGrid.uniform(1.0, 64)
        fwd = forward_mode(4.0, 0.5, 1.3, np.zeros(65), g)
        back = backward_mode(4.0, 0.5, fwd.values[-1], np.zeros(65), g)
        assert np.max(np.abs(back.values - fwd.values)) <= 1e-9

    def test_round_trip_smooth_forcing(self):
        g = TimeGrid.uniform(1.0, 64)
        F = np.sin(2.0 * g.nodes) + 1.0
        fwd = forward_mode(4.0, 0.5, 1.3, F, g)
        back = backward_mode(4.0, 0.5, fwd.values[-1], F, g)
        assert np.max(np.abs(back.values - fwd.values)) <= 1e-9

    def test_degenerate_mode_rejected(self):
        # only alpha = 1 decays fast enough to underflow at desk scale
        g = TimeGrid.uniform(1.0, 8)
        with pytest.raises(DegenerateModeError) as exc:
            backward_mode(700.0, 1.0, 1.0, np.zeros(9), g, mode_index=3)
        assert exc.value.mode_index == 3

    def test_linearity(self):
        g = TimeGrid.uniform(1.0, 20)
        rng = np.random.default_rng(8)
        F1, F2 = rng.normal(size=21), rng.normal(size=21)
        lhs = backward_mode(3.0, 0.7, 2.0 * 0.5 - 0.3 * 1.1, 2.0 * F1 - 0.3 * F2, g).values
        rhs = (
            2.0 * backward_mode(3.0, 0.7, 0.5, F1, g).values
            - 0.3 * backward_mode(3.0, 0.7, 1.1, F2, g).values
        )
        assert_allclose(lhs, rhs, atol=1e-10)


class TestCaputoL1:
    def test_constant_is_zero(self):
        g = TimeGrid.uniform(1.0, 32)
        out = caputo_l1(np.full(33, 4.2), 0.5, g)
        assert np.all(out == 0.0)

    def test_exact_on_linear(self):
        # L1 reproduces the Caputo derivative of t exactly: t^{1-a}/Gamma(2-a)
        g = TimeGrid.uniform(2.0, 64)
        for alpha in (0.3, 0.5, 0.9):
            out = caputo_l1(g.nodes.copy(), alpha, g)
            expect = g.nodes ** (1.0 - alpha) / gamma(2.0 - alpha)
            assert_allclose(out[1:], expect[1:], rtol=1e-11)
        assert out[0] == 0.0

    def test_power_alpha_gives_constant(self):
        alpha = 0.5
        g = TimeGrid.uniform(1.0, 2048)
        out = caputo_l1(g.nodes ** alpha, alpha, g)
        assert abs(out[-1] - gamma(1.0 + alpha)) < 0.02 * gamma(1.0 + alpha)

    def test_order_on_smooth_function(self):
        # two-grid order on u = t^2 within [1.8 - alpha, 2.2 - alpha]
        for alpha in (0.3, 0.6, 0.9):
            errs = []
            for K in (128, 256):
                g = TimeGrid.uniform(1.0, K)
                exact = 2.0 * g.nodes ** (2.0 - alpha) / gamma(3.0 - alpha)
                got = caputo_l1(g.nodes ** 2, alpha, g)
                errs.append(np.max(np.abs(got[1:] - exact[1:])))
            order = math.log2(errs[0] / errs[1])
            assert 1.8 - alpha <= order <= 2.2 - alpha

    def test_alpha_one_is_backward_difference(self):
        g = TimeGrid.uniform(1.0, 16)
        u = g.nodes ** 2
        out = caputo_l1(u, 1.0, g)
        assert_allclose(out[1:], np.diff(u) / (1.0 / 16.0), rtol=1e-12)

    def test_rejects_nonuniform(self):
        g = TimeGrid.graded(1.0, 16, 2.0)
        with pytest.raises(NonUniformGridError):
            caputo_l1(np.zeros(17), 0.5, g)


class TestResidual:
    def test_stationary_balance(self):
        # u = c/m with F = c solves the equation exactly
        g = TimeGrid.uniform(1.0, 64)
        m, c = 3.0, 2.0
        res = residual_mode(np.full(65, c / m), np.full(65, c), m, 0.5, g)
        assert res <= 1e-8

    @pytest.mark.parametrize("alpha", [0.4, 0.7])
    def test_forward_two_grid_order(self, alpha):
        # windowed residual decays at O(h^{2-alpha})
        m, T = 2.0, 1.0
        res = []
        for K in (256, 512):
            g = TimeGrid.uniform(T, K)
            traj = forward_mode(m, alpha, 1.0, np.zeros(K + 1), g)
            res.append(
                residual_mode(traj, np.zeros(K + 1), m, alpha, g, start_index=K // 10)
            )
        order = math.log2(res[0] / res[1])
        assert abs(order - (2.0 - alpha)) <= 0.25

    def test_backward_residual_refines(self):
        alpha, m, T = 0.5, 4.0, 1.0
        res = []
        for K in (128, 256, 512):
            g = TimeGrid.uniform(T, K)
            traj = backward_mode(m, alpha, 1.0, np.zeros(K + 1), g)
            res.append(
                residual_mode(traj, np.zeros(K + 1), m, alpha, g, start_index=K // 10)
            )
        assert res[0] > res[1] > res[2]
        order = math.log2(res[1] / res[2])
        assert order >= 1.0 - alpha

    def test_trajectory_object_accepted(self):
        g = TimeGrid.uniform(1.0, 32)
        traj = forward_mode(1.0, 0.5, 1.0, np.zeros(33), g)
        r1 = residual_mode(traj, np.zeros(33), 1.0, 0.5, g)
        r2 = residual_mode(traj.values, np.zeros(33), 1.0, 0.5, g)
        assert r1 == r2


class TestTrajectoryType:
    def test_validation(self):
        g = TimeGrid.uniform(1.0, 4)
        with pytest.raises(MeshMismatchError):
            ModalTrajectory(grid=g, values=np.zeros(3), rate=1.0)
        bad = np.zeros(5)
        bad[2] = np.inf
        with pytest.raises(ParameterError):
            ModalTrajectory(grid=g, values=bad, rate=1.0)

    def test_t0_infinity_allowed_when_flagged(self):
        # the t = 0 entry may be non-finite (amplified limit), later nodes not
        g = TimeGrid.uniform(1.0, 4)
        vals = np.ones(5)
        vals[0] = np.inf
        traj = ModalTrajectory(grid=g, values=vals, rate=1.0, t0_amplified=True)
        assert math.isinf(traj.values[0])
