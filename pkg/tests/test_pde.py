"""Tests for the discrete operators and theta-scheme solvers."""

from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp

from kdvb_control.grid import (
    discrete_norms,
    forward_diff,
    inner_product,
    make_field,
    make_grid,
    make_time_grid,
    norm_L2,
)
from kdvb_control.pde import (
    SolverError,
    assemble_operators,
    burgers_matrix,
    dissipativity_pairing,
    energy_step_residuals,
    make_coefficients,
    skew_transport,
    solve_adjoint,
    solve_linear_constant,
    solve_linearized,
    solve_nonlinear,
    transport_matrix,
    uncontrolled_trajectory,
)

NU0 = 0.1


@pytest.fixture(scope="module")
def setup64():
    g = make_grid(1.0, 64)
    tg = make_time_grid(1.0, 128)
    return g, tg, assemble_operators(g)


class TestOperators:
    def test_d1_skew_exact(self, setup64):
        _, _, ops = setup64
        assert abs(ops.D1 + ops.D1.T).max() == 0.0

    def test_d2_symmetric_exact(self, setup64):
        _, _, ops = setup64
        assert abs(ops.D2 - ops.D2.T).max() == 0.0

    def test_d3_skew_exact(self, setup64):
        _, _, ops = setup64
        assert abs(ops.D3 + ops.D3.T).max() == 0.0

    def test_d3_wrap_entries(self, setup64):
        g, _, ops = setup64
        n = g.N - 1
        assert ops.D3[0, n - 1] == -1.0 / (2.0 * g.h**3)
        assert ops.D3[n - 1, 0] == 1.0 / (2.0 * g.h**3)

    def test_d2_negative_definite(self, setup64):
        g, _, ops = setup64
        rng = np.random.default_rng(3)
        for _ in range(5):
            u = rng.standard_normal(g.N - 1)
            assert u @ (ops.D2 @ u) < 0.0

    def test_d2_consistency_taylor_bound(self):
        g = make_grid(1.0, 256)
        ops = assemble_operators(g)
        u = np.sin(2.0 * np.pi * g.x)
        err = np.max(np.abs(ops.D2 @ u + 4.0 * np.pi**2 * u))
        bound = 4.0 * np.pi**4 * g.h**2 / 3.0
        assert err <= 1.05 * bound
        assert err <= 1e-2

    def test_d1_d3_consistency(self):
        g = make_grid(1.0, 256)
        ops = assemble_operators(g)
        k = 2.0 * np.pi
        u = np.sin(k * g.x)
        err1 = np.max(np.abs(ops.D1 @ u - k * np.cos(k * g.x)))
        err3 = np.max(np.abs(ops.D3 @ u + k**3 * np.cos(k * g.x)))
        assert err1 / k <= 1e-3
        assert err3 / k**3 <= 1e-3

    def test_sbp_identity(self, setup64):
        g, _, ops = setup64
        rng = np.random.default_rng(5)
        u = rng.standard_normal(g.N - 1)
        lhs = g.h * (u @ (ops.D2 @ u))
        grad = forward_diff(g, u)
        rhs = -g.h * float(grad @ grad)
        assert lhs == pytest.approx(rhs, rel=1e-13)

    def test_dissipativity_pairing(self, setup64):
        g, _, ops = setup64
        rng = np.random.default_rng(7)
        u = rng.standard_normal(g.N - 1)
        val = dissipativity_pairing(ops, u, nu0=2.5)
        grad = forward_diff(g, u)
        assert val <= 0.0
        assert val == pytest.approx(-2.5 * g.h * float(grad @ grad), rel=1e-12)
        assert dissipativity_pairing(ops, np.zeros(g.N - 1)) == 0.0
        with pytest.raises(ValueError):
            dissipativity_pairing(ops, np.zeros(5))

    def test_quadrature_vector(self, setup64):
        g, _, ops = setup64
        np.testing.assert_array_equal(ops.quad, np.full(g.N - 1, g.h))


class TestConvectionSplits:
    def test_skew_transport_exactly_skew(self, setup64):
        g, _, ops = setup64
        rng = np.random.default_rng(11)
        for _ in range(3):
            S = skew_transport(ops, rng.standard_normal(g.N - 1))
            assert abs(S + S.T).max() == 0.0

    def test_burgers_exactly_skew(self, setup64):
        g, _, ops = setup64
        rng = np.random.default_rng(13)
        C = burgers_matrix(ops, rng.standard_normal(g.N - 1))
        assert abs(C + C.T).max() == 0.0

    def test_burgers_energy_neutral(self, setup64):
        g, _, ops = setup64
        rng = np.random.default_rng(17)
        for _ in range(5):
            w = rng.standard_normal(g.N - 1)
            u = rng.standard_normal(g.N - 1)
            pair = inner_product(g, burgers_matrix(ops, w) @ u, u)
            scale = norm_L2(g, burgers_matrix(ops, w) @ u) * norm_L2(g, u)
            assert abs(pair) <= 1e-12 * max(scale, 1.0)

    def test_transport_transpose_identity(self, setup64):
        g, _, ops = setup64
        rng = np.random.default_rng(19)
        w = rng.standard_normal(g.N - 1)
        B = transport_matrix(ops, w)
        expect = -skew_transport(ops, w) + sp.diags(0.5 * (ops.D1 @ w))
        assert abs(B.T - expect).max() == 0.0

    def test_transport_consistency(self):
        g = make_grid(1.0, 512)
        ops = assemble_operators(g)
        k1, k2 = 2.0 * np.pi, 4.0 * np.pi
        w = np.sin(k1 * g.x)
        u = np.sin(k2 * g.x)
        exact = k1 * np.cos(k1 * g.x) * u + k2 * w * np.cos(k2 * g.x)
        err = np.max(np.abs(transport_matrix(ops, w) @ u - exact))
        assert err <= 1e-2

    def test_burgers_consistency_with_self(self):
        g = make_grid(1.0, 512)
        ops = assemble_operators(g)
        u = np.sin(2.0 * np.pi * g.x)
        exact = np.pi * np.sin(4.0 * np.pi * g.x)
        err = np.max(np.abs(burgers_matrix(ops, u) @ u - exact))
        assert err <= 1e-2


class TestLinearSolvers:
    def test_zero_data_zero_field(self, setup64):
        g, tg, ops = setup64
        sol = solve_linear_constant(ops, NU0, None, np.zeros(g.N - 1), tg)
        assert np.all(sol.values == 0.0)

    def test_energy_identity(self, setup64):
        g, tg, ops = setup64
        rng = np.random.default_rng(23)
        for _ in range(10):
            y0 = rng.standard_normal(g.N - 1)
            y0 /= norm_L2(g, y0)
            sol = solve_linear_constant(ops, NU0, None, y0, tg)
            res = energy_step_residuals(ops, sol, NU0)
            assert np.max(np.abs(res)) <= 1e-12

    def test_monotone_decay(self, setup64):
        g, tg, ops = setup64
        rng = np.random.default_rng(29)
        y0 = rng.standard_normal(g.N - 1)
        sol = solve_linear_constant(ops, NU0, None, y0, tg)
        norms = np.array([norm_L2(g, v) for v in sol.values])
        assert np.all(np.diff(norms) <= 1e-14)

    def test_implicit_euler_also_decays(self, setup64):
        g, tg, ops = setup64
        rng = np.random.default_rng(31)
        y0 = rng.standard_normal(g.N - 1)
        sol = solve_linear_constant(ops, NU0, None, y0, tg, theta=1.0)
        norms = np.array([norm_L2(g, v) for v in sol.values])
        assert np.all(np.diff(norms) <= 1e-14)

    def test_bitwise_reduction(self, setup64):
        g, tg, ops = setup64
        rng = np.random.default_rng(37)
        y0 = rng.standard_normal(g.N - 1)
        f = make_field(g, tg, rng.standard_normal((tg.M + 1, g.N - 1)))
        a = solve_linear_constant(ops, NU0, f, y0, tg)
        coeffs = make_coefficients(tg, NU0, np.zeros(tg.M + 1))
        b = solve_linearized(ops, coeffs, f, y0, tg)
        np.testing.assert_array_equal(a.values, b.values)

    def test_source_step_form_matches_level_form(self, setup64):
        g, tg, ops = setup64
        rng = np.random.default_rng(41)
        y0 = rng.standard_normal(g.N - 1)
        f_levels = rng.standard_normal((tg.M + 1, g.N - 1))
        a = solve_linear_constant(ops, NU0, make_field(g, tg, f_levels), y0, tg)
        steps = 0.5 * (f_levels[:-1] + f_levels[1:])
        b = solve_linear_constant(ops, NU0, steps, y0, tg)
        np.testing.assert_array_equal(a.values, b.values)

    def test_mms_order(self):
        errs = []
        for N, M in ((32, 64), (64, 128)):
            g = make_grid(1.0, N)
            tg = make_time_grid(1.0, M)
            ops = assemble_operators(g)
            k = 2.0 * np.pi
            t, x = tg.t[:, None], g.x[None, :]
            ystar = np.exp(-t) * np.sin(k * x)
            f = np.exp(-t) * (
                -np.sin(k * x) - k**3 * np.cos(k * x) + NU0 * k**2 * np.sin(k * x)
            )
            sol = solve_linear_constant(ops, NU0, make_field(g, tg, f), ystar[0], tg)
            errs.append(
                discrete_norms(make_field(g, tg, sol.values - ystar), upto_order=0).L2_Q
            )
        assert np.log2(errs[0] / errs[1]) >= 1.8

    def test_invalid_inputs(self, setup64):
        g, tg, ops = setup64
        with pytest.raises(ValueError):
            solve_linear_constant(ops, NU0, None, np.zeros(7), tg)
        with pytest.raises(ValueError):
            solve_linear_constant(ops, NU0, None, np.zeros(g.N - 1), tg, theta=1.5)
        with pytest.raises(ValueError):
            make_coefficients(tg, -1.0)
        with pytest.raises(ValueError):
            make_coefficients(tg, NU0, -np.ones(tg.M + 1))


def _duality_residual(g, tg, ops, coeffs, coeffs_adj, rng):
    n = g.N - 1
    y0 = rng.standard_normal(n)
    f_levels = rng.standard_normal((tg.M + 1, n))
    g_levels = rng.standard_normal((tg.M + 1, n))
    phiT = rng.standard_normal(n)
    y = solve_linearized(ops, coeffs, make_field(g, tg, f_levels), y0, tg)
    adj = solve_adjoint(ops, coeffs_adj, g_levels, phiT, tg)
    dt = tg.dt
    lhs = dt * sum(
        inner_product(g, y.values[m], g_levels[m]) for m in range(1, tg.M)
    ) + inner_product(g, y.values[-1], phiT)
    f_steps = 0.5 * (f_levels[:-1] + f_levels[1:])
    rhs = inner_product(g, y0, adj.phi0) + dt * sum(
        inner_product(g, f_steps[m], adj.steps[m]) for m in range(tg.M)
    )
    return abs(lhs - rhs) / (abs(lhs) + abs(rhs))


@pytest.fixture(scope="module")
def varying_coeffs(setup64):
    g, tg, _ = setup64
    rng = np.random.default_rng(101)
    ybar_vals = 0.3 * np.exp(-tg.t)[:, None] * np.sin(2.0 * np.pi * g.x)[None, :]
    ybar_vals += 0.1 * np.cos(tg.t)[:, None] * np.sin(4.0 * np.pi * g.x)[None, :]
    nu_tilde = 0.05 * (1.0 + np.sin(3.0 * tg.t))
    return make_coefficients(tg, NU0, nu_tilde, make_field(g, tg, ybar_vals))


class TestAdjoint:
    def test_zero_data_zero_adjoint(self, setup64, varying_coeffs):
        g, tg, ops = setup64
        adj = solve_adjoint(ops, varying_coeffs, None, np.zeros(g.N - 1), tg)
        assert np.all(adj.field.values == 0.0)
        assert np.all(adj.steps == 0.0)

    def test_levels_anchored(self, setup64, varying_coeffs):
        g, tg, ops = setup64
        rng = np.random.default_rng(43)
        phiT = rng.standard_normal(g.N - 1)
        adj = solve_adjoint(ops, varying_coeffs, None, phiT, tg)
        np.testing.assert_array_equal(adj.field.values[-1], phiT)
        np.testing.assert_array_equal(adj.field.values[0], adj.phi0)
        assert adj.steps.shape == (tg.M, g.N - 1)

    def test_duality_identity(self, setup64, varying_coeffs):
        g, tg, ops = setup64
        rng = np.random.default_rng(47)
        for _ in range(5):
            resid = _duality_residual(g, tg, ops, varying_coeffs, varying_coeffs, rng)
            assert resid <= 1e-10

    def test_duality_constant_coefficients(self, setup64):
        g, tg, ops = setup64
        coeffs = make_coefficients(tg, NU0)
        rng = np.random.default_rng(53)
        assert _duality_residual(g, tg, ops, coeffs, coeffs, rng) <= 1e-10

    def test_duality_negative_control(self, setup64, varying_coeffs):
        g, tg, ops = setup64
        bad = make_coefficients(
            tg, NU0 + 1e-3, varying_coeffs.nu_tilde, varying_coeffs.ybar
        )
        rng = np.random.default_rng(59)
        assert _duality_residual(g, tg, ops, varying_coeffs, bad, rng) > 1e-6


class TestNonlinear:
    def test_zero_data_one_iteration(self, setup64):
        g, tg, ops = setup64
        coeffs = make_coefficients(tg, NU0)
        sol = solve_nonlinear(ops, coeffs, None, np.zeros(g.N - 1), tg)
        assert sol.converged and sol.iterations == 1
        assert np.all(sol.field.values == 0.0)

    def test_modes_agree_small_data(self, setup64):
        g, tg, ops = setup64
        coeffs = make_coefficients(tg, NU0)
        y0 = 1e-3 * np.sin(2.0 * np.pi * g.x)
        a = solve_nonlinear(ops, coeffs, None, y0, tg, mode="picard")
        b = solve_nonlinear(ops, coeffs, None, y0, tg, mode="semi_implicit")
        diff = discrete_norms(
            make_field(g, tg, a.field.values - b.field.values), upto_order=0
        )
        assert diff.L2_Q <= 1e-6

    def test_nonlinear_close_to_linear_for_tiny_data(self, setup64):
        g, tg, ops = setup64
        coeffs = make_coefficients(tg, NU0)
        y0 = 1e-6 * np.sin(2.0 * np.pi * g.x)
        nl = solve_nonlinear(ops, coeffs, None, y0, tg)
        li = solve_linear_constant(ops, NU0, None, y0, tg)
        diff = discrete_norms(
            make_field(g, tg, nl.field.values - li.values), upto_order=0
        )
        # quadratic smallness: difference O(||y0||^2)
        assert diff.L2_Q <= 1e-10

    def test_no_convergence_raises(self, setup64):
        g, _, ops = setup64
        tg = make_time_grid(1.0, 16)
        y0 = 1e3 * np.sin(2.0 * np.pi * g.x)
        coeffs = make_coefficients(tg, 1e-2)
        with pytest.raises(SolverError):
            solve_nonlinear(ops, coeffs, None, y0, tg, mode="picard", maxit=5)

    def test_unknown_mode(self, setup64):
        g, tg, ops = setup64
        coeffs = make_coefficients(tg, NU0)
        with pytest.raises(ValueError):
            solve_nonlinear(ops, coeffs, None, np.zeros(g.N - 1), tg, mode="exact")

    def test_trajectory_monotone_energy(self, setup64):
        g, tg, ops = setup64
        coeffs = make_coefficients(tg, NU0)
        sol = uncontrolled_trajectory(ops, coeffs, 0.01 * np.sin(2.0 * np.pi * g.x), tg)
        norms = np.array([norm_L2(g, v) for v in sol.field.values])
        assert np.all(np.diff(norms) <= 1e-15)
        res = energy_step_residuals(ops, sol.field, NU0)
        assert np.max(np.abs(res)) <= 1e-12

    def test_trajectory_rejects_frozen_transport(self, setup64, varying_coeffs):
        g, tg, ops = setup64
        with pytest.raises(ValueError):
            uncontrolled_trajectory(ops, varying_coeffs, np.zeros(g.N - 1), tg)

    def test_picard_iteration_log(self, setup64):
        g, tg, ops = setup64
        coeffs = make_coefficients(tg, NU0)
        y0 = 0.05 * np.sin(2.0 * np.pi * g.x)
        sol = solve_nonlinear(ops, coeffs, None, y0, tg, mode="picard")
        assert sol.mode == "picard"
        assert sol.converged
        assert len(sol.residuals) == sol.iterations
        assert sol.residuals[-1] <= 1e-10

    def test_mms_nonlinear_order(self):
        errs = []
        for N, M in ((32, 64), (64, 128)):
            g = make_grid(1.0, N)
            tg = make_time_grid(1.0, M)
            ops = assemble_operators(g)
            k = 2.0 * np.pi
            t, x = tg.t[:, None], g.x[None, :]
            ystar = np.exp(-t) * np.sin(k * x)
            f = np.exp(-t) * (
                -np.sin(k * x) - k**3 * np.cos(k * x) + NU0 * k**2 * np.sin(k * x)
            )
            f = f + 0.5 * k * np.exp(-2.0 * t) * np.sin(2.0 * k * x)
            coeffs = make_coefficients(tg, NU0)
            sol = solve_nonlinear(ops, coeffs, make_field(g, tg, f), ystar[0], tg)
            errs.append(
                discrete_norms(
                    make_field(g, tg, sol.field.values - ystar), upto_order=0
                ).L2_Q
            )
        assert np.log2(errs[0] / errs[1]) >= 1.8
