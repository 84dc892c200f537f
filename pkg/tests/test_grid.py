"""Grid, quadrature, norm, and serialization tests."""

from __future__ import annotations

import numpy as np
import pytest

from kdvb_control.grid import (
    Field,
    discrete_norms,
    forward_diff,
    hneg1_norm,
    make_field,
    make_grid,
    make_time_grid,
    norm_L2,
    quadrature_space,
    read_field_bin,
    read_field_csv,
    time_weights,
    write_field_bin,
    write_field_csv,
)


def test_make_grid_basic():
    g = make_grid(1.0, 10)
    assert g.h == pytest.approx(0.1)
    # node index 5 is interior index 4
    assert g.x[4] == pytest.approx(0.5)
    assert len(g.x) == 9
    assert g.x_full[0] == 0.0
    assert g.x_full[-1] == pytest.approx(1.0)


def test_make_grid_spacing():
    g = make_grid(2.0, 8)
    assert g.h == pytest.approx(0.25)
    assert g.h * g.N == pytest.approx(g.L, rel=1e-15)


def test_make_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        make_grid(1.0, 4)
    with pytest.raises(ValueError):
        make_grid(-1.0, 10)
    with pytest.raises(ValueError):
        make_grid(0.0, 10)


def test_make_time_grid_basic():
    tg = make_time_grid(1.0, 100)
    assert tg.dt == pytest.approx(0.01)
    tg2 = make_time_grid(0.5, 10)
    assert tg2.t[3] == pytest.approx(0.15)
    assert np.all(np.diff(tg2.t) > 0)
    assert tg2.t[0] == 0.0
    assert tg2.t[-1] == pytest.approx(0.5)


def test_make_time_grid_rejects_bad_input():
    with pytest.raises(ValueError):
        make_time_grid(-1.0, 10)
    with pytest.raises(ValueError):
        make_time_grid(1.0, 4)


def test_quadrature_ones():
    # trapezoid with implied zero endpoints: h * (N-1) interior ones
    g = make_grid(1.0, 10)
    val = quadrature_space(np.ones(9), g)
    assert val == pytest.approx(0.9, abs=1e-15)


def test_quadrature_zero():
    g = make_grid(1.0, 10)
    assert quadrature_space(np.zeros(9), g) == 0.0


def test_quadrature_sine_oracle():
    # integral of sin(pi x) over (0,1) is 2/pi
    g = make_grid(1.0, 256)
    val = quadrature_space(np.sin(np.pi * g.x), g)
    assert val == pytest.approx(2.0 / np.pi, abs=1e-3)


def test_quadrature_linear_monotone():
    g = make_grid(1.0, 32)
    rng = np.random.default_rng(7)
    for _ in range(20):
        u = rng.standard_normal(31)
        v = rng.standard_normal(31)
        a, b = rng.standard_normal(2)
        lin = quadrature_space(a * u + b * v, g)
        assert lin == pytest.approx(
            a * quadrature_space(u, g) + b * quadrature_space(v, g), abs=1e-12
        )
        lower = u - np.abs(v)
        assert quadrature_space(lower, g) <= quadrature_space(u, g) + 1e-15


def test_quadrature_shape_check():
    g = make_grid(1.0, 10)
    with pytest.raises(ValueError):
        quadrature_space(np.ones(5), g)


def _field(grid, tgrid, fn):
    vals = np.array([fn(grid.x, t) for t in tgrid.t])
    return make_field(grid, tgrid, vals)


def test_norms_zero_field():
    g, tg = make_grid(1.0, 16), make_time_grid(1.0, 8)
    rep = discrete_norms(_field(g, tg, lambda x, t: 0.0 * x), include_hneg1=True)
    assert rep.sup_t_L2 == 0.0
    assert rep.L2_Q == 0.0
    assert rep.L2_H1 == 0.0
    assert rep.L2_H2 == 0.0
    assert rep.L2_Hneg1 == 0.0


def test_norms_time_constant_field():
    g, tg = make_grid(1.0, 32), make_time_grid(2.0, 16)
    rng = np.random.default_rng(3)
    u = rng.standard_normal(31)
    fld = make_field(g, tg, np.tile(u, (17, 1)))
    rep = discrete_norms(fld)
    assert rep.sup_t_L2 == pytest.approx(norm_L2(g, u), rel=1e-14)
    assert rep.L2_Q == pytest.approx(np.sqrt(tg.T) * norm_L2(g, u), rel=1e-12)


def test_norms_separable_oracle():
    # f = sin(pi x) * t on L=T=1: L2_Q^2 = (1/2)*(1/3)
    g, tg = make_grid(1.0, 128), make_time_grid(1.0, 128)
    fld = _field(g, tg, lambda x, t: np.sin(np.pi * x) * t)
    rep = discrete_norms(fld)
    assert rep.L2_Q == pytest.approx(np.sqrt(1.0 / 3.0) * np.sqrt(0.5), abs=1e-2)


def test_norms_homogeneity():
    g, tg = make_grid(1.0, 16), make_time_grid(1.0, 8)
    rng = np.random.default_rng(11)
    vals = rng.standard_normal((9, 15))
    fld = make_field(g, tg, vals)
    alpha = -2.75
    scaled = make_field(g, tg, alpha * vals)
    r1 = discrete_norms(fld, include_hneg1=True)
    r2 = discrete_norms(scaled, include_hneg1=True)
    for name in ("sup_t_L2", "L2_Q", "L2_H1", "L2_H2", "L2_Hneg1"):
        assert getattr(r2, name) == pytest.approx(
            abs(alpha) * getattr(r1, name), rel=1e-12
        )


def test_norms_holder_and_hneg1_bounds():
    g, tg = make_grid(1.0, 24), make_time_grid(1.5, 12)
    rng = np.random.default_rng(5)
    for _ in range(10):
        fld = make_field(g, tg, rng.standard_normal((13, 23)))
        rep = discrete_norms(fld, include_hneg1=True)
        assert rep.L2_Q**2 <= tg.T * rep.sup_t_L2**2 * (1 + 1e-12)
        # I - D2 dominates the identity, so the Riesz norm sits below L2
        assert rep.L2_Hneg1 <= rep.L2_Q * (1 + 1e-12)


def test_norms_upto_order_selector():
    g, tg = make_grid(1.0, 16), make_time_grid(1.0, 8)
    fld = make_field(g, tg, np.ones((9, 15)))
    r0 = discrete_norms(fld, upto_order=0)
    assert r0.L2_H1 is None and r0.L2_H2 is None
    r1 = discrete_norms(fld, upto_order=1)
    assert r1.L2_H1 is not None and r1.L2_H2 is None
    with pytest.raises(ValueError):
        discrete_norms(fld, upto_order=3)


def test_hneg1_single_mode():
    # sin(k x) is an eigenfunction of the discrete Riesz map, so the H^-1
    # norm is the L2 norm shrunk by sqrt(1 + lambda_k) with the discrete
    # symbol lambda_k = (2/h)^2 sin^2(k h / 2)
    g = make_grid(1.0, 128)
    k = 2 * np.pi
    u = np.sin(k * g.x)
    lam = (2.0 / g.h * np.sin(k * g.h / 2.0)) ** 2
    expect = norm_L2(g, u) / np.sqrt(1.0 + lam)
    assert hneg1_norm(g, u) == pytest.approx(expect, rel=1e-10)


def test_forward_diff_edge_count():
    g = make_grid(1.0, 16)
    d = forward_diff(g, np.arange(1.0, 16.0))
    assert d.shape == (16,)


def test_time_weights_sum():
    tg = make_time_grid(2.0, 10)
    assert np.sum(time_weights(tg)) == pytest.approx(2.0, rel=1e-14)


def test_field_validation():
    g, tg = make_grid(1.0, 16), make_time_grid(1.0, 8)
    with pytest.raises(ValueError):
        make_field(g, tg, np.ones((3, 3)))
    bad = np.ones((9, 15))
    bad[2, 2] = np.nan
    with pytest.raises(ValueError):
        make_field(g, tg, bad)


def test_field_boundary_reconstruction():
    g, tg = make_grid(1.0, 16), make_time_grid(1.0, 8)
    fld = make_field(g, tg, np.ones((9, 15)))
    full = fld.level_full(3)
    assert full[0] == 0.0 and full[-1] == 0.0
    assert np.all(full[1:-1] == 1.0)


def test_csv_round_trip(tmp_path):
    g, tg = make_grid(1.0, 12), make_time_grid(0.7, 9)
    rng = np.random.default_rng(19)
    fld = make_field(g, tg, rng.standard_normal((10, 11)))
    path = str(tmp_path / "f.csv")
    write_field_csv(fld, path)
    back = read_field_csv(path)
    assert np.array_equal(back.values, fld.values)
    assert back.grid.N == g.N and back.tgrid.M == tg.M
    assert back.grid.L == pytest.approx(g.L, rel=1e-14)
    assert back.tgrid.T == pytest.approx(tg.T, rel=1e-14)


def test_csv_header(tmp_path):
    g, tg = make_grid(1.0, 8), make_time_grid(1.0, 8)
    fld = make_field(g, tg, np.zeros((9, 7)))
    path = str(tmp_path / "f.csv")
    write_field_csv(fld, path)
    with open(path) as fh:
        assert fh.readline().strip() == "t,x,value"


def test_bin_round_trip_bitwise(tmp_path):
    g, tg = make_grid(2.0, 16), make_time_grid(1.3, 11)
    rng = np.random.default_rng(23)
    fld = make_field(g, tg, rng.standard_normal((12, 15)))
    path = str(tmp_path / "f.bin")
    write_field_bin(fld, path)
    back = read_field_bin(path)
    assert np.array_equal(back.values, fld.values)
    assert back.grid.L == g.L and back.tgrid.T == tg.T
    assert back.grid.N == g.N and back.tgrid.M == tg.M


def test_bin_rejects_garbage(tmp_path):
    path = str(tmp_path / "junk.bin")
    with open(path, "wb") as fh:
        fh.write(b"not a field file at all")
    with pytest.raises(ValueError):
        read_field_bin(path)
