import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from regnoise.grid_fields import GridField, SpatialGrid
from regnoise.heat_semigroup import (HeatOperator, check_smoothing_slope, heat_apply, time_convolve,
                                     time_holder_slope)

TAUS = np.logspace(-3, -1, 5)


def rough(grid, seed):
    return GridField(grid, np.random.default_rng(seed).standard_normal(grid.shape))


def test_tau_zero_is_identity(grid):
    f = rough(grid, 0)
    assert np.max(np.abs(heat_apply(HeatOperator(grid), f, 0.0).values - f.values)) <= 1e-12


def test_negative_tau_rejected(grid):
    with pytest.raises(ValueError):
        heat_apply(HeatOperator(grid), rough(grid, 0), -0.1)


def test_constant_is_fixed(grid):
    out = heat_apply(HeatOperator(grid), GridField(grid, np.full(grid.shape, 2.5)), 0.7).values
    assert np.max(np.abs(out - 2.5)) < 1e-13


def test_multiplier_range(grid):
    op = HeatOperator(grid)
    assert np.all(op.multiplier(0.0) == 1.0)
    m = op.multiplier(0.3)
    expo = 0.3 * grid.rk2 / 2
    assert np.allclose(m, np.exp(-expo), rtol=1e-14, atol=0)
    # strictly positive wherever the exponential is representable
    assert np.all(m <= 1) and np.all(m[expo < 700] > 0)


@pytest.mark.parametrize("d", [1, 2])
def test_gaussian_variance_addition(d):
    g = SpatialGrid(d, 512 if d == 1 else 128, 8.0)
    s2, tau = 0.25, 0.5
    r2 = np.sum(g.points ** 2, axis=-1).reshape(g.shape)
    out = heat_apply(HeatOperator(g), GridField(g, np.exp(-r2 / (2 * s2))), tau).values
    exact = (s2 / (s2 + tau)) ** (d / 2) * np.exp(-r2 / (2 * (s2 + tau)))
    assert np.max(np.abs(out - exact)) <= 1e-6


@settings(max_examples=15, deadline=None)
@given(t1=st.floats(0.0, 1.0), t2=st.floats(0.0, 1.0), seed=st.integers(0, 100))
def test_semigroup_law(t1, t2, seed):
    g = SpatialGrid(1, 128, 4.0)
    op = HeatOperator(g)
    f = rough(g, seed).values
    assert np.max(np.abs(op.apply(op.apply(f, t1), t2) - op.apply(f, t1 + t2))) <= 1e-10


@settings(max_examples=15, deadline=None)
@given(tau=st.floats(0.0, 2.0), seed=st.integers(0, 100))
def test_mass_and_maximum_principle(tau, seed):
    g = SpatialGrid(1, 256, 8.0)
    f = GridField(g, np.exp(-(g.axis - 1) ** 2) + 0.3 * np.sin(np.pi * g.axis / g.L))
    out = heat_apply(HeatOperator(g), f, tau).values
    assert abs(out.mean() - f.values.mean()) <= 1e-12
    assert out.min() >= f.values.min() - 1e-9 and out.max() <= f.values.max() + 1e-9


def test_smoothing_slopes_step(grid):
    op = HeatOperator(grid)
    step = GridField(grid, np.heaviside(grid.axis, 0.5))
    s1 = check_smoothing_slope(op, step, 1, TAUS)
    s2 = check_smoothing_slope(op, step, 2, TAUS)
    assert -0.6 <= s1.slope <= -0.4 and s1.flag is None
    assert -1.15 <= s2.slope <= -0.85


def test_smoothing_slope_lp_rate(grid):
    # finite p shifts the jump's rate by 1/(2p)
    op = HeatOperator(grid)
    step = GridField(grid, np.heaviside(grid.axis, 0.5))
    s = check_smoothing_slope(op, step, 1, TAUS, p=2)
    assert s.slope == pytest.approx(-0.25, abs=0.05)


def test_smooth_input_is_flagged(grid):
    op = HeatOperator(grid)
    s = check_smoothing_slope(op, GridField(grid, np.exp(-grid.axis ** 2 / 2)), 1, TAUS)
    assert -0.1 < s.slope < 0.05
    assert s.flag == "not rough enough to exhibit bound"


def test_slope_ladder_precondition(grid):
    op = HeatOperator(grid)
    f = rough(grid, 0)
    with pytest.raises(ValueError):
        check_smoothing_slope(op, f, 1, [1e-3, 1e-2, 1e-1])
    with pytest.raises(ValueError):
        check_smoothing_slope(op, f, 1, [1e-2, 2e-2, 5e-2, 9e-2])


def test_time_convolve_trivial(grid):
    op = HeatOperator(grid)
    assert np.all(time_convolve(op, lambda i: np.zeros(grid.shape), 0, 0.1, 10) == 0)
    out = time_convolve(op, lambda i: np.full(grid.shape, 1.5), 3, 0.1, 10)
    assert np.allclose(out, 1.5 * 0.7, atol=1e-13)


def test_time_convolve_gaussian_against_quadrature(grid):
    s2, T, n = 0.25, 1.0, 8192
    g0 = np.exp(-grid.axis ** 2 / (2 * s2))
    out = time_convolve(HeatOperator(grid), lambda i: g0, 0, T / n, n)
    xs = grid.axis[::16]

    def kernel(tau, x):
        return np.sqrt(s2 / (s2 + tau)) * np.exp(-x * x / (2 * (s2 + tau)))

    ref = np.array([quad(kernel, 0, T, args=(x,), epsabs=1e-12)[0] for x in xs])
    assert np.max(np.abs(out[::16] - ref)) <= 1e-4


def test_time_holder_diagnostic(grid):
    op = HeatOperator(grid)
    step = GridField(grid, np.heaviside(grid.axis, 0.5))
    slope = time_holder_slope(op, step, 0.01, [0.001, 0.002, 0.004, 0.008])
    assert np.isfinite(slope) and slope > 0
