import numpy as np
import pytest
from scipy.integrate import quad

from regnoise.fokker_planck import (PicardDivergenceError, differential_residual, malliavin_commutator,
                                    mild_residual, px_apply, solve_nonadapted)
from regnoise.grid_fields import GridField, SpatialGrid
from regnoise.heat_semigroup import HeatOperator, heat_apply, time_convolve
from regnoise.random_fields import AdaptedField, drift_preset, field_preset
from regnoise.stochastics import TimeGrid, sample_brownian

GRID = SpatialGrid(1, 256, 8.0)
S2 = 0.25


def gauss_field():
    return field_preset("deterministic", {"profile": "gaussian", "sigma": np.sqrt(S2)})


def test_zero_data_gives_zero():
    path = sample_brownian(TimeGrid(1.0, 16), 1, 0)
    sol, rep = solve_nonadapted(path, drift_preset("bump"), None, None, GRID)
    assert np.all(sol.values == 0) and rep.iterations == 1


def test_drift_free_matches_time_convolve():
    path = sample_brownian(TimeGrid(1.0, 32), 1, 0)
    f = field_preset("linear_in_W")
    op = HeatOperator(GRID, path.grid.dt)
    sol, rep = solve_nonadapted(path, None, f, None, GRID, op=op)
    for i in (0, 7, 31):
        tc = time_convolve(op, lambda j: f.eval_values(j, path, GRID), i, path.grid.dt, 32)
        assert np.max(np.abs(sol.at(i) + tc)) <= 1e-10
    assert rep.iterations == 1


def test_drift_free_terminal_condition():
    path = sample_brownian(TimeGrid(1.0, 8), 1, 0)
    phi = np.exp(-GRID.axis ** 2)
    sol, _ = solve_nonadapted(path, None, None, phi, GRID)
    assert np.max(np.abs(sol.at(3) - heat_apply(HeatOperator(GRID), GridField(GRID, phi), 5 / 8).values)) < 1e-12
    assert np.array_equal(sol.at(8), phi)


def characteristics(x, t, T, c):
    def integrand(tau, xx):
        v = S2 + tau
        return np.sqrt(S2 / v) * np.exp(-(xx + c * tau) ** 2 / (2 * v))
    return np.array([-quad(integrand, 0, T - t, args=(xx,), epsabs=1e-13)[0] for xx in x])


def test_constant_drift_against_characteristics():
    c = 0.3
    path = sample_brownian(TimeGrid(1.0, 1024), 1, 0)
    sol, rep = solve_nonadapted(path, drift_preset("constant", {"c": c}), gauss_field(), None, GRID)
    xs = GRID.axis[::8]
    for i in (0, 512):
        ref = characteristics(xs, i / 1024, 1.0, c)
        assert np.max(np.abs(sol.at(i)[::8] - ref)) <= 1e-3


def test_picard_contraction_and_residual():
    path = sample_brownian(TimeGrid(1.0, 64), 1, 2)
    b = drift_preset("linear_in_W", {"c": 0.5})
    sol, rep = solve_nonadapted(path, b, field_preset("linear_in_W"), None, GRID, tol=1e-8)
    r = np.asarray(rep.ratios)
    assert r.size >= 2 and np.all(r < 1)
    assert r.max() <= 0.5
    assert np.all(np.diff(rep.diffs) < 0)
    assert rep.residual <= 2e-8
    assert mild_residual(sol, path, b, field_preset("linear_in_W")) <= 2e-8


def test_picard_and_sweep_share_fixed_point():
    path = sample_brownian(TimeGrid(1.0, 32), 1, 3)
    b = drift_preset("tanh_W", {"c": 0.8})
    f = gauss_field()
    a, _ = solve_nonadapted(path, b, f, None, GRID, tol=1e-12)
    s, _ = solve_nonadapted(path, b, f, None, GRID, method="sweep")
    assert np.max(np.abs(a.values - s.values)) < 1e-10


def test_picard_divergence_carries_history():
    path = sample_brownian(TimeGrid(1.0, 16), 1, 0)
    with pytest.raises(PicardDivergenceError) as e:
        solve_nonadapted(path, drift_preset("constant", {"c": 3.0}), gauss_field(), None, GRID, max_iter=2)
    assert len(e.value.ratios) >= 1


def test_superposition():
    path = sample_brownian(TimeGrid(1.0, 32), 1, 4)
    b = drift_preset("bump", {"c": 0.6})
    f1, f2 = gauss_field(), field_preset("linear_in_W")
    phi = np.exp(-(GRID.axis - 1) ** 2)
    kw = dict(tol=1e-13)
    s1, _ = solve_nonadapted(path, b, f1, phi, GRID, **kw)
    s2, _ = solve_nonadapted(path, b, f2, None, GRID, **kw)
    src = lambda j: 2 * f1.eval_values(j, path, GRID) - 3 * f2.eval_values(j, path, GRID)
    s12, _ = solve_nonadapted(path, b, src, 2 * phi, GRID, **kw)
    assert np.max(np.abs(s12.values - (2 * s1.values - 3 * s2.values))) <= 1e-9


def test_differential_form_converges():
    b = drift_preset("bump", {"c": 0.5})
    f = gauss_field()
    fine = sample_brownian(TimeGrid(1.0, 512), 1, 0)
    res, dts = [], []
    for factor in (16, 8, 4, 2):
        p = fine.coarsen(factor)
        sol, _ = solve_nonadapted(p, b, f, None, GRID, method="sweep")
        res.append(differential_residual(sol, p, b, f))
        dts.append(p.grid.dt)
    slope = np.polyfit(np.log(dts), np.log(res), 1)[0]
    assert slope >= 0.8


def test_px_trivial_cases():
    path = sample_brownian(TimeGrid(1.0, 32), 1, 0)
    phi = GridField(GRID, np.exp(-GRID.axis ** 2))
    assert np.array_equal(px_apply(path, drift_preset("bump"), 5, 5, phi, GRID).values, phi.values)
    out = px_apply(path, None, 4, 20, phi, GRID).values
    assert np.max(np.abs(out - heat_apply(HeatOperator(GRID), phi, 16 / 32).values)) <= 1e-10
    with pytest.raises(ValueError):
        px_apply(path, None, 6, 5, phi, GRID)


@pytest.mark.parametrize("n", [16, 64, 256])
def test_px_composition(n):
    path = sample_brownian(TimeGrid(1.0, n), 1, 1)
    b = drift_preset("tanh_W", {"c": 0.7})
    phi = GridField(GRID, np.exp(-GRID.axis ** 2))
    s, u, t = n // 8, n // 2, n
    direct = px_apply(path, b, s, t, phi, GRID).values
    two = px_apply(path, b, s, u, px_apply(path, b, u, t, phi, GRID), GRID).values
    assert np.max(np.abs(direct - two)) <= 2 * path.grid.dt


def test_commutator_deterministic_cases():
    path = sample_brownian(TimeGrid(1.0, 32), 1, 0)
    b = drift_preset("bump")
    phi = GridField(GRID, np.exp(-GRID.axis ** 2))
    assert np.all(malliavin_commutator(path, b, 3, 3, phi, GRID).values == 0)
    dphi = GridField(GRID, np.sin(np.pi * GRID.axis / GRID.L))
    got = malliavin_commutator(path, b, 3, 3, phi, GRID, dphi=dphi).values
    assert np.max(np.abs(got - px_apply(path, b, 3, 32, dphi, GRID).values)) < 1e-14


@pytest.mark.parametrize("name", ["linear_in_W", "tanh_W"])
def test_commutator_against_bump_oracle(name):
    n = 64
    path = sample_brownian(TimeGrid(1.0, n), 1, 5)
    b = drift_preset(name, {"c": 0.8})
    phi = GridField(GRID, np.exp(-GRID.axis ** 2))
    k = t = 10
    got = malliavin_commutator(path, b, k, t, phi, GRID).values
    eps = 1e-4
    up = px_apply(path.bumped(k, eps), b, t, n, phi, GRID).values
    dn = px_apply(path.bumped(k, -eps), b, t, n, phi, GRID).values
    assert np.max(np.abs(got - (up - dn) / (2 * eps))) <= max(1e-3, 5 / n)
    assert np.max(np.abs(got)) > 1e-3  # the transport term is actually exercised


def test_commutator_rejects_non_separable_drift():
    path = sample_brownian(TimeGrid(1.0, 8), 1, 0)
    b = AdaptedField(lambda i, p, x: np.zeros(x.shape), "opaque", vector=True)
    with pytest.raises(ValueError, match="opaque"):
        malliavin_commutator(path, b, 1, 1, np.ones(GRID.shape), GRID)


def test_drift_lq_report():
    path = sample_brownian(TimeGrid(1.0, 16), 1, 0)
    _, rep = solve_nonadapted(path, drift_preset("constant", {"c": 0.5}), gauss_field(), None, GRID)
    assert rep.drift_lq(4.0, path.grid.dt) == pytest.approx(0.5, rel=1e-12)
