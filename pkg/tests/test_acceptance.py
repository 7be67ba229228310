"""Acceptance criteria at desk scale (d=1, n=512, T=1 unless noted).

Each test prints one PASS/FAIL line; the lines are repeated in the pytest
terminal summary.
"""

import time

import numpy as np
import pytest
from scipy.integrate import quad

from conftest import ACCEPTANCE_LINES
from regnoise.bspde import ContinuationEnsemble, Estimate, l2_agreement, solve_pair, tower_check
from regnoise.cli import main as cli_main
from regnoise.fokker_planck import mild_residual, px_apply, malliavin_commutator, solve_nonadapted
from regnoise.grid_fields import GridField, SpatialGrid
from regnoise.heat_semigroup import HeatOperator, check_smoothing_slope, heat_apply, time_convolve
from regnoise.random_fields import (drift_preset, field_preset, make_profile, malliavin_derivative,
                                    malliavin_fd_oracle, perturbation_kernel)
from regnoise.stochastics import TimeGrid, girsanov_weight, sample_brownian
from regnoise.trick import (deterministic_ladder, ladder, manufactured_identity, regularity_scan,
                            verify_trick)

GRID = SpatialGrid(1, 512, 8.0)


def report(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.s = time.perf_counter() - self.t0


def test_criterion_01_heat_semigroup_exactness():
    with Timer() as tm:
        op = HeatOperator(GRID)
        s2, tau = 0.25, 0.5
        x = GRID.axis
        out = heat_apply(op, GridField(GRID, np.exp(-x ** 2 / (2 * s2))), tau).values
        gauss = float(np.max(np.abs(out - np.sqrt(s2 / (s2 + tau)) * np.exp(-x ** 2 / (2 * (s2 + tau))))))
        v = np.random.default_rng(0).standard_normal(GRID.shape)
        law = float(np.max(np.abs(op.apply(op.apply(v, 0.1), 0.25) - op.apply(v, 0.35))))
    ok = gauss <= 1e-6 and law <= 1e-10 and tm.s < 1.0
    report(1, ok, f"gaussian err {gauss:.2e} (<=1e-6), semigroup law {law:.2e} (<=1e-10), {tm.s:.2f}s (<1s)")


def test_criterion_02_smoothing_slope():
    with Timer() as tm:
        op = HeatOperator(GRID)
        step = GridField(GRID, np.heaviside(GRID.axis, 0.5))
        taus = np.logspace(-3, -1, 5)
        s1 = check_smoothing_slope(op, step, 1, taus, p=np.inf).slope
        s2 = check_smoothing_slope(op, step, 2, taus, p=np.inf).slope
    ok = abs(s1 + 0.5) <= 0.1 and abs(s2 + 1.0) <= 0.15 and tm.s < 5.0
    report(2, ok, f"sup-norm slopes k=1 {s1:.3f} (-0.5+-0.1), k=2 {s2:.3f} (-1+-0.15), {tm.s:.2f}s (<5s)")


def _characteristics(xs, t, c, s2=0.25):
    def integrand(tau, x):
        v = s2 + tau
        return np.sqrt(s2 / v) * np.exp(-(x + c * tau) ** 2 / (2 * v))
    return np.array([-quad(integrand, 0, 1.0 - t, args=(x,), epsabs=1e-13)[0] for x in xs])


def test_criterion_03_nonadapted_solver():
    tol = 1e-8
    # drift-free against the heat convolution
    path = sample_brownian(TimeGrid(1.0, 64), 1, 30)
    f = field_preset("linear_in_W")
    op = HeatOperator(GRID, path.grid.dt)
    with Timer() as t_free:
        sol, _ = solve_nonadapted(path, None, f, None, GRID, op=op, tol=tol)
    free = max(float(np.max(np.abs(sol.at(i) + time_convolve(op, lambda j: f.eval_values(j, path, GRID), i,
                                                                  path.grid.dt, 64)))) for i in (0, 21, 50))
    # constant drift against the characteristics integral
    g = field_preset("deterministic", {"sigma": 0.5})
    fine = sample_brownian(TimeGrid(1.0, 1024), 1, 31)
    with Timer() as t_const:
        solc, _ = solve_nonadapted(fine, drift_preset("constant", {"c": 0.3}), g, None, GRID, tol=tol)
    xs = GRID.axis[::8]
    const = max(float(np.max(np.abs(solc.at(i)[::8] - _characteristics(xs, i / 1024, 0.3)))) for i in (0, 512))
    # random drift: Picard contraction and mild residual
    b = drift_preset("linear_in_W", {"c": 0.5})
    with Timer() as t_rand:
        solr, rep = solve_nonadapted(path, b, f, None, GRID, op=op, tol=tol)
    res = mild_residual(solr, path, b, f, op=op)
    r = np.asarray(rep.ratios)
    geometric = bool(r.size >= 2 and np.all(r < 1) and np.all(np.diff(rep.diffs) < 0))
    slowest = max(t_free.s, t_const.s, t_rand.s)
    ok = free <= 1e-10 and const <= 1e-3 and res <= 2 * tol and geometric and slowest < 10
    report(3, ok, f"drift-free {free:.1e}, const-drift {const:.1e} (N=1024), residual {res:.1e}, "
                  f"ratios max {r.max():.3f} over {r.size} its, slowest solve {slowest:.1f}s")


def test_criterion_04_px_semigroup():
    b = drift_preset("tanh_W", {"c": 0.7})
    phi = GridField(GRID, np.exp(-GRID.axis ** 2))
    defects, budgets = [], []
    with Timer() as tm:
        for n in (32, 128, 512):
            path = sample_brownian(TimeGrid(1.0, n), 1, 40)
            op = HeatOperator(GRID, path.grid.dt)
            s, u = n // 8, n // 2
            direct = px_apply(path, b, s, n, phi, GRID, op).values
            two = px_apply(path, b, s, u, px_apply(path, b, u, n, phi, GRID, op), GRID, op).values
            defects.append(float(np.max(np.abs(direct - two))))
            budgets.append(path.grid.dt)
    within = all(d <= 2 * bud for d, bud in zip(defects, budgets))
    if max(defects) > 1e-10:
        slope = float(np.polyfit(np.log(budgets), np.log(defects), 1)[0])
        rate_ok, rate = slope >= 0.8, f"slope {slope:.2f}"
    else:
        # the discrete family composes exactly; the defect sits at round-off and has no rate
        rate_ok, rate = True, "slope n/a (defect at round-off)"
    ok = within and rate_ok and tm.s < 30
    report(4, ok, f"defects {', '.join(f'{d:.1e}' for d in defects)} vs 2dt budgets, {rate}, {tm.s:.1f}s")


SUITE = [
    ("deterministic", {}, "bump", {"c": 0.4}),
    ("linear_in_W", {}, "zero", {}),
    ("shifted_counterexample", {}, "zero", {}),
    ("smooth_perturbation", {"c": 1.0}, "constant", {"c": 0.3}),
    ("linear_in_W", {}, "linear_in_W", {"c": 0.5}),
    ("antithetic_shift", {}, "tanh_W", {"c": 0.5}),
    ("smooth_perturbation", {"c": 1.0}, "tanh_W", {"c": 0.5}),
]


def test_criterion_05_bspde_z_identification():
    tg = TimeGrid(1.0, 32)
    path = sample_brownian(tg, 1, 50)
    i = 8
    op = HeatOperator(GRID, tg.dt)
    with Timer() as tm:
        # (a) deterministic data
        pa = solve_pair(i, path, field_preset("deterministic"), drift_preset("bump", {"c": 0.4}),
                        ContinuationEnsemble(64, 1), GRID, op=op)
        a_ok = bool(np.all(pa.Z.mean == 0) and np.all(pa.Z.se == 0))
        # (b) f = g W against the closed form
        g = make_profile("gaussian").value(GRID.points)
        Z_exact = -op.apply(time_convolve(op, lambda j: g, i + 1, tg.dt, tg.n_steps), tg.dt)[None]
        pb = solve_pair(i, path, field_preset("linear_in_W"), None, ContinuationEnsemble(1024, 2), GRID,
                        want_reg=True, op=op)
        b_ok = (l2_agreement(pb.Z, Estimate.exact(Z_exact), GRID).passed
                and l2_agreement(pb.Z_reg, Estimate.exact(Z_exact), GRID).passed)
        # (c) Malliavin representation against regression on the suite
        fails = []
        for fn, fp, bn, bp in SUITE:
            pc = solve_pair(i, path, field_preset(fn, fp), drift_preset(bn, bp), ContinuationEnsemble(1024, 3),
                            GRID, want_reg=True, op=op)
            ag = l2_agreement(pc.Z, pc.Z_reg, GRID)
            if not ag.passed:
                fails.append(f"{fn}/{bn} {ag.statistic:.3g}>{ag.bound:.3g}")
    ok = a_ok and b_ok and not fails and tm.s < 300
    report(5, ok, f"(a) Z==0 {a_ok}, (b) closed form {b_ok}, (c) {len(SUITE) - len(fails)}/{len(SUITE)} agree"
                  f"{' ' + '; '.join(fails) if fails else ''}, {tm.s:.1f}s")


def test_criterion_06_tower_property():
    tg = TimeGrid(1.0, 32)
    path = sample_brownian(tg, 1, 60)
    presets = [("linear_in_W", {}, "zero", {}), ("shifted_counterexample", {}, "zero", {}),
               ("smooth_perturbation", {"c": 1.0}, "tanh_W", {"c": 0.5})]
    out = []
    with Timer() as tm:
        for fn, fp, bn, bp in presets:
            r = tower_check(8, 20, path, field_preset(fn, fp), drift_preset(bn, bp), GRID,
                            M_direct=1024, M1=64, M2=128, seed=6)
            out.append((fn, r.agreement))
    ok = all(a.passed for _, a in out) and tm.s < 300
    report(6, ok, ", ".join(f"{n} {a.statistic:.3g}<={a.bound:.3g}" for n, a in out) + f", {tm.s:.1f}s")


def test_criterion_07_ito_tanaka_deterministic():
    fine = sample_brownian(TimeGrid(1.0, 4096), 1, 70, n_paths=200)
    with Timer() as tm:
        lad = deterministic_ladder(field_preset("step"), None, GRID, fine, factors=(16, 4, 1))
    res = [r.mean_abs_residual for r in lad.levels]
    rel = res[-1] / lad.levels[-1].lhs_scale
    ok = lad.strictly_decreasing and lad.slope >= 0.4 and rel <= 5e-2 and tm.s < 120
    report(7, ok, f"residuals {', '.join(f'{x:.4f}' for x in res)}, slope {lad.slope:.2f}, "
                  f"finest/LHS {rel:.3f}, {tm.s:.1f}s")


@pytest.mark.slow
def test_criterion_08_ito_wentzell_tanaka():
    f = field_preset("linear_in_W")
    fine = sample_brownian(TimeGrid(1.0, 64), 1, 80, n_paths=50)
    reps = []
    with Timer() as tm:
        for factor, M in ((4, 64), (2, 256), (1, 1024)):
            reps.append(verify_trick(f, None, GRID, fine.coarsen(factor) if factor > 1 else fine, M=M, seed=8))
        manu = max(abs(lhs - rhs) for lhs, rhs in
                   (manufactured_identity(GRID, sample_brownian(TimeGrid(1.0, 64), 1, s)) for s in range(10)))
    lad = ladder(reps)
    top = reps[-1]
    budget = top.lhs_scale * (1.0 / top.n_steps) ** 0.4
    within = top.mean_abs_residual <= 3 * (top.se + budget)
    ok = lad.strictly_decreasing and within and manu <= 1e-8 and tm.s < 900
    res = ", ".join(f"{r.mean_abs_residual:.4f}" for r in reps)
    report(8, ok, f"residuals {res} (N=16/32/64, M=64/256/1024), finest {top.mean_abs_residual:.4f} <= "
                  f"3(SE {top.se:.4f} + budget {budget:.4f}), manufactured {manu:.1e}, {tm.s:.0f}s")


def test_criterion_09_regularization_gain():
    paths = sample_brownian(TimeGrid(1.0, 1024), 1, 90, n_paths=100)
    with Timer() as tm:
        base = regularity_scan(field_preset("step"), None, GRID, paths)
        counter = regularity_scan(field_preset("shifted_counterexample", {"profile": "step"}), None, GRID, paths)
        pert = regularity_scan(field_preset("smooth_perturbation", {"profile": "step"}), None, GRID, paths)
        y = field_preset("antithetic_shift")
        p = paths.select(0).coarsen(64)
        kern_ok = all(perturbation_kernel(y, k, j, p) == (-1.0 if k < j else 0.0)
                      for j in range(17) for k in range(16))
    ok = (base.gain >= 0.4 and counter.gain < 0.1 and counter.max_identity_error <= 1e-10
          and abs(pert.gain - base.gain) <= 0.15 and kern_ok and tm.s < 300)
    report(9, ok, f"step gain {base.gain:.3f} (>=0.4), counterexample gain {counter.gain:.3f} (<0.1) identity "
                  f"{counter.max_identity_error:.1e}, perturbed gain {pert.gain:.3f}, Y=-W kernel {kern_ok}, "
                  f"{tm.s:.1f}s")


def test_criterion_10_malliavin_machinery():
    tg = TimeGrid(1.0, 32)
    path = sample_brownian(tg, 1, 100)
    with Timer() as tm:
        worst = 0.0
        presets = [("deterministic", {}), ("linear_in_W", {}), ("shifted_counterexample", {}),
                   ("smooth_perturbation", {"c": 1.0}), ("antithetic_shift", {})]
        for name, params in presets:
            fld = field_preset(name, params)
            for k, j in ((0, 31), (10, 11), (12, 25)):
                ex = malliavin_derivative(fld, k, j, path, GRID).values
                fd = malliavin_fd_oracle(fld, k, j, path, GRID, eps=1e-4, richardson=True).values
                scale = np.max(np.abs(ex))
                err = np.max(np.abs(fd - ex)) / scale if scale > 0 else np.max(np.abs(fd))
                worst = max(worst, float(err))
        b = drift_preset("linear_in_W", {"c": 0.8})
        phi = GridField(GRID, np.exp(-GRID.axis ** 2))
        k = t = 8
        com = malliavin_commutator(path, b, k, t, phi, GRID).values
        eps = 1e-4
        bump = (px_apply(path.bumped(k, eps), b, t, 32, phi, GRID).values
                - px_apply(path.bumped(k, -eps), b, t, 32, phi, GRID).values) / (2 * eps)
        com_err = float(np.max(np.abs(com - bump)))
        many = sample_brownian(tg, 1, 101, n_paths=10_000)
        rho = girsanov_weight(drift_preset("bump", {"c": 1.0}), many).values[:, -1]
        z = abs(rho.mean() - 1) / (rho.std(ddof=1) / np.sqrt(rho.size))
    tol_com = max(1e-3, 5 * tg.dt)
    ok = worst <= 1e-4 and com_err <= tol_com and z <= 3 and tm.s < 120
    report(10, ok, f"fd vs separable {worst:.1e} rel (<=1e-4), commutator {com_err:.1e} (<={tol_com:.3g}), "
                   f"Girsanov |mean-1|/SE {z:.2f} (<=3), {tm.s:.1f}s")


def test_criterion_11_reproducibility(tmp_path):
    args = ["--grid.n=256", "--time.n_steps=16", "--mc.paths=4", "--mc.M=64", "--field.name=smooth_perturbation",
            "--drift.name=tanh_W", "--output.timing=false"]
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    codes = [cli_main(["trick-verify", "--out", str(a), "--workers=1"] + args),
             cli_main(["trick-verify", "--config", str(a / "manifest.json"), "--out", str(b), "--workers=1"])]
    identical = (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    codes.append(cli_main(["trick-verify", "--out", str(c), "--workers=4"] + args))

    def values(d):
        lines = (d / "results.csv").read_text().splitlines()[1:]
        return np.array([float(line.split(",")[3]) for line in lines])

    va, vc = values(a), values(c)
    drift = float(np.max(np.abs(va - vc) / np.maximum(np.abs(va), 1e-300)))
    ok = identical and drift <= 1e-12 and all(code in (0, 1) for code in codes)
    report(11, ok, f"single-worker rerun bit-identical {identical}, 4-worker relative drift {drift:.1e}")
