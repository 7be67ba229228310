"""Command-line experiment runner.

``regnoise <subcommand> [--config FILE] [--out DIR] [--dump-fields] [--a.b=value ...]``

Every run writes ``results.csv`` and ``manifest.json``.  Exit status: 0 when
all gated metrics pass, 1 when a numerical gate fails, 2 for an invalid
configuration.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import config as cfgmod
from .bspde import ContinuationEnsemble, l2_agreement, solve_pair
from .config import ConfigError
from .fokker_planck import PicardDivergenceError, solve_nonadapted
from .grid_fields import GridField, SpatialGrid, lp_norm, write_field
from .heat_semigroup import HeatOperator, check_smoothing_slope, heat_apply, time_convolve
from .random_fields import drift_preset, field_preset
from .stochastics import TimeGrid, sample_brownian
from .trick import PreconditionError, dbleheat_check, regularity_scan, verify_trick

SUBCOMMANDS = ("semigroup-check", "fp-solve", "bspde-solve", "trick-verify", "regularity-scan",
               "counterexample", "dbleheat-check")
CSV_COLUMNS = ("run_id", "config_hash", "metric", "value", "se", "units", "wall_ms")


@dataclass
class Metric:
    name: str
    value: float
    se: float = 0.0
    units: str = ""
    wall_ms: float = 0.0
    passed: bool | None = None  # None: informational only


class _Clock:
    def __init__(self):
        self.t = time.perf_counter()

    def lap(self) -> float:
        now = time.perf_counter()
        ms, self.t = (now - self.t) * 1e3, now
        return ms


# --- setup helpers ---------------------------------------------------------------

def _grid(cfg):
    g = cfg["grid"]
    return SpatialGrid(g["d"], g["n"], float(g["L"]))


def _time(cfg):
    return TimeGrid(float(cfg["time"]["T"]), cfg["time"]["n_steps"])


def _x0(cfg):
    d = cfg["grid"]["d"]
    x0 = cfg["x0"]
    if x0 is None:
        return np.zeros(d)
    return np.broadcast_to(np.asarray(x0, dtype=float).reshape(-1), (d,)).copy()


def _field(cfg):
    try:
        return field_preset(cfg["field"]["name"], cfg["field"]["params"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError([("field.params", str(exc))]) from None


def _drift(cfg):
    try:
        return drift_preset(cfg["drift"]["name"], cfg["drift"]["params"], cfg["grid"]["d"])
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError([("drift.params", str(exc))]) from None


def _paths(cfg, tg=None):
    tg = tg or _time(cfg)
    return sample_brownian(tg, cfg["grid"]["d"], cfg["mc"]["seed"], cfg["mc"]["paths"])


def _workers(cfg):
    return cfg["workers"] or os.cpu_count() or 1


def _check(cfg, key, default):
    return cfg["check"].get(key, default)


# --- subcommands -------------------------------------------------------------------

def run_semigroup(cfg, dump):
    grid = _grid(cfg)
    clk = _Clock()
    op = HeatOperator(grid)
    s2 = float(_check(cfg, "sigma2", 0.25))
    tau = float(_check(cfg, "tau", 0.5))
    r2 = np.sum(grid.points ** 2, axis=-1).reshape(grid.shape)
    g0 = GridField(grid, np.exp(-r2 / (2 * s2)))
    exact = (s2 / (s2 + tau)) ** (grid.d / 2) * np.exp(-r2 / (2 * (s2 + tau)))
    err = float(np.max(np.abs(heat_apply(op, g0, tau).values - exact)))
    out = [Metric("gaussian_variance_error", err, units="abs", wall_ms=clk.lap(), passed=err <= 1e-6)]
    rng = np.random.default_rng(cfg["mc"]["seed"])
    v = GridField(grid, heat_apply(op, GridField(grid, rng.standard_normal(grid.shape)), 0.01).values)
    law = float(np.max(np.abs(op.apply(op.apply(v.values, 0.1), 0.2) - op.apply(v.values, 0.3))))
    out.append(Metric("semigroup_law_error", law, units="abs", wall_ms=clk.lap(), passed=law <= 1e-10))
    step = GridField(grid, np.heaviside(grid.mesh[0], 0.5))
    taus = np.logspace(-3, -1, 5)
    for k, (lo, hi) in ((1, (-0.6, -0.4)), (2, (-1.15, -0.85))):
        s = check_smoothing_slope(op, step, k, taus, p=np.inf)
        out.append(Metric(f"smoothing_slope_k{k}", s.slope, units="loglog", wall_ms=clk.lap(),
                          passed=lo <= s.slope <= hi))
    if dump:
        dump("step_smoothed", GridField(grid, op.apply(step.values, taus[0])))
    return out


def run_fp(cfg, dump):
    grid, tg = _grid(cfg), _time(cfg)
    f, b = _field(cfg), _drift(cfg)
    paths = _paths(cfg, tg)
    tol, max_iter = cfg["solver"]["tol"], cfg["solver"]["max_iter"]
    op = HeatOperator(grid, tg.dt)
    clk = _Clock()
    res, iters, ratios, conv = [], [], [], []
    lq = []
    for p in range(cfg["mc"]["paths"]):
        path = paths.select(p)
        sol, rep = solve_nonadapted(path, b, f, None, grid, tol=tol, max_iter=max_iter, op=op)
        res.append(rep.residual)
        iters.append(rep.iterations)
        ratios.extend(rep.ratios)
        if b is None:
            tc = time_convolve(op, lambda j: f.eval_values(j, path, grid), 0, tg.dt, tg.n_steps)
            conv.append(float(np.max(np.abs(sol.at(0) + tc))))
        if cfg["exponents"]["q"] is not None:
            lq.append(rep.drift_lq(cfg["exponents"]["q"], tg.dt))
        if p == 0 and dump:
            dump("F0", sol.slice(0))
    ms = clk.lap()
    out = [Metric("mild_residual_max", max(res), units="Lp", wall_ms=ms, passed=max(res) <= 2 * tol),
           Metric("picard_iterations_max", float(max(iters)), units="count", wall_ms=ms)]
    if ratios:
        out.append(Metric("picard_ratio_max", max(ratios), units="ratio", wall_ms=ms, passed=max(ratios) < 1))
    if conv:
        out.append(Metric("driftfree_vs_convolution", max(conv), units="abs", wall_ms=ms, passed=max(conv) <= 1e-10))
    if lq:
        out.append(Metric("drift_sup_Lq", max(lq), units="norm", wall_ms=ms))
    return out


def run_bspde(cfg, dump):
    grid, tg = _grid(cfg), _time(cfg)
    f, b = _field(cfg), _drift(cfg)
    if f.structure is None:
        raise ConfigError([("field.name", f"preset {f.name!r} with this profile has no separable Malliavin "
                                          "structure; Z cannot be represented")])
    if b is not None and b.structure is None:
        raise ConfigError([("drift.name", "drift has no separable Malliavin structure")])
    if grid.d != 1:
        raise ConfigError([("grid.d", "bspde-solve is one-dimensional")])
    node = int(_check(cfg, "node", tg.n_steps // 2))
    if not 0 <= node <= tg.n_steps:
        raise ConfigError([("check.node", f"must lie in [0, {tg.n_steps}]")])
    paths = _paths(cfg, tg)
    ens = ContinuationEnsemble(cfg["mc"]["M"], cfg["mc"]["seed"], cfg["mc"]["groups"])
    op = HeatOperator(grid, tg.dt)
    out = []
    clk = _Clock()
    for p in range(cfg["mc"]["paths"]):
        pair = solve_pair(node, paths.select(p), f, b, ens, grid, want_Z=True, want_reg=True, path_id=p, op=op)
        ms = clk.lap()
        h = grid.cell_volume
        l2 = lambda a: float(np.sqrt(np.sum(a ** 2) * h))
        ag = l2_agreement(pair.Z, pair.Z_reg, grid)
        out += [Metric(f"path{p}.F_L2", l2(pair.F.mean), l2(pair.F.se), "L2", ms),
                Metric(f"path{p}.Z_L2", l2(pair.Z.mean), l2(pair.Z.se), "L2", ms),
                Metric(f"path{p}.Zreg_L2", l2(pair.Z_reg.mean), l2(pair.Z_reg.se), "L2", ms),
                Metric(f"path{p}.Z_vs_regression", ag.statistic, ag.bound / 3, "L2", ms, passed=ag.passed)]
        if p == 0 and dump:
            dump("F_node", pair.F_field)
            dump("Z_node", pair.Z_field)
    return out


def run_trick(cfg, dump):
    grid, tg = _grid(cfg), _time(cfg)
    f, b = _field(cfg), _drift(cfg)
    paths = _paths(cfg, tg)
    clk = _Clock()
    rep = verify_trick(f, b, grid, paths, M=cfg["mc"]["M"], seed=cfg["mc"]["seed"], n_groups=cfg["mc"]["groups"],
                       x0=_x0(cfg), workers=_workers(cfg))
    ms = clk.lap()
    budget = rep.lhs_scale * tg.dt ** 0.4
    ok = rep.mean_abs_residual <= 3 * (rep.se + budget)
    return [Metric("mean_abs_residual", rep.mean_abs_residual, rep.se, "abs", ms, passed=ok),
            Metric("lhs_scale", rep.lhs_scale, 0.0, "abs", ms),
            Metric("dt_budget", budget, 0.0, "abs", ms)]


def _scan_metrics(rep, ms):
    return [Metric("alpha_in", rep.alpha_in, 0.0, "exponent", ms),
            Metric("alpha_out_median", float(np.median(rep.alpha_out)), 0.0, "exponent", ms),
            Metric("r2_out_median", float(np.median(rep.r2_out)), 0.0, "r2", ms)]


def run_regularity(cfg, dump):
    grid, tg = _grid(cfg), _time(cfg)
    f, b = _field(cfg), _drift(cfg)
    paths = _paths(cfg, tg)
    clk = _Clock()
    rep = regularity_scan(f, b, grid, paths, x0=_x0(cfg), workers=_workers(cfg))
    ms = clk.lap()
    min_gain = float(_check(cfg, "min_gain", 0.4))
    return _scan_metrics(rep, ms) + [Metric("gain", rep.gain, 0.0, "exponent", ms, passed=rep.gain >= min_gain)]


def run_counterexample(cfg, dump):
    if cfg["drift"]["name"] != "zero":
        raise ConfigError([("drift.name", "the counterexample is defined for zero drift")])
    grid, tg = _grid(cfg), _time(cfg)
    params = dict(cfg["field"]["params"])
    params.setdefault("profile", "step")
    f = field_preset("shifted_counterexample", params)
    paths = _paths(cfg, tg)
    clk = _Clock()
    rep = regularity_scan(f, None, grid, paths, workers=_workers(cfg))
    ms = clk.lap()
    max_gain = float(_check(cfg, "max_gain", 0.1))
    return _scan_metrics(rep, ms) + [
        Metric("gain", rep.gain, 0.0, "exponent", ms, passed=rep.gain < max_gain),
        Metric("identity_error", rep.max_identity_error, 0.0, "abs", ms, passed=rep.max_identity_error <= 1e-10)]


def run_dbleheat(cfg, dump):
    grid, tg = _grid(cfg), _time(cfg)
    f = _field(cfg)
    if not f.deterministic:
        raise ConfigError([("field.name", "dbleheat-check needs a deterministic field")])
    y_name = _check(cfg, "y", "smooth_perturbation")
    try:
        y = field_preset(y_name, cfg["check"].get("y_params", {}))
    except KeyError as exc:
        raise ConfigError([("check.y", str(exc))]) from None
    if tg.n_steps % 16:
        raise ConfigError([("time.n_steps", "must be divisible by 16 for the refinement ladder")])
    p = cfg["exponents"]["p"] or 4.0
    q = cfg["exponents"]["q"] or 4.0
    path = sample_brownian(tg, grid.d, cfg["mc"]["seed"])
    clk = _Clock()
    try:
        rep = dbleheat_check(f, y, path, grid, p=p, q=q)
    except PreconditionError as exc:
        raise ConfigError([("check.y", str(exc))]) from None
    ms = clk.lap()
    out = [Metric(f"ratio_n{n}", r, 0.0, "ratio", ms) for n, r in zip(rep.n_steps, rep.ratios)]
    r = np.asarray(rep.ratios)
    spread = float(r.max() / r.min()) if r.min() > 0 else 1.0
    out.append(Metric("ratio_spread", spread, 0.0, "ratio", ms, passed=rep.stable))
    return out


RUNNERS = {"semigroup-check": run_semigroup, "fp-solve": run_fp, "bspde-solve": run_bspde,
           "trick-verify": run_trick, "regularity-scan": run_regularity, "counterexample": run_counterexample,
           "dbleheat-check": run_dbleheat}


# --- output --------------------------------------------------------------------------

def _fmt(x) -> str:
    return repr(float(x))


def write_results(path: Path, run_id: str, chash: str, metrics, timing: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(CSV_COLUMNS)
        for m in metrics:
            w.writerow([run_id, chash, m.name, _fmt(m.value), _fmt(m.se), m.units,
                        _fmt(round(m.wall_ms, 3) if timing else 0.0)])


def manifest(subcommand: str, cfg: dict, chash: str) -> dict:
    return {"subcommand": subcommand, "config": cfg, "config_hash": chash, "seed": cfg["mc"]["seed"],
            "versions": {"regnoise": __version__, "python": platform.python_version(), "numpy": np.__version__,
                         "scipy": scipy.__version__}}


def _parse_overrides(extra) -> dict:
    out = {}
    it = iter(extra)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError([(tok, "expected --key=value override")])
        body = tok[2:]
        if "=" in body:
            k, v = body.split("=", 1)
        else:
            k = body
            try:
                v = next(it)
            except StopIteration:
                raise ConfigError([(k, "override is missing a value")]) from None
        out[k] = cfgmod.parse_value(v)
    return out


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="regnoise", description=__doc__.splitlines()[0])
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="JSON config (or a manifest.json from an earlier run)")
    ap.add_argument("--out", help="output directory (overrides output.dir)")
    ap.add_argument("--dump-fields", action="store_true", help="write representative grid fields (STRG format)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args, extra = ap.parse_known_args(argv)
    try:
        raw = {}
        if args.config:
            try:
                raw = json.loads(Path(args.config).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError([("--config", str(exc))]) from None
        cfg = cfgmod.load(raw, _parse_overrides(extra))
        if args.out:
            cfg["output"]["dir"] = args.out
        outdir = Path(cfg["output"]["dir"])
        outdir.mkdir(parents=True, exist_ok=True)
        chash = cfgmod.config_hash(cfg)

        dump = None
        if args.dump_fields:
            fdir = outdir / "fields"
            fdir.mkdir(exist_ok=True)

            def dump(name, field):
                write_field(fdir / f"{name}.strg", field)

        metrics = RUNNERS[args.subcommand](cfg, dump)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2
    except PicardDivergenceError as exc:
        print(f"FAIL solver: {exc}", file=sys.stderr)
        return 1

    run_id = f"{args.subcommand}-{chash[:12]}"
    write_results(outdir / "results.csv", run_id, chash, metrics, cfg["output"]["timing"])
    (outdir / "manifest.json").write_text(json.dumps(manifest(args.subcommand, cfg, chash), indent=2, sort_keys=True))
    failed = [m for m in metrics if m.passed is False]
    for m in metrics:
        tag = "" if m.passed is None else (" PASS" if m.passed else " FAIL")
        print(f"{m.name} = {m.value:.6g} (se {m.se:.3g}){tag}")
    if failed:
        print("FAIL " + ", ".join(m.name for m in failed), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
