"""Pathwise verification of the time-average identity and regularisation scans.

Along a path ``X`` driven by ``W`` the identity checked is

    sum_i f(t_i, X_i) dt  =  -F(0, X_0) - sum_i (grad F + Z)(t_i, X_i) . dW_i
                             - sum_i div Z(t_i, X_i) dt

with ``(F, Z)`` the adapted pair from :mod:`regnoise.bspde` (``Z = 0`` for
deterministic data).  Slices are read off the grid by linear
interpolation; the left-hand side evaluates ``f`` exactly at ``X_i``.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .bspde import ContinuationEnsemble, Estimate, solve_pair
from .fokker_planck import solve_nonadapted
from .grid_fields import (GridField, SpatialGrid, divergence_values, gradient_values, holder_exponent,
                          interpolate, sobolev_norm, lp_norm)
from .heat_semigroup import HeatOperator
from .random_fields import AdaptedField
from .stochastics import BrownianPath, euler_maruyama, sample_brownian


class PreconditionError(ValueError):
    pass


# --- assembly -------------------------------------------------------------------

def _nodes_points(X: np.ndarray, N: int, extra: tuple) -> np.ndarray:
    """Path(s) ``Q + (N+1, d)`` -> points ``(N,) + extra + Q + (d,)`` at nodes ``0..N-1``."""
    Xn = np.moveaxis(X[..., :N, :], -2, 0)  # (N,) + Q + (d,)
    Q = Xn.shape[1:-1]
    Xn = Xn.reshape((N,) + (1,) * len(extra) + Q + Xn.shape[-1:])
    return np.broadcast_to(Xn, (N,) + extra + Q + Xn.shape[-1:])


def node_terms(grid: SpatialGrid, X, dW, dt, gradF, Z=None, divZ=None) -> np.ndarray:
    """Per-node contributions ``(grad F + Z)(X_i) . dW_i + div Z(X_i) dt``.

    Slices carry optional extra axes ``E`` after the node axis:
    ``gradF`` and ``Z`` have shape ``(N,) + E + (d,) + grid.shape`` and
    ``divZ`` has ``(N,) + E + grid.shape``.  ``X`` has shape ``Q + (N+1, d)``
    and ``dW`` has ``Q + (N, d)``.  Returns shape ``(N,) + E + Q``.
    """
    N = gradF.shape[0]
    d = grid.d
    extra = gradF.shape[1: gradF.ndim - d - 1]
    pts = _nodes_points(np.asarray(X), N, extra)
    dWn = np.moveaxis(np.asarray(dW)[..., :N, :], -2, 0)
    Q = dWn.shape[1:-1]
    dWn = dWn.reshape((N,) + (1,) * len(extra) + Q + (d,))
    out = 0.0
    for a in range(d):
        vel = np.take(gradF, a, axis=-d - 1)
        if Z is not None:
            vel = vel + np.take(Z, a, axis=-d - 1)
        out = out + interpolate(vel, grid, pts) * dWn[..., a]
    if divZ is not None:
        out = out + interpolate(divZ, grid, pts) * dt
    return out


def assemble_rhs(grid: SpatialGrid, X, dW, dt, F0, gradF, Z=None, divZ=None):
    """``-F(0, X_0) - sum_i [(grad F + Z)(X_i) . dW_i + div Z(X_i) dt]``; see :func:`node_terms`."""
    terms = node_terms(grid, X, dW, dt, gradF, Z, divZ)
    extra = np.shape(F0)[: np.ndim(F0) - grid.d]
    X0 = np.asarray(X)[..., 0, :]
    Q = X0.shape[:-1]
    pts = np.broadcast_to(X0.reshape((1,) * len(extra) + Q + (grid.d,)), extra + Q + (grid.d,))
    total = np.zeros(terms.shape[1:])
    for term in terms:  # sequential node order
        total = total + term
    return -interpolate(F0, grid, pts) - total


def lhs_along(f: AdaptedField, path: BrownianPath, X: np.ndarray) -> float:
    """``sum_i f(t_i, X_i) dt`` with ``f`` evaluated exactly (no grid)."""
    N, dt = path.grid.n_steps, path.grid.dt
    total = 0.0
    for i in range(N):
        total += float(np.asarray(f.at(i, path, X[i][None, :])).reshape(-1)[0]) * dt
    return total


# --- reports ----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TrickReport:
    lhs: np.ndarray
    rhs: np.ndarray
    residual_se: np.ndarray  # per path (0 for deterministic data)
    n_steps: int
    M: int | None = None
    extras: dict = dc_field(default_factory=dict)

    @property
    def residual(self) -> np.ndarray:
        return self.lhs - self.rhs

    @property
    def mean_abs_residual(self) -> float:
        return float(np.mean(np.abs(self.residual)))

    @property
    def se(self) -> float:
        """SE of mean|residual|: path-to-path spread plus inner MC noise."""
        P = self.residual.size
        spread = np.std(np.abs(self.residual), ddof=1) / np.sqrt(P) if P > 1 else 0.0
        inner = np.sqrt(np.sum(self.residual_se ** 2)) / P
        return float(np.hypot(spread, inner))

    @property
    def lhs_scale(self) -> float:
        return float(np.mean(np.abs(self.lhs)))


@dataclass(frozen=True)
class LadderReport:
    levels: tuple  # TrickReport per level, coarse to fine
    slope: float
    strictly_decreasing: bool


def _ladder_slope(reports) -> float:
    dts = np.array([1.0 / r.n_steps for r in reports])
    res = np.array([r.mean_abs_residual for r in reports])
    if np.any(res <= 0):
        return float("inf")
    return float(np.polyfit(np.log(dts), np.log(res), 1)[0])


def ladder(reports) -> LadderReport:
    res = [r.mean_abs_residual for r in reports]
    dec = all(b < a for a, b in zip(res, res[1:]))
    return LadderReport(tuple(reports), _ladder_slope(reports), dec)


# --- deterministic data -------------------------------------------------------------

def _deterministic_slices(f, drift, grid, tg, op=None):
    dummy = BrownianPath(tg, np.zeros((tg.n_steps, grid.d)))
    sol, _ = solve_nonadapted(dummy, drift, f, None, grid, op=op, method="sweep")
    return sol.values


def trick_deterministic(f: AdaptedField, drift: AdaptedField | None, paths: BrownianPath, grid: SpatialGrid,
                        x0=None) -> TrickReport:
    """Identity for deterministic ``f, b`` over a batch of paths: one solve, ``Z`` terms absent."""
    if not f.deterministic or not (drift is None or drift.deterministic):
        raise ValueError("trick_deterministic needs deterministic f and b")
    tg = paths.grid
    N = tg.n_steps
    x0 = np.zeros(paths.dim) if x0 is None else np.asarray(x0, dtype=float)
    X = euler_maruyama(drift, x0, paths).values  # batch + (N+1, d)
    F = _deterministic_slices(f, drift, grid, tg)
    gradF = gradient_values(F[:N], grid)
    rhs = assemble_rhs(grid, X, paths.increments, tg.dt, F[0], gradF)
    lhs = _lhs_batch(f, paths, X)
    return TrickReport(lhs, rhs, np.zeros_like(lhs), N)


def _lhs_batch(f, paths, X):
    N, dt = paths.grid.n_steps, paths.grid.dt
    lhs = np.zeros(paths.batch_shape)
    for i in range(N):
        lhs = lhs + np.asarray(f.at(i, paths, X[..., i, None, :]))[..., 0] * dt
    return lhs


def classical_trick(f: AdaptedField, drift, paths: BrownianPath, grid: SpatialGrid, x0=None) -> np.ndarray:
    """Right-hand side ``-F(0, X_0) - sum grad F(t_i, X_i) . dW_i`` of the classical identity.

    Coded separately from :func:`assemble_rhs` as a cross-check.
    """
    tg = paths.grid
    N = tg.n_steps
    x0 = np.zeros(paths.dim) if x0 is None else np.asarray(x0, dtype=float)
    X = euler_maruyama(drift, x0, paths).values
    F = _deterministic_slices(f, drift, grid, tg)
    out = -interpolate(F[0], grid, X[..., 0, :])
    stoch = np.zeros(paths.batch_shape)
    for i in range(N):
        g = gradient_values(F[i], grid)
        for a in range(grid.d):
            stoch = stoch + interpolate(g[a], grid, X[..., i, :]) * paths.increments[..., i, a]
    return out - stoch


def deterministic_ladder(f, drift, grid, fine: BrownianPath, factors=(16, 4, 1), x0=None) -> LadderReport:
    """Same driving paths coarsened by each factor (coarse to fine)."""
    reps = [trick_deterministic(f, drift, fine.coarsen(k) if k > 1 else fine, grid, x0) for k in factors]
    return ladder(reps)


# --- random data ----------------------------------------------------------------------

def trick_path(f: AdaptedField, drift, path: BrownianPath, grid: SpatialGrid, ens: ContinuationEnsemble,
               path_id: int = 0, x0=None, op: HeatOperator | None = None):
    """``(lhs, rhs, rhs_se)`` for one path with adapted random data."""
    tg = path.grid
    N, dt = tg.n_steps, tg.dt
    op = op or HeatOperator(grid, dt)
    x0 = np.zeros(path.dim) if x0 is None else np.asarray(x0, dtype=float)
    X = euler_maruyama(drift, x0, path).values
    lhs = lhs_along(f, path, X)
    total = 0.0
    var = 0.0
    for i in range(N):
        pair = solve_pair(i, path, f, drift, ens, grid, want_Z=True, path_id=path_id, op=op)
        gF = pair.F.map(lambda g: gradient_values(g, grid)).groups
        Zg = pair.Z.groups
        dZ = pair.Z.map(lambda g: divergence_values(g, grid)).groups
        t = node_terms(grid, X[i: i + 2], path.increments[i: i + 1], dt, gF[None], Zg[None], dZ[None])[0]
        if i == 0:
            F0 = interpolate(pair.F.groups, grid, np.broadcast_to(X[0], (pair.F.groups.shape[0], grid.d)))
            t = t + F0
        total += float(t.mean())
        var += float(t.var(ddof=1) / t.size) if t.size > 1 else 0.0
    return lhs, -total, np.sqrt(var)


def verify_trick(f: AdaptedField, drift, grid: SpatialGrid, paths: BrownianPath, *, M: int = 256,
                 seed: int = 0, n_groups: int | None = None, x0=None, workers: int = 1) -> TrickReport:
    """Identity along every path of the batch; deterministic data takes the single-solve route."""
    if f.deterministic and (drift is None or drift.deterministic):
        return trick_deterministic(f, drift, paths, grid, x0)
    ens = ContinuationEnsemble(M, seed, n_groups)
    op = HeatOperator(grid, paths.grid.dt)
    P = paths.batch_shape[0]

    def one(p):
        return trick_path(f, drift, paths.select(p), grid, ens, path_id=p, x0=x0, op=op)

    out = map_ordered(one, range(P), workers)
    lhs, rhs, se = (np.array(v) for v in zip(*out))
    return TrickReport(lhs, rhs, se, paths.grid.n_steps, M)


def map_ordered(fn, items, workers: int = 1) -> list:
    """``[fn(x) for x in items]``, optionally on a thread pool; order is preserved."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def manufactured_identity(grid: SpatialGrid, path: BrownianPath, a: float = 0.3, c: float = 0.7,
                          x0: float = 0.1):
    """Manufactured slices that are linear in ``x`` (so interpolation is exact).

    ``F_i(x) = (T - t_i)(a + c x)(1 + W_i)``, ``Z_i(x) = (T - t_i)(c x - a) W_i``,
    ``F_N = 0``.  The values ``f_i(X_i)`` are defined by the discrete
    telescoping ``f_i dt = F_{i+1}(X_{i+1}) - F_i(X_i) - (grad F_i + Z_i)(X_i) dW_i
    - div Z_i(X_i) dt`` so the identity holds exactly.  Returns
    ``(lhs, rhs)`` where ``rhs`` comes from :func:`assemble_rhs`.
    """
    if grid.d != 1 or path.dim != 1:
        raise ValueError("manufactured identity is one-dimensional")
    tg = path.grid
    N, dt, T = tg.n_steps, tg.dt, tg.T
    t = tg.nodes
    x = grid.axis
    Wn = path.positions[:, 0]
    X = x0 + path.positions  # b = 0
    tau = (T - t)[:, None]
    F = tau * (a + c * x)[None, :] * (1 + Wn)[:, None]
    gradF = (tau * c * (1 + Wn)[:, None])[:N, None, :] * np.ones_like(x)
    Z = (tau * (c * x - a)[None, :] * Wn[:, None])[:N, None, :]
    divZ = (tau * c * Wn[:, None])[:N] * np.ones_like(x)

    def lin(i, xx):  # exact slice values at a point
        return (T - t[i]) * (a + c * xx) * (1 + Wn[i])

    dW = path.increments[:, 0]
    f_vals = np.empty(N)
    for i in range(N):
        Xi = X[i, 0]
        vel = (T - t[i]) * c * (1 + Wn[i]) + (T - t[i]) * (c * Xi - a) * Wn[i]
        f_vals[i] = (lin(i + 1, X[i + 1, 0]) - lin(i, Xi) - vel * dW[i] - (T - t[i]) * c * Wn[i] * dt) / dt
    lhs = float(np.sum(f_vals) * dt)
    rhs = float(assemble_rhs(grid, X, path.increments, dt, F[0], gradF, Z, divZ))
    return lhs, rhs


# --- regularisation scans -----------------------------------------------------------------

LAGS = (1, 2, 4, 8, 16)


@dataclass(frozen=True, eq=False)
class RegularityReport:
    alpha_in: float
    r2_in: float
    alpha_out: np.ndarray  # per path
    r2_out: np.ndarray
    n_paths: int
    lags: tuple = LAGS
    max_identity_error: float | None = None  # counterexample only: max |I - T f|

    @property
    def gain(self) -> float:
        return float(np.median(self.alpha_out) - self.alpha_in)

    @property
    def low_confidence(self) -> bool:
        return bool(np.median(self.r2_out) < 0.9)


def time_average_field(f: AdaptedField, path: BrownianPath, X: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    """``I(x) = sum_i f(t_i, x + X_i) dt`` evaluated exactly at the grid nodes."""
    N, dt = path.grid.n_steps, path.grid.dt
    pts = grid.points
    acc = np.zeros(pts.shape[0])
    for i in range(N):
        acc += np.asarray(f.at(i, path, pts + X[i])).reshape(-1) * dt
    return acc.reshape(grid.shape)


def regularity_scan(f: AdaptedField, drift, grid: SpatialGrid, paths: BrownianPath, lags=LAGS, x0=None,
                    workers: int = 1) -> RegularityReport:
    """Hölder exponent of ``x -> I(x)`` per path against that of the input profile."""
    if f.profile is None:
        raise ValueError(f"field {f.name!r} has no spatial profile to compare against")
    prof = GridField(grid, f.profile.value(grid.points).reshape(grid.shape))
    est_in = holder_exponent(prof, lags)
    x0 = np.zeros(paths.dim) if x0 is None else np.asarray(x0, dtype=float)
    P = paths.batch_shape[0]
    counter = f.name == "shifted_counterexample" and drift is None

    def one(p):
        path = paths.select(p)
        X = euler_maruyama(drift, x0, path).values - x0
        I = time_average_field(f, path, X, grid)
        est = holder_exponent(GridField(grid, I), lags)
        err = float(np.max(np.abs(I - path.grid.T * prof.values))) if counter else None
        return est.exponent, est.regression_r2, err

    out = map_ordered(one, range(P), workers)
    a, r2, err = zip(*out)
    max_err = max(err) if counter else None
    return RegularityReport(est_in.exponent, est_in.regression_r2, np.array(a), np.array(r2), P, tuple(lags),
                            max_err)


# --- smoothing of the perturbed heat integral -----------------------------------------------

@dataclass(frozen=True)
class DbleHeatReport:
    n_steps: tuple
    ratios: tuple
    stable: bool  # max/min ratio within a factor 2


def dbleheat_ratio(f: AdaptedField, y_field: AdaptedField, path: BrownianPath, grid: SpatialGrid,
                   p: float = 4.0, q: float = 4.0, m: float = 3.0, op: HeatOperator | None = None) -> float:
    """``|| sum_s P_s f(s, . + Y_s) D_0 Y_s ds ||_{W^{m,p}} / || f ||_{L^q L^p}`` at ``t = 0``."""
    tg = path.grid
    N, dt = tg.n_steps, tg.dt
    op = op or HeatOperator(grid, dt)
    pts = grid.points
    acc = np.zeros(grid.shape)
    fnorms = []
    for j in range(N):
        g = np.asarray(f.at(j, path, pts)).reshape(grid.shape)
        fnorms.append(lp_norm(GridField(grid, g), p))
        if j == 0:
            continue
        kern = float(np.asarray(y_field.shift_kernel(0, j, path.prefix(j))))
        if kern == 0.0:
            continue
        Y = np.asarray(y_field.shift(j, path.prefix(j))).reshape(-1)
        shifted = np.asarray(f.at(j, path, pts + Y)).reshape(grid.shape)
        acc += op.apply(shifted, j * dt) * kern * dt
    fn = float((np.sum(np.asarray(fnorms) ** q) * dt) ** (1 / q))
    num = sobolev_norm(GridField(grid, acc), m, p)
    return 0.0 if num == 0.0 else num / fn


def dbleheat_check(f: AdaptedField, y_field: AdaptedField, fine: BrownianPath, grid: SpatialGrid,
                   factors=(16, 4, 1), p: float = 4.0, q: float = 4.0) -> DbleHeatReport:
    """Ratio over a refinement ladder of the same path; refuses kernels that do not vanish on the diagonal."""
    if not f.deterministic:
        raise ValueError("dbleheat_check expects a deterministic f")
    if y_field.shift is None or y_field.shift_kernel is None:
        raise ValueError(f"field {y_field.name!r} carries no perturbation Y with a kernel")
    N = fine.grid.n_steps
    probe = range(0, N - 1, max(1, N // 16))
    diag = max(abs(float(np.asarray(y_field.shift_kernel(k, k + 1, fine.prefix(k + 1))))) for k in probe)
    if diag > 1e-12:
        raise PreconditionError(
            "kernel integrability precondition fails: D_t Y_s does not vanish as s -> t "
            f"(|D_t Y_t+| = {diag:.3g}); the double heat estimate does not apply")
    ratios = []
    steps = []
    for k in factors:
        path = fine.coarsen(k) if k > 1 else fine
        ratios.append(dbleheat_ratio(f, y_field, path, grid, p, q))
        steps.append(path.grid.n_steps)
    r = np.asarray(ratios)
    stable = bool(np.all(r == 0) or (np.min(r) > 0 and np.max(r) / np.min(r) <= 2.0))
    return DbleHeatReport(tuple(steps), tuple(ratios), stable)


def sample_paths(T: float, n_steps: int, dim: int, seed: int, n_paths: int):
    from .stochastics import TimeGrid

    return sample_brownian(TimeGrid(T, n_steps), dim, seed, n_paths)
