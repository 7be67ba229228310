"""Adapted solution pair ``(F, Z)`` by nested Monte Carlo over Brownian continuations.

At node ``t_i`` with realised prefix ``W_(t_i)``, every continuation ``m``
completes the path on ``(t_i, T]`` and yields the pathwise solution ``U^m``
of the backward equation (zero terminal data, source ``f``).  Then

* ``F(t_i) = E[U_i | F_i]`` is the continuation average;
* ``Z(t_i) = E[D_i U_i | F_i]``, where ``D_i U`` solves the linearised
  sweep with sources ``m_f(i, j) f'_j`` and ``-m_b(i, j) b'_j . grad U_j``;
* the regression oracle uses the discrete Gaussian integration by parts
  ``E[D_i G | F_i] = Cov(G, dW_i) / dt``, i.e. ``Z_reg = Cov_m(U_i, dW_i) / dt``.

Continuations are split into ``K`` groups.  Each group gives one estimate;
the reported value is the mean over groups and the SE is their standard
deviation over ``sqrt(K)``.  When the drift is deterministic the solve is a
fixed linear map, so sources are averaged inside each group before a single
batched sweep over the ``K`` group means.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fokker_planck import drift_dot_grad, solve_nonadapted, transport_step
from .grid_fields import GridField, SpatialGrid, divergence_values, gradient_values
from .heat_semigroup import HeatOperator
from .random_fields import AdaptedField, NonSeparableFieldError
from .stochastics import CONTINUATION_STREAM, BrownianPath, TimeGrid, rng_stream


@dataclass(frozen=True)
class ContinuationEnsemble:
    """``M`` fresh Brownian futures per node, seeded by ``(seed, path_id, t-index, *extra)``."""

    M: int
    seed: int
    n_groups: int | None = None

    def __post_init__(self):
        if self.M < 2:
            raise ValueError("continuation ensemble needs M >= 2")
        if self.n_groups is not None and not 2 <= self.n_groups <= self.M:
            raise ValueError("n_groups must lie in [2, M]")

    @property
    def K(self) -> int:
        # batch means need >= 2 groups; groups of >= 4 keep the in-group regression usable
        return self.n_groups or min(32, max(2, self.M // 4))

    def increments(self, grid: TimeGrid, i: int, dim: int, path_id: int = 0, extra=()) -> np.ndarray:
        rng = rng_stream(self.seed, CONTINUATION_STREAM, path_id, i, *extra)
        return rng.standard_normal((self.M, grid.n_steps - i, dim)) * np.sqrt(grid.dt)

    def continue_path(self, prefix: BrownianPath, path_id: int = 0, extra=()) -> BrownianPath:
        if prefix.batch_shape:
            raise ValueError("continuations extend a single prefix")
        i = prefix.n_known
        return prefix.extend(self.increments(prefix.grid, i, prefix.dim, path_id, extra))

    def groups(self) -> list:
        return np.array_split(np.arange(self.M), self.K)


@dataclass(frozen=True, eq=False)
class Estimate:
    """Group-level estimates ``groups`` (shape ``(K,) + slice``) with mean and SE."""

    groups: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        return self.groups.mean(axis=0)

    @property
    def se(self) -> np.ndarray:
        K = self.groups.shape[0]
        if K < 2:
            return np.zeros(self.groups.shape[1:])
        return self.groups.std(axis=0, ddof=1) / np.sqrt(K)

    def map(self, fn) -> Estimate:
        """Apply a linear map per group (so the SE follows)."""
        return Estimate(fn(self.groups))

    @staticmethod
    def exact(value: np.ndarray) -> Estimate:
        # two identical groups: mean = value, SE = 0
        v = np.asarray(value, dtype=float)
        return Estimate(np.stack([v, v]))


@dataclass(frozen=True, eq=False)
class SolutionPair:
    """``F`` and ``Z`` slices at node ``i`` for one prefix, with MC standard errors."""

    i: int
    grid: SpatialGrid
    F: Estimate
    Z: Estimate | None = None
    Z_reg: Estimate | None = None

    @property
    def F_field(self) -> GridField:
        return GridField(self.grid, self.F.mean)

    @property
    def Z_field(self) -> GridField:
        return GridField(self.grid, self.Z.mean, vector=True)


def _check_structures(f: AdaptedField, drift: AdaptedField | None):
    if f.structure is None:
        raise NonSeparableFieldError(f"non-separable field {f.name!r}: Z needs a separable Malliavin structure")
    if drift is not None and drift.structure is None:
        raise NonSeparableFieldError(f"non-separable drift {drift.name!r}: Z needs a separable Malliavin structure")


def solve_pair(i: int, prefix: BrownianPath, f: AdaptedField, drift: AdaptedField | None,
               ens: ContinuationEnsemble, grid: SpatialGrid, *, want_Z: bool = True, want_reg: bool = False,
               path_id: int = 0, extra=(), op: HeatOperator | None = None) -> SolutionPair:
    """Estimate ``F(t_i)`` (and optionally ``Z``, ``Z_reg``) on a common continuation ensemble."""
    tg = prefix.grid
    N, dt = tg.n_steps, tg.dt
    if prefix.n_known < i:
        raise ValueError(f"prefix knows {prefix.n_known} increments, node {i} requested")
    prefix = prefix.prefix(i)
    if want_Z or want_reg:
        if prefix.dim != 1 or grid.d != 1:
            raise NotImplementedError("Z estimation is implemented for one-dimensional noise and space")
    if want_Z:
        _check_structures(f, drift)
    op = op or HeatOperator(grid, dt)
    zshape = (grid.d,) + grid.shape
    det_drift = drift is None or drift.deterministic

    if (f.deterministic and det_drift) or i == N:
        F = np.zeros(grid.shape)
        if i < N:
            sol, _ = solve_nonadapted(prefix.extend(np.zeros((N - i, prefix.dim))), drift, f, None, grid,
                                      start=i, op=op, method="sweep")
            F = sol.at(i)
        zero = Estimate.exact(np.zeros(zshape))
        return SolutionPair(i, grid, Estimate.exact(F), zero if want_Z else None, zero if want_reg else None)

    paths = ens.continue_path(prefix, path_id, extra)
    paths.positions  # cache once, reused by every prefix view
    groups = _Groups(ens.groups(), paths.increments[:, i, 0], dt)
    if det_drift:
        return _pair_linear(i, paths, f, drift, grid, op, groups, want_Z, want_reg, zshape)
    return _pair_samplewise(i, paths, f, drift, grid, op, groups, want_Z, want_reg, zshape)


class _Groups:
    """Per-group weighted sums over continuations (mean weights and regression weights)."""

    def __init__(self, groups, dW, dt):
        self.K = len(groups)
        self.M = dW.shape[0]
        self.mean_w = np.empty(self.M)
        self.reg_w = np.zeros(self.M)
        for idx in groups:
            self.mean_w[idx] = 1.0 / idx.size
            if idx.size > 1:
                self.reg_w[idx] = (dW[idx] - dW[idx].mean()) / ((idx.size - 1) * dt)
        sizes = {idx.size for idx in groups}
        self.equal = len(sizes) == 1 and all(idx[0] == k * idx.size for k, idx in enumerate(groups))
        if not self.equal:
            self.member = np.zeros((self.K, self.M))
            for k, idx in enumerate(groups):
                self.member[k, idx] = 1.0

    def reduce(self, w, X):
        """``sum_{m in group} w_m X_m`` for every group; ``X`` has shape ``(M,) + rest``."""
        wX = w.reshape((-1,) + (1,) * (X.ndim - 1)) * X
        if self.equal:
            return wX.reshape((self.K, self.M // self.K) + X.shape[1:]).sum(axis=1)
        return np.tensordot(self.member, wX, axes=1)

    def mean(self, X):
        return self.reduce(self.mean_w, X)

    def regress(self, X):
        return self.reduce(self.reg_w, X)


def _pair_linear(i, paths, f, drift, grid, op, groups, want_Z, want_reg, zshape):
    """Deterministic drift: average sources per group, then one batched sweep."""
    tg = paths.grid
    N, dt = tg.n_steps, tg.dt
    K = groups.K
    unb = paths.select(0)  # drift is deterministic: any path serves
    U = np.zeros((K,) + grid.shape)
    R = np.zeros((K,) + grid.shape) if want_reg else None
    DU = np.zeros((K,) + grid.shape) if want_Z else None
    st = f.structure
    for j in range(N - 1, i - 1, -1):
        b = None if drift is None else drift.eval_values(j + 1, unb, grid)
        fj = f.eval_values(j, paths, grid)
        U = transport_step(op, U, dt, b) - dt * groups.mean(fj)
        if want_reg:
            R = transport_step(op, R, dt, b) - dt * groups.regress(fj)
        if want_Z:
            DU = transport_step(op, DU, dt, b)
            if j > i:
                m = st.m(i, j, paths)
                if np.any(m):
                    if st.f_prime.deterministic:
                        fp = st.f_prime.eval_values(j, unb, grid)
                        DU = DU - dt * groups.mean(m)[:, None] * fp[None]
                    else:
                        DU = DU - dt * groups.reduce(groups.mean_w * m, st.f_prime.eval_values(j, paths, grid))
    F = Estimate(U)
    Z = Estimate(DU.reshape((K,) + zshape)) if want_Z else None
    Zr = Estimate(R.reshape((K,) + zshape)) if want_reg else None
    return SolutionPair(i, grid, F, Z, Zr)


def _pair_samplewise(i, paths, f, drift, grid, op, groups, want_Z, want_reg, zshape):
    """Random drift: solve every continuation, then aggregate per group."""
    tg = paths.grid
    N, dt = tg.n_steps, tg.dt
    M, K = groups.M, groups.K
    U = np.zeros((M,) + grid.shape)
    DU = np.zeros((M,) + grid.shape) if want_Z else None
    fst, bst = f.structure, drift.structure
    for j in range(N - 1, i - 1, -1):
        b = drift.eval_values(j + 1, paths, grid)
        if want_Z:
            r = None
            mb = bst.m(i, j + 1, paths)
            if np.any(mb):
                bp = bst.f_prime.eval_values(j + 1, paths, grid)
                r = -mb[:, None] * drift_dot_grad(bp, U, grid)
            DU = transport_step(op, DU, dt, b, r)
            if j > i:
                m = fst.m(i, j, paths)
                if np.any(m):
                    DU = DU - dt * m[:, None] * fst.f_prime.eval_values(j, paths, grid)
        U = transport_step(op, U, dt, b) - dt * f.eval_values(j, paths, grid)
    F = Estimate(groups.mean(U))
    Z = Estimate(groups.mean(DU).reshape((K,) + zshape)) if want_Z else None
    Zr = Estimate(groups.regress(U).reshape((K,) + zshape)) if want_reg else None
    return SolutionPair(i, grid, F, Z, Zr)


def solve_F(i, prefix, f, drift, ens, grid, **kw) -> Estimate:
    """``E[-int_t^T P^X_{t,r} f(r) dr | F_t]`` at node ``i``."""
    return solve_pair(i, prefix, f, drift, ens, grid, want_Z=False, **kw).F


def solve_Z(i, prefix, f, drift, ens, grid, **kw) -> Estimate:
    """Malliavin representation of ``Z(t_i)`` (vector field, one component per noise dimension)."""
    return solve_pair(i, prefix, f, drift, ens, grid, want_Z=True, **kw).Z


def brownian_bridge_refine(path: BrownianPath, seed: int) -> BrownianPath:
    """Halve the step by sampling midpoints from the Brownian bridge."""
    rng = rng_stream(seed, CONTINUATION_STREAM, 2 ** 31 - 1)
    dt = path.grid.dt
    inc = path.increments
    mid = inc / 2 + rng.standard_normal(inc.shape) * np.sqrt(dt / 4)
    out = np.stack([mid, inc - mid], axis=-2).reshape(inc.shape[:-2] + (2 * inc.shape[-2], inc.shape[-1]))
    return BrownianPath(path.grid.refine(2), out)


@dataclass(frozen=True, eq=False)
class RegressionZ:
    estimate: Estimate
    biased: bool | None = None
    shift: float | None = None


def z_regression_oracle(i, prefix, f, drift, ens, grid, *, check_bias: bool = False, **kw) -> RegressionZ:
    """Regression estimate ``Cov_m(U_i, dW_i) / dt`` of ``Z(t_i)`` over continuations.

    With ``check_bias`` the estimate is recomputed on the bridge-refined
    grid (half step) and flagged when the two differ by more than
    3 combined SE in the field ``L^2`` sense.
    """
    pair = solve_pair(i, prefix, f, drift, ens, grid, want_Z=False, want_reg=True, **kw)
    if not check_bias:
        return RegressionZ(pair.Z_reg)
    fine = brownian_bridge_refine(prefix.prefix(i), ens.seed)
    pair2 = solve_pair(2 * i, fine, f, drift, ens, grid, want_Z=False, want_reg=True, **kw)
    diff = l2_agreement(pair.Z_reg, pair2.Z_reg, grid)
    return RegressionZ(pair.Z_reg, biased=not diff.passed, shift=diff.statistic)


@dataclass(frozen=True)
class Agreement:
    statistic: float  # ||diff||_2
    bound: float  # 3 ||combined SE||_2 (+ round-off floor)
    passed: bool


def l2_agreement(a: Estimate, b: Estimate, grid: SpatialGrid, k: float = 3.0) -> Agreement:
    """Field-level test ``||mean_a - mean_b||_2 <= k ||sqrt(se_a^2 + se_b^2)||_2``.

    A round-off floor of ``1e-12`` times the field scale covers estimates
    whose SE is exactly zero.
    """
    h = grid.cell_volume
    diff = float(np.sqrt(np.sum((a.mean - b.mean) ** 2) * h))
    se = float(np.sqrt(np.sum(a.se ** 2 + b.se ** 2) * h))
    scale = float(np.sqrt(np.sum(a.mean ** 2 + b.mean ** 2) * h))
    bound = k * se + 1e-12 * max(scale, 1.0)
    return Agreement(diff, bound, diff <= bound)


# --- consistency checks --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TowerResult:
    direct: Estimate
    two_stage: Estimate
    agreement: Agreement


def tower_check(i: int, i2: int, prefix: BrownianPath, f, drift, grid: SpatialGrid, *, M_direct: int, M1: int,
                M2: int, seed: int, path_id: int = 0) -> TowerResult:
    """Direct ``F(t_i)`` against ``E[ backward solve from t_i2 with terminal F(t_i2) | F_i ]``.

    The two-stage estimate draws ``M1`` outer continuations to ``t_i2``,
    estimates ``F(t_i2)`` on each with ``M2`` inner continuations, and solves
    back to ``t_i`` along the outer continuation with source ``f``.
    """
    if not i < i2 <= prefix.grid.n_steps:
        raise ValueError("need i < i2 <= n_steps")
    tg = prefix.grid
    op = HeatOperator(grid, tg.dt)
    direct = solve_F(i, prefix, f, drift, ContinuationEnsemble(M_direct, seed), grid, path_id=path_id,
                     extra=(0,), op=op)
    outer = rng_stream(seed, CONTINUATION_STREAM, path_id, i, 1).standard_normal((M1, i2 - i, prefix.dim))
    outer = outer * np.sqrt(tg.dt)
    base = prefix.prefix(i)
    inner_ens = ContinuationEnsemble(M2, seed)
    vals = []
    for m in range(M1):
        mid = base.extend(outer[m])
        Fi2 = solve_F(i2, mid, f, drift, inner_ens, grid, path_id=path_id, extra=(2, m), op=op).mean
        full = mid.extend(np.zeros((tg.n_steps - i2, prefix.dim)))
        sol, _ = solve_nonadapted(full, drift, f, Fi2, grid, start=i, stop=i2, op=op, method="sweep")
        vals.append(sol.at(i))
    two = Estimate(np.stack(vals))
    return TowerResult(direct, two, l2_agreement(direct, two, grid))


def bspde_mild_residual(pairs: list, path: BrownianPath, f, drift, grid: SpatialGrid, p: float = 2.0,
                        op: HeatOperator | None = None, times=None) -> float:
    """``sup_i || F_i + sum_{j>=i} P^X_{i,j} (f_j dt + Z_j dW_j) ||_p`` along one realised path.

    ``pairs[i]`` is the :class:`SolutionPair` at node ``i`` for the prefix
    of ``path``; the last node carries ``F = 0``.  ``times`` restricts the
    supremum to the nodes at those times (e.g. the nodes shared by a
    refinement ladder).
    """
    from .grid_fields import _lp

    tg = path.grid
    N, dt = tg.n_steps, tg.dt
    op = op or HeatOperator(grid, dt)
    keep = set(range(N + 1)) if times is None else {int(round(t / dt)) for t in times}
    S = np.zeros(grid.shape)
    worst = float(np.max(_lp(np.abs(pairs[N].F.mean), grid, p))) if N in keep else 0.0
    for i in range(N - 1, -1, -1):
        b = None if drift is None else drift.eval_values(i + 1, path, grid)
        Zi = pairs[i].Z.mean[0]
        S = transport_step(op, S, dt, b) + dt * f.eval_values(i, path, grid) + Zi * path.increments[i, 0]
        if i in keep:
            worst = max(worst, float(_lp(np.abs(pairs[i].F.mean + S), grid, p)))
    return worst


def gradient_estimate(est: Estimate, grid: SpatialGrid) -> Estimate:
    return est.map(lambda g: gradient_values(g, grid))


def divergence_estimate(est: Estimate, grid: SpatialGrid) -> Estimate:
    return est.map(lambda g: divergence_values(g, grid))
