"""Pathwise backward Fokker-Planck solver along a frozen Brownian path.

Sign convention: ``F`` solves ``d_t F + (1/2) Delta F + b . grad F = f`` with
``F(T) = phi``.  For ``f, phi`` given, the mild form reads

    F(t) = P_{T-t} phi - int_t^T P_{s-t} [f(s) - b(s) . grad F(s)] ds.

Time discretisation (backward sweep, ``i = stop-1, ..., start``)::

    F_i = P_dt( F_{i+1} + dt (b_{i+1} . grad F_{i+1} - r_{i+1}) ) - dt f_i

The source ``f`` is taken at the left node, which makes the drift-free
solve identical to the left-point heat convolution.  The transport term is
taken at the node already known in the backward sweep; taking it at the
unknown node would make every Picard step amplify the highest resolved
mode by ``dt |b| k_max``.  ``r`` is an optional extra source sampled on the
same nodes as the transport term (used by the linearised equations for
Malliavin derivatives).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.fft as sfft

from .grid_fields import GridField, SpatialGrid, _lp
from .heat_semigroup import HeatOperator
from .random_fields import AdaptedField, malliavin_derivative_values
from .stochastics import BrownianPath


class PicardDivergenceError(RuntimeError):
    def __init__(self, message, ratios):
        super().__init__(f"{message}; ratio history {[round(r, 4) for r in ratios]}")
        self.ratios = list(ratios)


@dataclass(frozen=True, eq=False)
class SpaceTimeField:
    """Slices ``F(t_i)`` for ``i = start..stop``; ``values[i - start]`` is slice ``i``."""

    grid: SpatialGrid
    dt: float
    start: int
    values: np.ndarray  # (stop - start + 1,) + batch + grid.shape

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FloatingPointError("space-time field has non-finite slices")

    @property
    def stop(self) -> int:
        return self.start + self.values.shape[0] - 1

    def at(self, i: int) -> np.ndarray:
        if not self.start <= i <= self.stop:
            raise IndexError(f"time index {i} outside [{self.start}, {self.stop}]")
        return self.values[i - self.start]

    def slice(self, i: int) -> GridField:
        return GridField(self.grid, self.at(i))


@dataclass
class PicardReport:
    iterations: int = 0
    diffs: list = dc_field(default_factory=list)
    ratios: list = dc_field(default_factory=list)
    residual: float = float("nan")
    drift_sup: np.ndarray | None = None  # sup_x |b(t_i, .)| at the nodes the transport term uses

    def drift_lq(self, q: float, dt: float) -> float:
        """Discrete ``L^q`` norm in time of ``sup_x |b|``."""
        if self.drift_sup is None:
            return 0.0
        return float((np.sum(self.drift_sup ** q) * dt) ** (1 / q))


# --- building blocks ----------------------------------------------------------

def as_source(src, path: BrownianPath | None, grid: SpatialGrid):
    """Normalise a source (None, AdaptedField, array indexed by node, or callable) to ``j -> values``."""
    if src is None:
        return lambda j: None
    if isinstance(src, AdaptedField):
        return lambda j: src.eval_values(j, path, grid)
    if callable(src):
        return src
    arr = np.asarray(src, dtype=float)
    return lambda j: arr[j]


def drift_dot_grad(b: np.ndarray | None, F: np.ndarray, grid: SpatialGrid) -> np.ndarray | None:
    """``b . grad F`` with ``b`` of shape ``batch + (d,) + grid.shape``."""
    if b is None:
        return None
    spec = sfft.rfftn(F, axes=grid.axes)
    caxis = -grid.d - 1
    out = 0.0
    for a, (k, keep) in enumerate(zip(grid.rwavenumbers, grid._rnyquist)):
        dF = sfft.irfftn(spec * (1j * k * keep), s=grid.shape, axes=grid.axes)
        out = out + np.take(b, a, axis=caxis) * dF
    return out


def transport_step(op: HeatOperator, F_next: np.ndarray, dt: float, b_next=None, r_next=None,
                   transport_of=None) -> np.ndarray:
    """``P_dt(F_next + dt (b . grad G - r))`` where ``G = transport_of`` (default ``F_next``)."""
    g = op.grid
    inner = F_next
    G = F_next if transport_of is None else transport_of
    bg = drift_dot_grad(b_next, G, g)
    if bg is not None:
        inner = inner + dt * bg
    if r_next is not None:
        inner = inner - dt * r_next
    return op.apply(inner, dt)


def _sweep(op, dt, start, stop, phi, f_at, b_at, r_at, F_old=None):
    """One backward sweep.  Transport acts on ``F_old`` (Picard) or on the fresh slice."""
    out = [None] * (stop - start + 1)
    out[-1] = np.asarray(phi, dtype=float)
    for i in range(stop - 1, start - 1, -1):
        nxt = out[i + 1 - start]
        trans = nxt if F_old is None else F_old[i + 1 - start]
        Fi = transport_step(op, nxt, dt, b_at(i + 1), r_at(i + 1), transport_of=trans)
        fi = f_at(i)
        if fi is not None:
            Fi = Fi - dt * fi
        out[i - start] = Fi
    return np.stack(out)


def _sup_dist(A, B, grid, p):
    return float(np.max(_lp(np.abs(A - B), grid, p)))


def solve_nonadapted(path: BrownianPath, drift: AdaptedField | None, f, phi, grid: SpatialGrid, *,
                     start: int = 0, stop: int | None = None, tol: float = 1e-8, max_iter: int = 50,
                     p: float = 2.0, op: HeatOperator | None = None, right_source=None,
                     method: str = "picard"):
    """Solve the backward equation on ``[t_start, t_stop]`` along ``path``.

    The solver may read the whole path: the solution is not adapted.
    ``f`` and ``right_source`` accept an ``AdaptedField``, an array indexed by
    time node, a callable ``j -> values`` or ``None``.  ``phi`` is the
    terminal slice at ``t_stop`` (a GridField, an array, or ``None`` for 0).

    ``method="picard"`` iterates the mild map (each iteration is one sweep
    with the previous iterate in the transport term) until the sup-in-time
    ``L^p`` step is ``<= tol``; ``method="sweep"`` solves the same
    triangular fixed point by forward substitution in a single pass.

    Returns ``(SpaceTimeField, PicardReport)``.
    """
    tg = path.grid
    stop = tg.n_steps if stop is None else stop
    if not 0 <= start <= stop <= tg.n_steps:
        raise ValueError(f"need 0 <= start <= stop <= n_steps, got {start}, {stop}")
    if stop > path.n_known:
        raise ValueError("path does not cover the solve interval")
    dt = tg.dt
    op = op or HeatOperator(grid, dt)
    batch = path.batch_shape
    if phi is None:
        phi = np.zeros(batch + grid.shape)
    phi = phi.values if isinstance(phi, GridField) else np.asarray(phi, dtype=float)
    if not np.all(np.isfinite(phi)):
        raise ValueError("terminal condition has non-finite values")

    f_src = as_source(f, path, grid)
    r_src = as_source(right_source, path, grid)
    report = PicardReport()

    if drift is None:
        b_at = lambda j: None
    else:
        b_cache = {}

        def b_at(j):
            if j not in b_cache:
                b = drift.eval_values(j, path, grid)
                if not np.all(np.isfinite(b)):
                    raise FloatingPointError(f"drift non-finite at time index {j}")
                b_cache[j] = b
            return b_cache[j]

    f_cache = {}

    def f_at(j):
        if j not in f_cache:
            f_cache[j] = f_src(j)
        return f_cache[j]

    if drift is not None:
        report.drift_sup = np.array([float(np.max(np.abs(b_at(j)))) for j in range(start + 1, stop + 1)])

    if drift is None or method == "sweep":
        F = _sweep(op, dt, start, stop, phi, f_at, b_at, r_src)
        report.iterations = 1
        report.residual = 0.0 if drift is None else mild_residual_values(
            F, op, dt, start, stop, phi, f_at, b_at, r_src, p)
        return SpaceTimeField(grid, dt, start, F), report
    if method != "picard":
        raise ValueError(f"unknown method {method!r}")

    F = np.zeros((stop - start + 1,) + np.broadcast_shapes(batch, phi.shape[: phi.ndim - grid.d]) + grid.shape)
    above = 0
    for it in range(1, max_iter + 1):
        F_new = _sweep(op, dt, start, stop, phi, f_at, b_at, r_src, F_old=F)
        diff = _sup_dist(F_new, F, grid, p)
        report.diffs.append(diff)
        if len(report.diffs) > 1:
            prev = report.diffs[-2]
            ratio = diff / prev if prev > 0 else 0.0
            report.ratios.append(ratio)
            above = above + 1 if ratio > 1 else 0
            if above >= 2:
                raise PicardDivergenceError("Picard iteration is not contracting", report.ratios)
        F = F_new
        report.iterations = it
        if diff <= tol:
            break
    else:
        raise PicardDivergenceError(f"no convergence to tol={tol} in {max_iter} iterations", report.ratios)
    report.residual = mild_residual_values(F, op, dt, start, stop, phi, f_at, b_at, r_src, p)
    return SpaceTimeField(grid, dt, start, F), report


def mild_residual_values(F, op, dt, start, stop, phi, f_at, b_at, r_at, p=2.0) -> float:
    """``sup_i || F_i - (mild map applied to F)_i ||_p``."""
    G = _sweep(op, dt, start, stop, phi, f_at, b_at, r_at, F_old=F)
    return _sup_dist(G, F, op.grid, p)


def mild_residual(sol: SpaceTimeField, path: BrownianPath, drift, f, phi=None, p: float = 2.0,
                  op: HeatOperator | None = None) -> float:
    """Defect of ``sol`` in the discretised mild equation, sup over nodes of the ``L^p`` norm."""
    grid = sol.grid
    op = op or HeatOperator(grid, sol.dt)
    f_src = as_source(f, path, grid)
    b_at = (lambda j: None) if drift is None else (lambda j: drift.eval_values(j, path, grid))
    phi = sol.at(sol.stop) if phi is None else (phi.values if isinstance(phi, GridField) else phi)
    return mild_residual_values(sol.values, op, sol.dt, sol.start, sol.stop, phi, f_src, b_at,
                                lambda j: None, p)


def differential_residual(sol: SpaceTimeField, path: BrownianPath, drift, f, p: float = 2.0) -> float:
    """``sup_i || (F_{i+1} - F_{i-1}) / 2dt + (1/2) Delta F_i + b_i . grad F_i - f_i ||_p`` over interior nodes."""
    from .grid_fields import laplacian_values

    grid, dt = sol.grid, sol.dt
    f_src = as_source(f, path, grid)
    worst = 0.0
    for i in range(sol.start + 1, sol.stop):
        Fi = sol.at(i)
        r = (sol.at(i + 1) - sol.at(i - 1)) / (2 * dt) + 0.5 * laplacian_values(Fi, grid)
        if drift is not None:
            r = r + drift_dot_grad(drift.eval_values(i, path, grid), Fi, grid)
        fi = f_src(i)
        if fi is not None:
            r = r - fi
        worst = max(worst, float(np.max(_lp(np.abs(r), grid, p))))
    return worst


def px_apply(path: BrownianPath, drift, s: int, t: int, phi, grid: SpatialGrid,
             op: HeatOperator | None = None, method: str = "sweep") -> GridField:
    """``P^X_{s,t} phi``: the source-free backward solve from ``t`` to ``s``."""
    if s > t:
        raise ValueError("px_apply needs s <= t")
    vals = phi.values if isinstance(phi, GridField) else np.asarray(phi, dtype=float)
    if s == t:
        return GridField(grid, vals.copy())
    sol, _ = solve_nonadapted(path, drift, None, vals, grid, start=s, stop=t, op=op, method=method)
    return GridField(grid, sol.at(s))


def malliavin_commutator(path: BrownianPath, drift: AdaptedField | None, k: int, t: int, phi, grid: SpatialGrid,
                         dphi=None, op: HeatOperator | None = None) -> GridField:
    """``D_k P^X_{t,T} phi`` through the linearised sweep.

    Equals ``P^X_{t,T} D_k phi`` plus the transport contribution
    ``int_t^T P^X_{t,r} (D_k b(r) . grad P^X_{r,T} phi) dr`` in the same
    discretisation as :func:`solve_nonadapted`.  ``dphi`` is ``D_k phi``
    (``None`` for deterministic ``phi``).
    """
    tg = path.grid
    N = tg.n_steps
    dt = tg.dt
    op = op or HeatOperator(grid, dt)
    if drift is not None and drift.structure is None:
        raise ValueError(f"drift {drift.name!r} is not separable")
    phi = phi.values if isinstance(phi, GridField) else np.asarray(phi, dtype=float)
    U = phi
    DU = np.zeros_like(phi) if dphi is None else (dphi.values if isinstance(dphi, GridField) else dphi)
    random_b = drift is not None and not drift.deterministic
    for i in range(N - 1, t - 1, -1):
        b = None if drift is None else drift.eval_values(i + 1, path, grid)
        r = None
        if random_b:
            Db = malliavin_derivative_values(drift, k, i + 1, path, grid)
            r = -drift_dot_grad(Db, U, grid)
        DU = transport_step(op, DU, dt, b, r)
        U = transport_step(op, U, dt, b)
    return GridField(grid, DU)
