"""Spectral heat semigroup ``P_tau = exp(tau Delta / 2)`` on a periodic grid."""

from __future__ import annotations

import threading
from dataclasses import dataclass
from itertools import product

import numpy as np
import scipy.fft as sfft

from .grid_fields import GridField, SpatialGrid, _lp


class HeatOperator:
    """Fourier-multiplier heat semigroup with a thread-safe multiplier cache.

    When ``dt`` is given, elapsed times are quantised to multiples of ``dt``
    for the cache key (the multiplier itself uses the exact ``tau``), which
    bounds the cache to ``n_steps + 1`` entries during a backward sweep.
    """

    def __init__(self, grid: SpatialGrid, dt: float | None = None):
        self.grid = grid
        self.dt = dt
        self._cache: dict = {}
        self._lock = threading.Lock()

    def _key(self, tau: float):
        if self.dt:
            q = tau / self.dt
            if abs(q - round(q)) < 1e-9:
                return ("q", int(round(q)))
        return ("t", float(tau))

    def multiplier(self, tau: float, full: bool = False) -> np.ndarray:
        if tau < 0 or not np.isfinite(tau):
            raise ValueError(f"elapsed time must be finite and >= 0, got {tau}")
        key = self._key(tau) + (full,)
        m = self._cache.get(key)
        if m is None:
            k2 = self.grid.k2 if full else self.grid.rk2
            m = np.exp(-0.5 * tau * k2)
            with self._lock:
                m = self._cache.setdefault(key, m)
        return m

    def apply(self, values: np.ndarray, tau: float) -> np.ndarray:
        """``P_tau`` on raw values whose trailing axes are the grid axes."""
        g = self.grid
        m = self.multiplier(tau, full=np.iscomplexobj(values))
        if tau == 0:
            return np.array(values, copy=True)
        if np.iscomplexobj(values):
            return sfft.ifftn(sfft.fftn(values, axes=g.axes) * m, axes=g.axes)
        return sfft.irfftn(sfft.rfftn(values, axes=g.axes) * m, s=g.shape, axes=g.axes)

    def apply_spectrum(self, spec: np.ndarray, tau: float) -> np.ndarray:
        """Multiply an ``rfftn`` spectrum by the heat multiplier."""
        return spec * self.multiplier(tau)


def heat_apply(op: HeatOperator, field: GridField, tau: float) -> GridField:
    if field.grid != op.grid:
        raise ValueError("field and operator live on different grids")
    return GridField(field.grid, op.apply(field.values, tau), field.vector)


def time_convolve(op: HeatOperator, source, t_index: int, dt: float, n_steps: int) -> np.ndarray:
    """Left-point sum ``sum_{i >= t_index} P_{t_i - t} f(t_i) dt`` over ``i < n_steps``.

    ``source`` is either an array indexed by time node along axis 0 or a
    callable ``i -> values``.
    """
    get = source if callable(source) else (lambda i: source[i])
    g = op.grid
    acc = None
    for i in range(t_index, n_steps):
        spec = sfft.rfftn(np.asarray(get(i), dtype=float), axes=g.axes)
        term = op.apply_spectrum(spec, (i - t_index) * dt)
        acc = term if acc is None else acc + term
    if acc is None:
        return np.zeros(g.shape)
    return sfft.irfftn(acc * dt, s=g.shape, axes=g.axes)


# --- smoothing diagnostics --------------------------------------------------

def derivative_magnitude(values: np.ndarray, grid: SpatialGrid, order: int) -> np.ndarray:
    """Pointwise Euclidean norm of the tensor of all order-``order`` partials."""
    if order == 0:
        return np.abs(values)
    spec = sfft.rfftn(values, axes=grid.axes)
    acc = 0.0
    for idx in product(range(grid.d), repeat=order):
        mult = 1.0 + 0j
        for a in idx:
            mult = mult * (1j * grid.rwavenumbers[a])
            if order % 2:
                mult = mult * grid._rnyquist[a]
        part = sfft.irfftn(spec * mult, s=grid.shape, axes=grid.axes)
        acc = acc + part * part
    return np.sqrt(acc)


@dataclass(frozen=True)
class SmoothingSlope:
    slope: float
    r2: float
    taus: tuple
    norms: tuple
    not_rough: bool

    @property
    def flag(self) -> str | None:
        return "not rough enough to exhibit bound" if self.not_rough else None


def check_smoothing_slope(op: HeatOperator, field: GridField, k: int, taus, p: float = np.inf) -> SmoothingSlope:
    """Regression slope of ``log ||nabla^k P_tau f||_p`` against ``log tau``.

    A jump across a hyperplane gives slope ``-k/2 + 1/(2p)``, so ``p = inf``
    recovers the ``-k/2`` rate.  A slope near zero means the input is too
    smooth to show any blow-up and is flagged.
    """
    taus = np.sort(np.asarray(taus, dtype=float))
    if taus.size < 4 or np.log10(taus[-1] / taus[0]) < 2 - 1e-9:
        raise ValueError("need >= 4 elapsed times spanning >= 2 decades")
    if np.any(taus <= 0):
        raise ValueError("elapsed times must be positive")
    g = op.grid
    norms = []
    for tau in taus:
        u = op.apply(field.values, float(tau))
        norms.append(_lp(derivative_magnitude(u, g, k), g, p))
    norms = np.asarray(norms)
    x, y = np.log(taus), np.log(norms)
    slope, icpt = np.polyfit(x, y, 1)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum((y - slope * x - icpt) ** 2))
    r2 = 1.0 if ss_tot <= 1e-28 else max(0.0, 1.0 - ss_res / ss_tot)
    return SmoothingSlope(float(slope), r2, tuple(taus), tuple(norms), bool(slope > -0.1))


def time_holder_slope(op: HeatOperator, field: GridField, tau: float, lags, m: float = -1.0,
                      p: float = 2.0) -> float:
    """Empirical exponent of ``delta -> ||P_{tau+delta} f - P_tau f||_{W^{m,p}}``.

    Negative ``m`` measures the increment in a weaker (Bessel-potential) norm.
    Diagnostic only.
    """
    g = op.grid
    lags = np.asarray(lags, dtype=float)
    base = op.apply(field.values, tau)
    mult = (1.0 + g.rk2) ** (m / 2.0)
    vals = []
    for dl in lags:
        diff = op.apply(field.values, tau + dl) - base
        w = sfft.irfftn(sfft.rfftn(diff, axes=g.axes) * mult, s=g.shape, axes=g.axes)
        vals.append(_lp(np.abs(w), g, p))
    slope, _ = np.polyfit(np.log(lags), np.log(vals), 1)
    return float(slope)
