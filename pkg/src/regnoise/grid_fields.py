"""Periodic spatial grids, grid-valued fields and their spectral calculus.

Array layout: a field's ``values`` has shape ``batch + comp + grid.shape``
where ``comp`` is ``(d,)`` for vector fields and empty for scalars.  The
spatial axes are always the trailing ``grid.d`` axes, so every transform
below acts on any number of leading batch axes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from itertools import product

import numpy as np
import scipy.fft as sfft


@dataclass(frozen=True)
class SpatialGrid:
    """Box ``[-L, L)^d`` with ``n`` nodes per axis, periodically identified."""

    d: int
    n: int
    L: float

    def __post_init__(self):
        if self.d not in (1, 2, 3):
            raise ValueError(f"grid dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"points per axis must be a power of two >= 8, got {self.n}")
        if not self.L > 0:
            raise ValueError(f"half-width L must be positive, got {self.L}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> tuple:
        return (self.n,) * self.d

    @property
    def axes(self) -> tuple:
        return tuple(range(-self.d, 0))

    @property
    def cell_volume(self) -> float:
        return self.h ** self.d

    @cached_property
    def axis(self) -> np.ndarray:
        return -self.L + self.h * np.arange(self.n)

    @cached_property
    def mesh(self) -> tuple:
        return tuple(np.meshgrid(*([self.axis] * self.d), indexing="ij"))

    @cached_property
    def points(self) -> np.ndarray:
        """Node coordinates in row-major order, shape ``(n**d, d)``."""
        return np.stack([m.reshape(-1) for m in self.mesh], axis=-1)

    @cached_property
    def _k1(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.h)

    @cached_property
    def rwavenumbers(self) -> tuple:
        """Angular wavenumbers broadcastable to the ``rfftn`` spectrum."""
        ks = []
        for a in range(self.d):
            k = self._k1 if a < self.d - 1 else 2.0 * np.pi * np.fft.rfftfreq(self.n, d=self.h)
            shape = [1] * self.d
            shape[a] = k.size
            ks.append(k.reshape(shape))
        return tuple(ks)

    @cached_property
    def wavenumbers(self) -> tuple:
        """Angular wavenumbers broadcastable to the full ``fftn`` spectrum."""
        ks = []
        for a in range(self.d):
            shape = [1] * self.d
            shape[a] = self.n
            ks.append(self._k1.reshape(shape))
        return tuple(ks)

    @cached_property
    def rk2(self) -> np.ndarray:
        return sum(k * k for k in self.rwavenumbers)

    @cached_property
    def k2(self) -> np.ndarray:
        return sum(k * k for k in self.wavenumbers)

    @cached_property
    def _rnyquist(self) -> tuple:
        # masks that zero the unpaired Nyquist mode for odd derivatives
        return tuple(np.abs(k) < np.pi / self.h * (1 - 1e-12) for k in self.rwavenumbers)

    def sample(self, func) -> GridField:
        """Field ``func(points)`` where ``points`` has shape ``(n**d, d)``."""
        v = np.asarray(func(self.points))
        if v.shape[-1:] == (self.d,) and v.ndim == 2 and self.d > 1:
            raise ValueError("use sample_vector for vector-valued functions")
        return GridField(self, v.reshape(v.shape[:-1] + self.shape))


@dataclass(frozen=True, eq=False)
class GridField:
    grid: SpatialGrid
    values: np.ndarray
    vector: bool = False

    def __post_init__(self):
        v = np.asarray(self.values)
        need = self.grid.d + (1 if self.vector else 0)
        if v.ndim < need or v.shape[v.ndim - self.grid.d:] != self.grid.shape:
            raise ValueError(f"values of shape {v.shape} do not live on a grid of shape {self.grid.shape}")
        if self.vector and v.shape[v.ndim - need] != self.grid.d:
            raise ValueError("vector fields carry d components before the spatial axes")
        object.__setattr__(self, "values", v)

    @property
    def batch_shape(self) -> tuple:
        return self.values.shape[: self.values.ndim - self.grid.d - (1 if self.vector else 0)]

    def __add__(self, other):
        return GridField(self.grid, self.values + _vals(other), self.vector)

    def __sub__(self, other):
        return GridField(self.grid, self.values - _vals(other), self.vector)

    def __mul__(self, c):
        return GridField(self.grid, self.values * _vals(c), self.vector)

    __rmul__ = __mul__

    def __neg__(self):
        return GridField(self.grid, -self.values, self.vector)


def _vals(x):
    return x.values if isinstance(x, GridField) else x


# --- norms -----------------------------------------------------------------

def _magnitude(field: GridField) -> np.ndarray:
    v = np.abs(field.values)
    if field.vector:
        v = np.sqrt(np.sum(v * v, axis=-field.grid.d - 1))
    return v


def _lp(mag: np.ndarray, grid: SpatialGrid, p: float):
    axes = grid.axes
    if np.isinf(p):
        out = np.max(mag, axis=axes)
    else:
        out = (np.sum(mag ** p, axis=axes) * grid.cell_volume) ** (1.0 / p)
    return float(out) if np.ndim(out) == 0 else out


def lp_norm(field: GridField, p: float = 2.0):
    """``(sum |v|^p h^d)^(1/p)``; ``p = inf`` gives the max norm.

    Vector fields use the pointwise Euclidean magnitude.  Leading batch axes
    produce an array of norms.
    """
    if p < 1:
        raise ValueError("p must be >= 1")
    return _lp(_magnitude(field), field.grid, p)


def _multiplier_apply(values: np.ndarray, grid: SpatialGrid, mult_r, mult_full=None) -> np.ndarray:
    axes = grid.axes
    if np.iscomplexobj(values):
        m = mult_full if mult_full is not None else mult_r
        return sfft.ifftn(sfft.fftn(values, axes=axes) * m, axes=axes)
    spec = sfft.rfftn(values, axes=axes)
    return sfft.irfftn(spec * mult_r, s=grid.shape, axes=axes)


def sobolev_norm(field: GridField, m: float, p: float = 2.0):
    """``|| F^-1 (1 + |xi|^2)^(m/2) F v ||_p`` computed spectrally."""
    if m < 0:
        raise ValueError("Sobolev order must be >= 0")
    g = field.grid
    if m == 0:
        return lp_norm(field, p)
    mr = (1.0 + g.rk2) ** (m / 2.0)
    mf = (1.0 + g.k2) ** (m / 2.0)
    return lp_norm(GridField(g, _multiplier_apply(field.values, g, mr, mf), field.vector), p)


# --- differentiation -------------------------------------------------------

def derivative_values(values: np.ndarray, grid: SpatialGrid, orders) -> np.ndarray:
    """Spectral partial derivative with multi-index ``orders`` (length d)."""
    orders = tuple(orders)
    if len(orders) != grid.d:
        raise ValueError("multi-index length must equal the grid dimension")
    mult = 1.0 + 0j
    for a, (k, o) in enumerate(zip(grid.rwavenumbers, orders)):
        if o:
            mult = mult * (1j * k) ** o
            if o % 2:
                mult = mult * grid._rnyquist[a]
    spec = sfft.rfftn(values, axes=grid.axes)
    return sfft.irfftn(spec * mult, s=grid.shape, axes=grid.axes)


def gradient_values(values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    spec = sfft.rfftn(values, axes=grid.axes)
    comps = []
    for k, keep in zip(grid.rwavenumbers, grid._rnyquist):
        comps.append(sfft.irfftn(spec * (1j * k * keep), s=grid.shape, axes=grid.axes))
    return np.stack(comps, axis=-grid.d - 1)


def laplacian_values(values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    spec = sfft.rfftn(values, axes=grid.axes)
    return sfft.irfftn(-grid.rk2 * spec, s=grid.shape, axes=grid.axes)


def divergence_values(values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    axis = -grid.d - 1
    spec = sfft.rfftn(values, axes=grid.axes)
    total = 0
    for a, (k, keep) in enumerate(zip(grid.rwavenumbers, grid._rnyquist)):
        total = total + np.take(spec, a, axis=axis) * (1j * k * keep)
    return sfft.irfftn(total, s=grid.shape, axes=grid.axes)


def gradient(field: GridField) -> GridField:
    if field.vector:
        raise ValueError("gradient expects a scalar field")
    return GridField(field.grid, gradient_values(field.values, field.grid), vector=True)


def laplacian(field: GridField) -> GridField:
    if field.vector:
        raise ValueError("laplacian expects a scalar field")
    return GridField(field.grid, laplacian_values(field.values, field.grid))


def divergence(field: GridField) -> GridField:
    if not field.vector:
        raise ValueError("divergence expects a vector field")
    return GridField(field.grid, divergence_values(field.values, field.grid))


# --- interpolation ---------------------------------------------------------

class BoxExcursionError(ValueError):
    pass


def interpolate(values: np.ndarray, grid: SpatialGrid, points: np.ndarray) -> np.ndarray:
    """Multilinear interpolation on the periodic grid.

    ``values`` has shape ``S + grid.shape``; ``points`` has shape
    ``S + Q + (d,)``, i.e. each leading index of ``values`` is paired with
    its own block of query points.  Returns shape ``S + Q``.
    """
    values = np.asarray(values)
    points = np.asarray(points, dtype=float)
    d, n, L, h = grid.d, grid.n, grid.L, grid.h
    lead = values.shape[: values.ndim - d]
    if points.shape[: len(lead)] != lead or points.shape[-1] != d:
        raise ValueError(f"points of shape {points.shape} do not match field leading shape {lead}")
    if np.any(points < -L) or np.any(points >= L):
        worst = float(np.max(np.abs(points)))
        raise BoxExcursionError(f"interpolation point outside the box [-{L}, {L}): |x| reached {worst:.4g}")
    q_ndim = points.ndim - 1 - len(lead)
    s = (points + L) / h
    i0 = np.floor(s).astype(np.intp)
    w = s - i0
    lead_idx = tuple(
        np.arange(m).reshape([m if a == j else 1 for a in range(len(lead))] + [1] * q_ndim)
        for j, m in enumerate(lead))
    out = 0.0
    for corner in product((0, 1), repeat=d):
        idx = tuple((i0[..., a] + c) % n for a, c in enumerate(corner))
        wt = 1.0
        for a, c in enumerate(corner):
            wt = wt * (w[..., a] if c else 1.0 - w[..., a])
        out = out + wt * values[lead_idx + idx]
    return out


# --- Hölder exponent -------------------------------------------------------

@dataclass(frozen=True)
class HolderEstimate:
    exponent: float
    regression_r2: float
    lags: tuple
    structure: tuple = ()


def structure_function(values: np.ndarray, grid: SpatialGrid, lag: int) -> float:
    """``max_x |v(x + lag h e_a) - v(x)|`` over all axes, without wrap-around."""
    best = 0.0
    for a in range(grid.d):
        ax = values.ndim - grid.d + a
        n = values.shape[ax]
        hi = np.take(values, np.arange(lag, n), axis=ax)
        lo = np.take(values, np.arange(0, n - lag), axis=ax)
        best = max(best, float(np.max(np.abs(hi - lo))))
    return best


def holder_exponent(field: GridField, lags) -> HolderEstimate:
    """Slope of ``log S(k)`` against ``log(k h)`` for the sup structure function.

    A constant field has no finite exponent: it is reported as ``+inf`` with
    ``r2 = 0``.
    """
    if field.vector or field.batch_shape:
        raise ValueError("holder_exponent expects a single scalar field")
    g = field.grid
    lags = tuple(sorted(set(int(k) for k in lags)))
    if len(lags) < 4:
        raise ValueError("need at least 4 distinct lags")
    if lags[0] < 1 or lags[-1] >= g.n / 4:
        raise ValueError(f"lags must lie in [1, n/4) = [1, {g.n // 4})")
    S = np.array([structure_function(field.values, g, k) for k in lags])
    scale = float(np.max(np.abs(field.values))) if field.values.size else 0.0
    if np.any(S <= 1e-14 * max(scale, 1e-300)) or scale == 0.0:
        return HolderEstimate(float("inf"), 0.0, lags, tuple(S))
    x = np.log(np.asarray(lags) * g.h)
    y = np.log(S)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    ss_res = float(np.sum(resid ** 2))
    r2 = 1.0 if ss_tot <= 1e-28 else max(0.0, 1.0 - ss_res / ss_tot)
    return HolderEstimate(float(slope), r2, lags, tuple(S))


# --- binary serialisation --------------------------------------------------

_MAGIC = b"STRG"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIdII")  # magic, version, d, n, L, dtype code, components
_FLOAT64 = 1
assert _HEADER.size == 32


def write_field(path, field: GridField) -> None:
    """Dump a single (unbatched) field: 32-byte header + little-endian float64 values."""
    if field.batch_shape:
        raise ValueError("only unbatched fields can be serialised")
    g = field.grid
    ncomp = g.d if field.vector else 1
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, g.d, g.n, float(g.L), _FLOAT64, ncomp))
        fh.write(np.ascontiguousarray(field.values, dtype="<f8").tobytes())


def read_field(path) -> GridField:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, d, n, L, dtype, ncomp = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC or version != _VERSION or dtype != _FLOAT64:
        raise ValueError(f"{path}: not a version-{_VERSION} STRG float64 field file")
    grid = SpatialGrid(d, n, L)
    vector = ncomp != 1
    if vector and ncomp != d:
        raise ValueError(f"{path}: component count {ncomp} does not match d={d}")
    shape = ((ncomp,) if vector else ()) + grid.shape
    vals = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if vals.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {int(np.prod(shape))} values, found {vals.size}")
    return GridField(grid, vals.reshape(shape).astype(float), vector=vector)
