"""Time grids, seeded Brownian paths, Euler-Maruyama and Girsanov weights.

Paths may carry leading batch axes: ``increments`` has shape
``batch + (k, d)`` where ``k <= grid.n_steps`` is the number of known
increments.  A path with ``k < n_steps`` is a *prefix*: it only knows
``W(t_0), ..., W(t_k)``, and reading past it raises ``IndexError``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

# stream tags for the counter-based generator
OUTER_STREAM = 0
CONTINUATION_STREAM = 1


def rng_stream(seed: int, *key: int) -> np.random.Generator:
    """Independent Philox stream addressed by ``(seed, *key)``.

    Philox is counter-based, so every key gets its own stream regardless of
    the order in which streams are created or consumed.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @cached_property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    def refine(self, factor: int) -> TimeGrid:
        return TimeGrid(self.T, self.n_steps * factor)


@dataclass(frozen=True, eq=False)
class BrownianPath:
    """Discretised Brownian trajectory (or prefix of one)."""

    grid: TimeGrid
    increments: np.ndarray

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim < 2:
            raise ValueError("increments must have shape batch + (k, d)")
        if inc.shape[-2] > self.grid.n_steps:
            raise ValueError("more increments than time steps")
        object.__setattr__(self, "increments", inc)

    @property
    def dim(self) -> int:
        return self.increments.shape[-1]

    @property
    def batch_shape(self) -> tuple:
        return self.increments.shape[:-2]

    @property
    def n_known(self) -> int:
        """Number of known increments; positions are known up to this index."""
        return self.increments.shape[-2]

    @property
    def complete(self) -> bool:
        return self.n_known == self.grid.n_steps

    @cached_property
    def positions(self) -> np.ndarray:
        zero = np.zeros(self.batch_shape + (1, self.dim))
        return np.concatenate([zero, np.cumsum(self.increments, axis=-2)], axis=-2)

    @property
    def W_end(self) -> np.ndarray:
        """``W`` at the last known node, shape ``batch + (d,)``."""
        return self.positions[..., -1, :]

    def W(self, i: int) -> np.ndarray:
        if i > self.n_known:
            raise IndexError(f"W(t_{i}) lies beyond the known prefix (index {self.n_known})")
        return self.positions[..., i, :]

    def prefix(self, i: int) -> BrownianPath:
        if i > self.n_known:
            raise IndexError(f"prefix {i} exceeds known increments {self.n_known}")
        out = BrownianPath(self.grid, self.increments[..., :i, :])
        if "positions" in self.__dict__:
            out.__dict__["positions"] = self.positions[..., : i + 1, :]
        return out

    def extend(self, more: np.ndarray) -> BrownianPath:
        """Append increments; a single prefix is broadcast against a batch of continuations."""
        more = np.asarray(more, dtype=float)
        batch = np.broadcast_shapes(self.batch_shape, more.shape[:-2])
        head = np.broadcast_to(self.increments, batch + self.increments.shape[-2:])
        tail = np.broadcast_to(more, batch + more.shape[-2:])
        return BrownianPath(self.grid, np.concatenate([head, tail], axis=-2))

    def bumped(self, k: int, eps: float, component: int = 0) -> BrownianPath:
        """Copy with increment ``k`` (Brownian component ``component``) shifted by ``eps``."""
        inc = self.increments.copy()
        inc[..., k, component] += eps
        return BrownianPath(self.grid, inc)

    def coarsen(self, factor: int) -> BrownianPath:
        """Sum consecutive blocks of increments: same trajectory on a coarser grid."""
        n = self.grid.n_steps
        if n % factor or not self.complete:
            raise ValueError("coarsening needs a complete path and a divisor of n_steps")
        inc = self.increments.reshape(self.batch_shape + (n // factor, factor, self.dim)).sum(axis=-2)
        return BrownianPath(TimeGrid(self.grid.T, n // factor), inc)

    def select(self, index) -> BrownianPath:
        """Sub-batch by index along the leading batch axis."""
        return BrownianPath(self.grid, self.increments[index])


def sample_brownian(grid: TimeGrid, dim: int, seed: int, n_paths: int | None = None,
                    path_id: int = 0) -> BrownianPath:
    """Seeded Brownian path(s) with i.i.d. ``N(0, dt I)`` increments.

    Path ``j`` of an ensemble is drawn from stream ``(seed, OUTER_STREAM, path_id + j)``,
    so ensembles of different sizes share their leading paths.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    sd = np.sqrt(grid.dt)
    if n_paths is None:
        inc = rng_stream(seed, OUTER_STREAM, path_id).standard_normal((grid.n_steps, dim)) * sd
        return BrownianPath(grid, inc)
    inc = np.empty((n_paths, grid.n_steps, dim))
    for j in range(n_paths):
        inc[j] = rng_stream(seed, OUTER_STREAM, path_id + j).standard_normal((grid.n_steps, dim))
    return BrownianPath(grid, inc * sd)


@dataclass(frozen=True, eq=False)
class SdePath:
    grid: TimeGrid
    x0: np.ndarray
    values: np.ndarray  # batch + (n_steps + 1, d)
    driving_path: BrownianPath


class NonFiniteDriftError(FloatingPointError):
    pass


def _drift_at(drift, i, path, x):
    """Drift evaluated at one point per batch member: ``x`` has shape batch + (d,)."""
    if drift is None:
        return np.zeros_like(x)
    return drift.at(i, path, x[..., None, :])[..., 0, :]


def euler_maruyama(drift, x0, path: BrownianPath) -> SdePath:
    """Euler-Maruyama for ``dX = b(t, W_(t), X) dt + dW``.

    ``drift`` is an adapted vector field (or ``None`` for ``b = 0``) and sees
    only the path prefix up to the current node.
    """
    if not path.complete:
        raise ValueError("Euler-Maruyama needs a complete path")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if x0.shape != (path.dim,) or not np.all(np.isfinite(x0)):
        raise ValueError(f"x0 must be a finite point in R^{path.dim}")
    dt = path.grid.dt
    X = np.empty(path.batch_shape + (path.grid.n_steps + 1, path.dim))
    X[..., 0, :] = x0
    if drift is None:
        X[...] = x0 + path.positions
        return SdePath(path.grid, x0, X, path)
    for i in range(path.grid.n_steps):
        b = _drift_at(drift, i, path.prefix(i), X[..., i, :])
        if not np.all(np.isfinite(b)):
            raise NonFiniteDriftError(
                f"non-finite drift at time index {i}, state {X[..., i, :].tolist()}")
        X[..., i + 1, :] = X[..., i, :] + b * dt + path.increments[..., i, :]
    return SdePath(path.grid, x0, X, path)


@dataclass(frozen=True, eq=False)
class GirsanovWeight:
    values: np.ndarray  # batch + (n_steps + 1,)

    @property
    def log(self) -> np.ndarray:
        return np.log(self.values)


def girsanov_weight(drift, path: BrownianPath, x0=None) -> GirsanovWeight:
    """Discretised stochastic exponential of the drift along ``x0 + W``.

    ``log rho(t_i) = sum_{j<i} b_j . dW_j - 0.5 |b_j|^2 dt`` with left-point
    evaluation ``b_j = b(t_j, W_(t_j), x0 + W(t_j))``.
    """
    x0 = np.zeros(path.dim) if x0 is None else np.asarray(x0, dtype=float)
    dt = path.grid.dt
    n = path.n_known
    logs = np.zeros(path.batch_shape + (n + 1,))
    bmax = 0.0
    for j in range(n):
        b = _drift_at(drift, j, path.prefix(j), x0 + path.W(j))
        bmax = max(bmax, float(np.max(np.abs(b))) if b.size else 0.0)
        step = np.sum(b * path.increments[..., j, :], axis=-1) - 0.5 * np.sum(b * b, axis=-1) * dt
        logs[..., j + 1] = logs[..., j] + step
    if np.max(logs) > 700.0:
        raise OverflowError(f"Girsanov exponent overflows; max |b| along path = {bmax:.3g}")
    return GirsanovWeight(np.exp(logs))
