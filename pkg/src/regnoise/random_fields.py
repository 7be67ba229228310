"""Adapted random fields as functionals of a Brownian path prefix.

A field is a function ``func(i, prefix, x)`` where ``prefix`` is the path
truncated to ``i`` increments (so only ``W(t_0..t_i)`` is readable) and
``x`` has shape ``(..., P, d)`` broadcastable against the path batch.  It
returns ``(..., P)`` for scalar fields and ``(..., P, d)`` for vector ones.

Malliavin derivatives use a discrete convention: bumping increment ``k``
perturbs ``W(t_j)`` for every ``j > k``, so ``D_k f(t_j) = 0`` unless
``k < j``.  The separable structures below factor ``D_k f(t_j, x)`` as
``f'(t_j, x) * m(k, j)`` along Brownian component 0, which is the whole
story when the noise is one-dimensional.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from .grid_fields import GridField, SpatialGrid
from .stochastics import BrownianPath


class NonSeparableFieldError(ValueError):
    pass


class UnknownPresetError(KeyError):
    pass


@dataclass(frozen=True)
class SeparableMalliavinStructure:
    """``D_k f(t_j, x) = f_prime(t_j, x) * kernel(k, j, path)`` for ``k < j``.

    ``kernel`` may depend on the path but reads only its prefix through
    ``j``.  The trace is the kernel just above the diagonal, ``m(j, j+1)``.
    """

    f_prime: AdaptedField
    kernel: Callable

    def m(self, k: int, j: int, path: BrownianPath):
        if k >= j:
            return np.zeros(path.batch_shape)
        return np.broadcast_to(np.asarray(self.kernel(k, j, path.prefix(j)), dtype=float), path.batch_shape)

    def trace(self, j: int, path: BrownianPath):
        """``m(j, j+1)``; the path must know increment ``j``."""
        return self.m(j, j + 1, path)


@dataclass(frozen=True, eq=False)
class AdaptedField:
    func: Callable
    name: str
    vector: bool = False
    deterministic: bool = False
    structure: SeparableMalliavinStructure | None = None
    params: dict = dc_field(default_factory=dict)
    # optional shift Y with f(t, x) = g(x + Y_t): shift(i, prefix) -> batch + (d,)
    shift: Callable | None = None
    shift_kernel: Callable | None = None
    profile: Profile | None = None

    @property
    def separable(self) -> bool:
        return self.structure is not None

    def at(self, i: int, path: BrownianPath, x) -> np.ndarray:
        """Evaluate at explicit points; the evaluator sees only ``path.prefix(i)``."""
        return self.func(i, path.prefix(i), np.asarray(x, dtype=float))

    def eval_values(self, i: int, path: BrownianPath, grid: SpatialGrid) -> np.ndarray:
        """Grid values of shape ``batch + comp + grid.shape``."""
        out = self.at(i, path, grid.points)
        P = grid.n ** grid.d
        if self.vector:
            out = np.broadcast_to(out, path.batch_shape + (P, grid.d))
            out = np.moveaxis(out, -1, -2)
            return np.ascontiguousarray(out).reshape(path.batch_shape + (grid.d,) + grid.shape)
        out = np.broadcast_to(out, path.batch_shape + (P,))
        return np.ascontiguousarray(out).reshape(path.batch_shape + grid.shape)

    def eval(self, i: int, path: BrownianPath, grid: SpatialGrid) -> GridField:
        vals = self.eval_values(i, path, grid)
        if not np.all(np.isfinite(vals)):
            raise FloatingPointError(f"field {self.name!r} produced non-finite values at index {i}")
        return GridField(grid, vals, self.vector)


def malliavin_derivative_values(field: AdaptedField, k: int, j: int, path: BrownianPath,
                                grid: SpatialGrid) -> np.ndarray:
    if field.structure is None:
        raise NonSeparableFieldError(
            f"non-separable field {field.name!r}: no closed-form Malliavin structure; "
            "use the finite-difference oracle")
    shape = path.batch_shape + ((grid.d,) if field.vector else ()) + grid.shape
    if k >= j:
        return np.zeros(shape)
    m = field.structure.m(k, j, path)
    fp = field.structure.f_prime.eval_values(j, path, grid)
    m = m.reshape(m.shape + (1,) * (fp.ndim - m.ndim))
    return np.broadcast_to(fp * m, shape)


def malliavin_derivative(field: AdaptedField, k: int, j: int, path: BrownianPath,
                         grid: SpatialGrid) -> GridField:
    """``D_k f(t_j, .)`` from the separable structure (zero unless ``k < j``)."""
    return GridField(grid, malliavin_derivative_values(field, k, j, path, grid), field.vector)


def malliavin_fd_oracle(field: AdaptedField, k: int, j: int, path: BrownianPath, grid: SpatialGrid,
                        eps: float = 1e-4, richardson: bool = False) -> GridField:
    """Central difference of ``f(t_j)`` under bumping increment ``k`` by ``+-eps``.

    With ``richardson`` the estimates at ``eps`` and ``eps/2`` are combined to
    cancel the ``O(eps^2)`` term.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")

    def cd(e):
        up = field.eval_values(j, path.bumped(k, e), grid)
        dn = field.eval_values(j, path.bumped(k, -e), grid)
        return (up - dn) / (2 * e)

    v = cd(eps)
    if richardson:
        v = (4 * cd(eps / 2) - v) / 3
    return GridField(grid, v, field.vector)


# --- spatial profiles -------------------------------------------------------

@dataclass(frozen=True)
class Profile:
    """Spatial shape ``g``; ``grad`` is ``None`` for non-smooth profiles."""

    name: str
    value: Callable
    grad: Callable | None = None
    params: dict = dc_field(default_factory=dict)

    @property
    def smooth(self) -> bool:
        return self.grad is not None


def _r2(x):
    return np.sum(x * x, axis=-1)


def make_profile(name: str = "gaussian", **params) -> Profile:
    """Named spatial profile evaluated on points of shape ``(..., d)``."""
    amp = float(params.get("amp", 1.0))
    if name == "gaussian":
        s = float(params.get("sigma", 0.5))
        c = np.asarray(params.get("center", 0.0), dtype=float)

        def val(x):
            return amp * np.exp(-_r2(x - c) / (2 * s * s))

        def grad(x):
            return -(x - c) / (s * s) * val(x)[..., None]

        return Profile(name, val, grad, {"sigma": s, "amp": amp})
    if name == "step":
        c = float(params.get("center", 0.0))
        return Profile(name, lambda x: amp * np.heaviside(x[..., 0] - c, 0.5), None, {"center": c, "amp": amp})
    if name == "kink":
        a = float(params.get("alpha", 1.0))
        if not 0 < a <= 1:
            raise ValueError("kink exponent alpha must lie in (0, 1]")
        return Profile(name, lambda x: amp * np.abs(x[..., 0]) ** a, None, {"alpha": a, "amp": amp})
    if name == "weierstrass":
        a = float(params.get("alpha", 0.5))
        b = float(params.get("b", 2.0))
        terms = int(params.get("terms", 12))
        coef = b ** (-a * np.arange(terms))
        freq = np.pi * b ** np.arange(terms)

        def val(x):
            x0 = x[..., 0]
            return amp * sum(c * np.cos(w * x0) for c, w in zip(coef, freq))

        return Profile(name, val, None, {"alpha": a, "b": b, "terms": terms, "amp": amp})
    raise UnknownPresetError(f"unknown profile {name!r}; valid: gaussian, step, kink, weierstrass")


# --- field presets ----------------------------------------------------------

def _lead(p, x) -> tuple:
    """Leading shape of an evaluation: path batch aligned against the point axis of ``x``."""
    return np.broadcast_shapes(p.batch_shape + (1,), x.shape[:-1])


def _zero_like_points(vector):
    def f(i, p, x):
        shape = _lead(p, x) + ((x.shape[-1],) if vector else ())
        return np.zeros(shape)
    return f


def _W(p, i, comp=0):
    return p.W(i)[..., comp]


def _indicator_kernel(sign=1.0):
    def m(k, j, p):
        return sign * float(k < j)
    return m


def _scalar_deterministic(name, prof, params):
    zero = AdaptedField(_zero_like_points(False), f"{name}'", deterministic=True)
    return AdaptedField(lambda i, p, x: prof.value(x), name, deterministic=True,
                        structure=SeparableMalliavinStructure(zero, lambda k, j, p: 0.0),
                        params=params, profile=prof)


def _shifted(name, prof, params, shift, shift_kernel):
    """``f(t, x) = g(x + Y_t)`` with ``D_k Y_j = shift_kernel(k, j)``."""

    def func(i, p, x):
        return prof.value(x + shift(i, p)[..., None, :])

    structure = None
    if prof.smooth:
        fprime = AdaptedField(lambda i, p, x: prof.grad(x + shift(i, p)[..., None, :])[..., 0], f"{name}'")
        structure = SeparableMalliavinStructure(fprime, shift_kernel)
    return AdaptedField(func, name, structure=structure, params=params,
                        shift=shift, shift_kernel=shift_kernel, profile=prof)


def _tanh_shift(c):
    def Y(i, p):
        if i == 0:
            return np.zeros(p.batch_shape + (p.dim,))
        return c * np.tanh(p.positions[..., :i, :]).sum(axis=-2) * p.grid.dt

    def kernel(k, j, p):
        if k + 1 >= j:
            return np.zeros(p.batch_shape)
        w = p.positions[..., k + 1: j, 0]
        return c * np.sum(1.0 / np.cosh(w) ** 2, axis=-1) * p.grid.dt

    return Y, kernel


FIELD_PRESETS = ("deterministic", "shifted_counterexample", "linear_in_W", "smooth_perturbation",
                 "antithetic_shift", "step", "kink", "weierstrass")


def field_preset(name: str, params: dict | None = None) -> AdaptedField:
    """Named scalar field.  ``params`` holds ``profile`` plus profile/preset parameters.

    =======================  ===============================  ==========================
    preset                   f(t, x)                          (f', m(k, j))
    =======================  ===============================  ==========================
    deterministic            g(x)                             (0, 0)
    shifted_counterexample   g(x - W_t)                       (-g'(x - W_t), 1[k<j])
    linear_in_W              g(x) W_t                         (g, 1[k<j])
    smooth_perturbation      g(x + Y_t), Y = int c tanh(W)    (g'(x+Y_t), D_k Y_j)
    antithetic_shift         g(x + Y_t), Y = -W               (g'(x+Y_t), -1[k<j])
    step / kink / weierstrass  deterministic with that profile
    =======================  ===============================  ==========================

    Shifted presets with a non-smooth profile have no closed-form ``f'`` and
    are marked non-separable.
    """
    params = dict(params or {})
    if name in ("step", "kink", "weierstrass"):
        params.setdefault("profile", name)
        name_eff = "deterministic"
    elif name in FIELD_PRESETS:
        name_eff = name
    else:
        raise UnknownPresetError(f"unknown field preset {name!r}; valid presets: {', '.join(FIELD_PRESETS)}")
    prof_params = {k: v for k, v in params.items() if k not in ("profile", "c")}
    prof = make_profile(params.get("profile", "gaussian"), **prof_params)

    if name_eff == "deterministic":
        f = _scalar_deterministic(name, prof, params)
        return f
    if name_eff == "linear_in_W":
        fprime = AdaptedField(lambda i, p, x: np.broadcast_to(prof.value(x), _lead(p, x)),
                              f"{name}'", deterministic=True)
        return AdaptedField(lambda i, p, x: prof.value(x) * _W(p, i)[..., None], name,
                            structure=SeparableMalliavinStructure(fprime, _indicator_kernel()),
                            params=params, profile=prof)
    if name_eff == "shifted_counterexample":
        f = _shifted(name, prof, params, lambda i, p: -p.W(i), _indicator_kernel(-1.0))
        if f.structure is not None:
            # the same field written with f' = -g'(x - W) and kernel +1
            fp = f.structure.f_prime
            neg = AdaptedField(lambda i, p, x: -fp.func(i, p, x), fp.name)
            f = AdaptedField(f.func, f.name, structure=SeparableMalliavinStructure(neg, _indicator_kernel()),
                             params=params, shift=f.shift, shift_kernel=f.shift_kernel, profile=prof)
        return f
    if name_eff == "antithetic_shift":
        return _shifted(name, prof, params, lambda i, p: -p.W(i), _indicator_kernel(-1.0))
    c = float(params.get("c", 1.0))
    Y, kernel = _tanh_shift(c)
    return _shifted(name, prof, params, Y, kernel)


# --- drift presets ----------------------------------------------------------

DRIFT_PRESETS = ("zero", "constant", "bump", "linear_in_W", "tanh_W", "ou")


def _vec(c, d):
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return np.broadcast_to(c, (d,)).copy() if c.size in (1, d) else None


def drift_preset(name: str, params: dict | None = None, d: int = 1) -> AdaptedField | None:
    """Named vector drift ``b(t, W_(t), x)``; ``zero`` returns ``None``.

    ``ou`` (``b = -kappa x``) is unbounded and meant for SDE tests only.
    """
    params = dict(params or {})
    if name not in DRIFT_PRESETS:
        raise UnknownPresetError(f"unknown drift preset {name!r}; valid presets: {', '.join(DRIFT_PRESETS)}")
    if name == "zero":
        return None
    c = _vec(params.get("c", 0.5), d)
    if c is None:
        raise ValueError(f"drift coefficient c must be a scalar or have {d} entries")
    s = float(params.get("sigma", 1.0))
    zero_vec = AdaptedField(_zero_like_points(True), f"{name}'", vector=True, deterministic=True)
    det_structure = SeparableMalliavinStructure(zero_vec, lambda k, j, p: 0.0)

    def bump(x):
        return np.exp(-_r2(x) / (2 * s * s))

    def bcast(p, x, v):
        return np.broadcast_to(v, _lead(p, x) + (d,))

    if name == "constant":
        return AdaptedField(lambda i, p, x: bcast(p, x, c), name, vector=True, deterministic=True,
                            structure=det_structure, params=params)
    if name == "bump":
        return AdaptedField(lambda i, p, x: bcast(p, x, c * bump(x)[..., None]), name, vector=True,
                            deterministic=True, structure=det_structure, params=params)
    if name == "ou":
        kappa = float(params.get("kappa", 1.0))
        return AdaptedField(lambda i, p, x: bcast(p, x, -kappa * x), name, vector=True, deterministic=True,
                            structure=det_structure, params=params)
    if name == "linear_in_W":
        fp = AdaptedField(lambda i, p, x: bcast(p, x, c * bump(x)[..., None]), f"{name}'", vector=True,
                          deterministic=True)
        return AdaptedField(lambda i, p, x: c * bump(x)[..., None] * _W(p, i)[..., None, None], name,
                            vector=True, structure=SeparableMalliavinStructure(fp, _indicator_kernel()),
                            params=params)
    # tanh_W
    fp = AdaptedField(lambda i, p, x: c * bump(x)[..., None] / np.cosh(_W(p, i))[..., None, None] ** 2,
                      f"{name}'", vector=True)
    return AdaptedField(lambda i, p, x: c * bump(x)[..., None] * np.tanh(_W(p, i))[..., None, None], name,
                        vector=True, structure=SeparableMalliavinStructure(fp, _indicator_kernel()),
                        params=params)


def perturbation_kernel(field: AdaptedField, k: int, j: int, path: BrownianPath) -> np.ndarray:
    """``D_k Y_j`` for a shifted field ``g(x + Y_t)`` (zero unless ``k < j``)."""
    if field.shift_kernel is None:
        raise ValueError(f"field {field.name!r} carries no perturbation Y")
    if k >= j:
        return np.zeros(path.batch_shape)
    return np.broadcast_to(np.asarray(field.shift_kernel(k, j, path.prefix(j)), dtype=float), path.batch_shape)
