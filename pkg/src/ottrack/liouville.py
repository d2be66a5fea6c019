"""Propagation of particle densities along an ODE flow by characteristics.

Along a trajectory of ``xdot = f(x, t)`` the PDF value obeys
``d log xi / dt = -div f``, so every particle carries its density value
with it and only the divergence has to be integrated. Points are advanced
with classical RK4; the divergence (and the kinetic integrand) are
integrated by Simpson's rule on each step, with the midpoint state taken
from the cubic Hermite interpolant of the step.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from .errors import BlowUp, DimensionMismatch, InvalidInput, OutOfDomain
from .measures import ParticleEnsemble

STEPS_PER_UNIT_TIME = 100
BLOWUP_NORM = 1e6
FD_REL_STEP = 1e-5


@dataclass(frozen=True)
class VectorFieldSpec:
    """A vector field of kind ``duffing``, ``affine`` or ``tabulated``.

    ``params`` holds ``(alpha, beta, delta)`` for duffing, ``(M, c)`` for
    ``f(x) = M x + c`` and ``(lo, hi, values)`` for a tabulated field whose
    ``values[k]`` are the k-th components at the cell centers of the box.
    """

    kind: str
    params: tuple

    @classmethod
    def duffing(cls, alpha=1.0, beta=-1.0, delta=0.5) -> "VectorFieldSpec":
        """``x1' = x2``, ``x2' = -alpha x1^3 - beta x1 - delta x2``."""
        p = tuple(float(v) for v in (alpha, beta, delta))
        if not all(math.isfinite(v) for v in p):
            raise InvalidInput("duffing parameters must be finite")
        if p[0] * p[1] >= 0:
            warnings.warn(
                "alpha*beta >= 0: the off-origin equilibria (+-sqrt(-beta/alpha), 0) do not exist",
                stacklevel=2,
            )
        return cls("duffing", p)

    @classmethod
    def affine(cls, mat, vec=None) -> "VectorFieldSpec":
        M = np.atleast_2d(np.asarray(mat, dtype=float))
        c = np.zeros(M.shape[0]) if vec is None else np.atleast_1d(np.asarray(vec, dtype=float))
        if M.shape != (c.size, c.size):
            raise DimensionMismatch("affine field needs a square matrix matching the offset")
        return cls("affine", (M, c))

    @classmethod
    def tabulated(cls, lo, hi, values) -> "VectorFieldSpec":
        lo = np.atleast_1d(np.asarray(lo, dtype=float))
        hi = np.atleast_1d(np.asarray(hi, dtype=float))
        vals = np.asarray(values, dtype=float)
        d = lo.size
        if hi.size != d or vals.ndim != d + 1 or vals.shape[0] != d:
            raise DimensionMismatch("tabulated field needs values of shape (d, n_1, ..., n_d)")
        if np.any(hi <= lo) or min(vals.shape[1:]) < 2:
            raise InvalidInput("tabulated field needs hi > lo and at least 2 cells per axis")
        axes = [
            lo[k] + (np.arange(n) + 0.5) * (hi[k] - lo[k]) / n for k, n in enumerate(vals.shape[1:])
        ]
        # linear extrapolation covers the half cell between the outer centers and the walls
        interp = RegularGridInterpolator(
            tuple(axes), np.moveaxis(vals, 0, -1), bounds_error=False, fill_value=None
        )
        return cls("tabulated", (lo, hi, vals, interp))

    @property
    def dim(self) -> int:
        if self.kind == "duffing":
            return 2
        if self.kind == "affine":
            return self.params[1].size
        return self.params[0].size


def _as_points(f: VectorFieldSpec, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != f.dim:
        raise DimensionMismatch(f"points of dimension {x.shape[1]} for a {f.dim}-D field")
    if f.kind == "tabulated":
        lo, hi = f.params[0], f.params[1]
        if np.any(x < lo) or np.any(x > hi):
            raise OutOfDomain("point outside the tabulated field's box")
    return x, single


def _field(f: VectorFieldSpec, x: np.ndarray) -> np.ndarray:
    if f.kind == "duffing":
        a, b, dl = f.params
        x1, x2 = x[:, 0], x[:, 1]
        return np.stack([x2, -a * x1**3 - b * x1 - dl * x2], axis=1)
    if f.kind == "affine":
        M, c = f.params
        return x @ M.T + c
    if f.kind == "tabulated":
        return f.params[3](x)
    raise InvalidInput(f"unknown field kind {f.kind!r}")


def eval_field(f: VectorFieldSpec, x, t: float = 0.0) -> np.ndarray:
    """Field value at one point ``(d,)`` or many ``(N, d)``; all kinds are autonomous."""
    x, single = _as_points(f, x)
    v = _field(f, x)
    return v[0] if single else v


def _fd_jacobian_diag(f, x, k):
    lo, hi = f.params[0], f.params[1]
    h = FD_REL_STEP * (hi[k] - lo[k])
    xp, xm = x.copy(), x.copy()
    xp[:, k] = np.minimum(x[:, k] + h, hi[k])
    xm[:, k] = np.maximum(x[:, k] - h, lo[k])
    return (_field(f, xp) - _field(f, xm)) / (xp[:, k] - xm[:, k])[:, None]


def _divergence(f: VectorFieldSpec, x: np.ndarray) -> np.ndarray:
    if f.kind == "duffing":
        return np.full(x.shape[0], -f.params[2])
    if f.kind == "affine":
        return np.full(x.shape[0], float(np.trace(f.params[0])))
    return sum(_fd_jacobian_diag(f, x, k)[:, k] for k in range(f.dim))


def divergence(f: VectorFieldSpec, x) -> np.ndarray:
    """Analytic for duffing and affine fields, central differences when tabulated."""
    x, single = _as_points(f, x)
    d = _divergence(f, x)
    return d[0] if single else d


def curl(f: VectorFieldSpec, x) -> np.ndarray:
    """Scalar vorticity ``d f2/d x1 - d f1/d x2`` of a planar field."""
    if f.dim != 2:
        raise DimensionMismatch("curl is defined here for planar fields only")
    x, single = _as_points(f, x)
    if f.kind == "duffing":
        a, b, _ = f.params
        w = -3.0 * a * x[:, 0] ** 2 - b - 1.0
    elif f.kind == "affine":
        M = f.params[0]
        w = np.full(x.shape[0], M[1, 0] - M[0, 1])
    else:
        w = _fd_jacobian_diag(f, x, 0)[:, 1] - _fd_jacobian_diag(f, x, 1)[:, 0]
    return w[0] if single else w


def _integrate(f, x, t0, t1, steps, need_log=True, need_action=False):
    """RK4 trajectories plus Simpson integrals of ``div f`` and ``|f|^2``."""
    if steps < 1:
        raise InvalidInput("steps must be >= 1")
    h = (t1 - t0) / steps
    x = np.array(x, dtype=float)
    log_fac = np.zeros(x.shape[0])
    action = np.zeros(x.shape[0])
    f0 = _field(f, x)
    for i in range(steps):
        t = t0 + i * h
        k2 = _field(f, x + 0.5 * h * f0)
        k3 = _field(f, x + 0.5 * h * k2)
        k4 = _field(f, x + h * k3)
        x1 = x + (h / 6.0) * (f0 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(x1)) or np.max(np.linalg.norm(x1, axis=1), initial=0.0) > BLOWUP_NORM:
            raise BlowUp(f"trajectory left the ball of radius {BLOWUP_NORM:g} near t={t + h:.6g}")
        f1 = _field(f, x1)
        x_mid = 0.5 * (x + x1) + (h / 8.0) * (f0 - f1)
        if need_log:
            log_fac -= (h / 6.0) * (
                _divergence(f, x) + 4.0 * _divergence(f, x_mid) + _divergence(f, x1)
            )
        if need_action:
            fm = _field(f, x_mid)
            action += (h / 6.0) * (
                np.einsum("ij,ij->i", f0, f0) + 4.0 * np.einsum("ij,ij->i", fm, fm) + np.einsum("ij,ij->i", f1, f1)
            )
        x, f0 = x1, f1
    return x, log_fac, action


def default_steps(t0: float, t1: float) -> int:
    return max(1, int(math.ceil(STEPS_PER_UNIT_TIME * abs(t1 - t0) - 1e-9)))


def propagate(
    f: VectorFieldSpec, ens: ParticleEnsemble, t0: float, t1: float, steps: int = None
) -> ParticleEnsemble:
    """Advance every particle from ``t0`` to ``t1``; weights are unchanged.

    Density values are multiplied by ``exp(-int div f dt)`` along each
    trajectory. Raises :class:`BlowUp` once a point norm exceeds 1e6.
    """
    if ens.density_values is None:
        raise InvalidInput("propagation needs density values on the ensemble")
    if ens.dim != f.dim:
        raise DimensionMismatch("ensemble and field dimensions differ")
    steps = default_steps(t0, t1) if steps is None else int(steps)
    _as_points(f, ens.points)
    x, log_fac, _ = _integrate(f, ens.points, t0, t1, steps)
    return ParticleEnsemble(x, ens.weights, ens.density_values * np.exp(log_fac))


def path_kinetic_energy(
    f: VectorFieldSpec, ens: ParticleEnsemble, t0: float, t1: float, steps: int = None
) -> float:
    """``sum_i w_i int |f(x_i(t))|^2 dt`` along the true trajectories."""
    if ens.dim != f.dim:
        raise DimensionMismatch("ensemble and field dimensions differ")
    steps = default_steps(t0, t1) if steps is None else int(steps)
    _as_points(f, ens.points)
    _, _, action = _integrate(f, ens.points, t0, t1, steps, need_log=False, need_action=True)
    return float(ens.weights @ action)


def uniform_box_ensemble(n: int, lo, hi, seed: int) -> ParticleEnsemble:
    """``n`` equally weighted PCG64 draws from the uniform density on a box."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if n < 1:
        raise InvalidInput("need at least one sample")
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n, lo.size))
    dens = np.full(n, 1.0 / float(np.prod(hi - lo)))
    return ParticleEnsemble(pts, np.full(n, 1.0 / n), dens)


def duffing_dataset(
    n: int,
    seed: int,
    horizons: Sequence[float],
    alpha: float = 1.0,
    beta: float = -1.0,
    delta: float = 0.5,
    box: tuple = (-2.0, 2.0),
    t0: float = 0.0,
) -> list:
    """Snapshots at ``horizons`` of a uniform ensemble on ``box^2`` under the Duffing flow.

    Sampling uses numpy's PCG64 (``np.random.default_rng(seed)``), so a
    given ``(n, seed)`` gives the same points on every platform numpy
    supports.
    """
    times = np.asarray(horizons, dtype=float)
    if times.size == 0 or times[0] <= t0 or np.any(np.diff(times) <= 0):
        raise InvalidInput("horizons must be increasing and start after t0")
    f = VectorFieldSpec.duffing(alpha, beta, delta)
    ens = uniform_box_ensemble(n, [box[0]] * 2, [box[1]] * 2, seed)
    out = []
    prev = t0
    for t in times:
        ens = propagate(f, ens, prev, float(t))
        out.append(ens)
        prev = float(t)
    return out
