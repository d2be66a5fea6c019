"""Dynamic optimal transport on a staggered space-time grid.

Decision variables (synthetic time s in [0, 1], T intervals of length ds):

* ``rho`` - density at cell centers on the T+1 integer time slices;
* ``mom[k]`` - momentum component k on the faces normal to axis k (boundary
  faces included) at the T interval midpoints.

The discrete continuity equation on every space-time cell is

    (rho[n+1] - rho[n]) / ds + sum_k (mom[k][.., i+1/2] - mom[k][.., i-1/2]) / h_k = 0

with zero flux through the box walls and ``rho[0]``, ``rho[T]`` pinned to
the source and target. The kinetic energy ``|m|^2 / rho`` is evaluated on
centered variables ``V = I(U)`` obtained by averaging the staggered ones, and
the problem

    min J(V) + i_C(U) + i_{V = I(U)}

is solved by Douglas-Rachford splitting between the pair
``(projection on C, prox of J)`` and the projection on the graph of ``I``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import fft

from .discrete_ot import DiscreteMeasure, wasserstein
from .errors import BoundaryMass, GeometryMismatch, InvalidInput, NotConverged, SOutOfRange
from .measures import GridDensity, normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverParams:
    """Douglas-Rachford settings and stopping rule.

    Converged means the relative continuity residual is at most ``tol`` and
    the energy moved by at most ``energy_tol`` (relative) over the last
    ``energy_window`` iterations. ``step`` is the splitting parameter; when
    None it is ``step_scale`` times the largest endpoint density value, which
    keeps the prox balanced between density and momentum whatever the units.
    """

    step: Optional[float] = None
    step_scale: float = 0.05
    relaxation: float = 1.8
    tol: float = 1e-3
    energy_tol: float = 1e-5
    energy_window: int = 50
    max_iter: int = 20000
    floor: float = 1e-10
    check_every: int = 10
    newton_tol: float = 1e-12
    raise_on_failure: bool = True


@dataclass
class SpaceTimeField:
    """Staggered (density, momentum) pair on a box grid.

    ``rho`` has shape ``(T+1, *shape)``; ``mom[k]`` has shape ``(T, *shape)``
    with axis ``k+1`` lengthened by one (faces).
    """

    lo: np.ndarray
    hi: np.ndarray
    rho: np.ndarray
    mom: list

    @property
    def time_steps(self) -> int:
        return self.rho.shape[0] - 1

    @property
    def shape(self) -> tuple:
        return self.rho.shape[1:]

    @property
    def dim(self) -> int:
        return len(self.shape)

    @property
    def cell_size(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.shape)

    def copy(self) -> "SpaceTimeField":
        return SpaceTimeField(self.lo, self.hi, self.rho.copy(), [m.copy() for m in self.mom])


@dataclass
class BbSolution:
    """Result of :func:`bb_solve`.

    ``field`` is the last continuity-projected iterate, so it meets the
    discrete continuity equation and the endpoint data up to rounding.
    ``continuity_residual`` is the relative residual of the other
    Douglas-Rachford iterate (the graph projection), which vanishes only at
    a fixed point and is the feasibility gap the stopping rule watches.
    """

    field: SpaceTimeField
    energy: float
    continuity_residual: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)


# ---------------------------------------------------------------------------
# discrete operators
# ---------------------------------------------------------------------------


def _avg(a, axis):
    lo = [slice(None)] * a.ndim
    hi = [slice(None)] * a.ndim
    lo[axis] = slice(None, -1)
    hi[axis] = slice(1, None)
    return 0.5 * (a[tuple(lo)] + a[tuple(hi)])


def interpolate(rho, mom):
    """Staggered -> centered: average rho in time and each mom[k] along axis k."""
    rho_c = _avg(rho, 0)
    mom_c = [_avg(m, k + 1) for k, m in enumerate(mom)]
    return rho_c, mom_c


def divergence(rho, mom, ds, h):
    """Space-time divergence on the T x shape cells."""
    out = np.diff(rho, axis=0) / ds
    for k, m in enumerate(mom):
        out = out + np.diff(m, axis=k + 1) / h[k]
    return out


def _interp_gram_inverse(n_nodes):
    """Inverse of ``Id + I^T I`` for the 1-D averaging map on ``n_nodes`` nodes."""
    I = np.zeros((n_nodes - 1, n_nodes))
    idx = np.arange(n_nodes - 1)
    I[idx, idx] = 0.5
    I[idx, idx + 1] = 0.5
    return np.linalg.inv(np.eye(n_nodes) + I.T @ I), I


def _apply_along(mat, a, axis):
    return np.moveaxis(np.tensordot(mat, a, axes=([1], [axis])), 0, axis)


class _Operators:
    """Precomputed projections for one grid geometry."""

    def __init__(self, shape, h, T):
        self.shape = tuple(shape)
        self.h = np.asarray(h, dtype=float)
        self.T = T
        self.ds = 1.0 / T
        self.gram_t, self.interp_t = _interp_gram_inverse(T + 1)
        self.gram_x = []
        self.interp_x = []
        for n in self.shape:
            g, i = _interp_gram_inverse(n + 1)
            self.gram_x.append(g)
            self.interp_x.append(i)
        # Neumann Laplacian eigenvalues (DCT-II diagonalizes it) on T x shape
        dims = (T,) + self.shape
        steps = (self.ds,) + tuple(self.h)
        lam = np.zeros(dims)
        for ax, (n, hk) in enumerate(zip(dims, steps)):
            ev = (2.0 - 2.0 * np.cos(np.pi * np.arange(n) / n)) / hk**2
            sh = [1] * len(dims)
            sh[ax] = n
            lam = lam + ev.reshape(sh)
        lam.flat[0] = 1.0
        self.inv_lap = 1.0 / lam
        self.inv_lap.flat[0] = 0.0

    def project_graph(self, rho, mom, rho_c, mom_c):
        """Nearest (U, V) with V = I(U)."""
        r = rho + _apply_along(self.interp_t.T, rho_c, 0)
        r = _apply_along(self.gram_t, r, 0)
        ms = []
        for k, (m, mc) in enumerate(zip(mom, mom_c)):
            a = m + _apply_along(self.interp_x[k].T, mc, k + 1)
            ms.append(_apply_along(self.gram_x[k], a, k + 1))
        rc, mcs = interpolate(r, ms)
        return r, ms, rc, mcs

    def project_continuity(self, rho, mom, src, tgt):
        """Nearest U satisfying the continuity equation and boundary data."""
        rho = rho.copy()
        mom = [m.copy() for m in mom]
        rho[0] = src
        rho[-1] = tgt
        for k, m in enumerate(mom):
            idx = [slice(None)] * m.ndim
            idx[k + 1] = 0
            m[tuple(idx)] = 0.0
            idx[k + 1] = -1
            m[tuple(idx)] = 0.0
        res = divergence(rho, mom, self.ds, self.h)
        p = fft.idctn(fft.dctn(res, type=2, norm="ortho") * self.inv_lap, type=2, norm="ortho")
        # U <- U - A^T p on the free entries
        rho[1:-1] -= (p[:-1] - p[1:]) / self.ds
        for k, m in enumerate(mom):
            lo = [slice(None)] * p.ndim
            hi = [slice(None)] * p.ndim
            lo[k + 1] = slice(None, -1)
            hi[k + 1] = slice(1, None)
            inner = [slice(None)] * m.ndim
            inner[k + 1] = slice(1, -1)
            m[tuple(inner)] -= (p[tuple(lo)] - p[tuple(hi)]) / self.h[k]
        return rho, mom


def prox_kinetic(rho, mom, gamma, tol=1e-12, max_newton=60):
    """Proximal map of ``gamma * |m|^2 / (2 rho)`` at every node.

    The optimal density ``x`` is the largest real root of
    ``(x - rho)(x + gamma)^2 = gamma |m|^2 / 2``. A closed-form root seeds
    Newton's method; the seed is clamped to ``max(rho, 0)`` from below, where
    the cubic is increasing and convex, so Newton cannot leave the branch.
    Nodes whose root is not positive map to ``(0, 0)``.
    """
    msq = sum(m * m for m in mom)
    c = 0.5 * gamma * msq
    # y = x + gamma solves y^3 - p y^2 - c = 0; w = y - p/3 is depressed
    p = rho + gamma
    q = 2.0 * p**3 / 27.0 + c
    disc = c * (p**3 / 27.0 + 0.25 * c)
    sq = np.sqrt(np.maximum(disc, 0.0))
    w_one = np.cbrt(0.5 * q + sq) + np.cbrt(0.5 * q - sq)
    a = 2.0 * np.abs(p) / 3.0
    with np.errstate(invalid="ignore", divide="ignore"):
        cos3 = np.clip(4.0 * q / np.where(a > 0, a**3, 1.0), -1.0, 1.0)
    w_three = a * np.cos(np.arccos(cos3) / 3.0)
    x = np.where(disc >= 0, w_one, w_three) + p / 3.0 - gamma
    # the cubic at x = 0 is -(rho gamma^2 + c): root <= 0 exactly when that is >= 0
    pos = rho * gamma * gamma + c > 0
    x = np.where(pos, np.maximum(x, np.maximum(rho, 0.0)), 1.0)
    for _ in range(max_newton):
        xg = x + gamma
        val = (x - rho) * xg * xg - c
        der = xg * (3.0 * x + gamma - 2.0 * rho)
        step = np.where(pos, val / der, 0.0)
        x = x - step
        if np.all(np.abs(step) <= tol * (1.0 + np.abs(x))):
            break
    pos &= x > 0
    scale = np.where(pos, x / (x + gamma), 0.0)
    return np.where(pos, x, 0.0), [m * scale for m in mom]


def kinetic_energy(rho_c, mom_c, cell_volume, ds, floor=0.0):
    """``sum |m|^2 / rho * dx * ds`` over centered nodes with rho above floor."""
    msq = sum(m * m for m in mom_c)
    ok = rho_c > floor
    return float(np.sum(msq[ok] / rho_c[ok]) * cell_volume * ds)


# ---------------------------------------------------------------------------
# solver
# ---------------------------------------------------------------------------


def _prepare(g: GridDensity, floor: float) -> np.ndarray:
    v = np.maximum(g.values, floor * g.values.max())
    return normalize(g.with_values(v)).values.copy()


def _check_boundary_mass(g: GridDensity, cells: int = 2, keep: float = 0.999) -> None:
    inner = [slice(cells, n - cells) for n in g.shape]
    frac = g.values[tuple(inner)].sum() / g.values.sum()
    if frac < keep:
        raise BoundaryMass(
            f"only {frac:.5f} of the mass is more than {cells} cells from the walls"
        )


def continuity_residual(fld: SpaceTimeField) -> float:
    """Max |d rho/ds + div m| relative to ``max rho / ds + max |m| / h``."""
    h = fld.cell_size
    ds = 1.0 / fld.time_steps
    res = divergence(fld.rho, fld.mom, ds, h)
    scale = np.abs(fld.rho).max() / ds + max(np.abs(m).max() / h[k] for k, m in enumerate(fld.mom))
    return float(np.abs(res).max() / max(scale, 1e-300))


def bb_solve(
    src: GridDensity,
    tgt: GridDensity,
    time_steps: int = 16,
    params: Optional[SolverParams] = None,
) -> BbSolution:
    """Kinetic-energy minimizing density path from ``src`` to ``tgt`` on s in [0, 1].

    ``energy`` approximates the squared Wasserstein distance. Raises
    :class:`NotConverged` (carrying the last iterate) when the cap is hit.
    """
    params = params or SolverParams()
    if not src.same_geometry(tgt):
        raise GeometryMismatch("source and target grids differ")
    if time_steps < 2:
        raise InvalidInput("need at least two time steps")
    for g in (src, tgt):
        if abs(g.mass() - 1.0) > 1e-4:
            raise InvalidInput("source and target must be normalized")
        _check_boundary_mass(g)

    T = time_steps
    h = src.cell_size
    vol = src.cell_volume
    ds = 1.0 / T
    ops = _Operators(src.shape, h, T)
    a = _prepare(src, params.floor)
    b = _prepare(tgt, params.floor)

    svals = np.linspace(0.0, 1.0, T + 1).reshape((T + 1,) + (1,) * src.dim)
    rho = (1.0 - svals) * a + svals * b
    mom = []
    for k, n in enumerate(src.shape):
        shp = list((T,) + src.shape)
        shp[k + 1] = n + 1
        mom.append(np.zeros(shp))
    z_u = (rho, mom)
    z_v = interpolate(rho, mom)

    gamma = params.step
    if gamma is None:
        gamma = params.step_scale * max(a.max(), b.max())
    if not gamma > 0:
        raise InvalidInput("splitting step must be positive")
    lam = params.relaxation
    energies = []
    history = []
    converged = False
    it = 0
    y_u = z_u
    res = math.inf
    energy = math.inf
    # drift is measured against the energy, floored for nearly static problems
    energy_floor = 1e-4 * float(np.sum((src.hi - src.lo) ** 2))
    for it in range(1, params.max_iter + 1):
        xr, xm, xrc, xmc = ops.project_graph(z_u[0], z_u[1], z_v[0], z_v[1])
        yr, ym = ops.project_continuity(2 * xr - z_u[0], [2 * p - q for p, q in zip(xm, z_u[1])], a, b)
        yrc, ymc = prox_kinetic(
            2 * xrc - z_v[0], [2 * p - q for p, q in zip(xmc, z_v[1])], gamma, params.newton_tol
        )
        z_u = (z_u[0] + lam * (yr - xr), [zu + lam * (p - q) for zu, p, q in zip(z_u[1], ym, xm)])
        z_v = (z_v[0] + lam * (yrc - xrc), [zv + lam * (p - q) for zv, p, q in zip(z_v[1], ymc, xmc)])
        y_u = (yr, ym)

        if it % params.check_every == 0 or it == params.max_iter:
            energy = kinetic_energy(yrc, ymc, vol, ds)
            # the graph-projected iterate is feasible only at a fixed point
            res = continuity_residual(SpaceTimeField(src.lo, src.hi, xr, xm))
            energies.append((it, energy))
            history.append((it, energy, res))
            window = [e for i, e in energies if i >= it - params.energy_window]
            if len(window) > 1 and it >= params.energy_window:
                drift = (max(window) - min(window)) / max(abs(energy), energy_floor)
                if res <= params.tol and drift <= params.energy_tol:
                    converged = True
                    break
            if it % (50 * params.check_every) == 0:
                log.debug("iter %d energy %.8g residual %.3e", it, energy, res)

    # the continuity-projected iterate satisfies the constraints and endpoint data exactly
    yr, ym = y_u
    rho_out = np.where(yr < 0, np.maximum(yr, -1e-9 * np.abs(yr).max()), yr)
    fld = SpaceTimeField(np.array(src.lo), np.array(src.hi), rho_out, ym)
    sol = BbSolution(
        field=fld,
        energy=energy,
        continuity_residual=res,
        iterations=it,
        converged=converged,
        history=history,
    )
    if not converged and params.raise_on_failure:
        raise NotConverged(f"no convergence after {it} iterations", partial=sol)
    return sol


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------


def _check_s(s):
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise SOutOfRange(f"s={s} outside [0, 1]")
    return s


def _slice_weights(s, T):
    pos = s * T
    n = min(int(math.floor(pos)), T - 1)
    return n, pos - n


def intermediate_density(sol: BbSolution, s: float) -> GridDensity:
    """Density at synthetic time s, linear between slices, clamped and normalized."""
    s = _check_s(s)
    fld = sol.field
    n, frac = _slice_weights(s, fld.time_steps)
    vals = (1.0 - frac) * fld.rho[n] + frac * fld.rho[n + 1]
    g = GridDensity(fld.lo, fld.hi, np.clip(vals, 0.0, None))
    return normalize(g)


def extract_velocity(sol: BbSolution, s: float, floor: Optional[float] = None):
    """Velocity ``m / rho`` at cell centers at synthetic time s.

    Momentum lives at interval midpoints, so it is interpolated linearly
    between them and held constant on the first and last half intervals;
    the terminal slice therefore carries the last interval's momentum.
    Returns ``(v, flagged)`` with ``v`` of shape ``(*shape, d)``; cells whose
    density is below ``floor`` (default 1e-10 of the slice max) get zero
    velocity and ``flagged`` True.
    """
    s = _check_s(s)
    fld = sol.field
    T = fld.time_steps
    rho = intermediate_density(sol, s).values
    mass_scale = 1.0
    n, frac = _slice_weights(s, T)
    raw = (1.0 - frac) * fld.rho[n] + frac * fld.rho[n + 1]
    if raw.sum() > 0:
        # undo normalize so that m / rho uses the solver's own density scale
        mass_scale = raw.sum() / rho.sum()
    rho = rho * mass_scale
    _, mom_c = interpolate(fld.rho, fld.mom)
    pos = min(max(s * T - 0.5, 0.0), T - 1.0)
    k0 = min(int(math.floor(pos)), T - 2) if T > 1 else 0
    fr = pos - k0
    m_s = [(1.0 - fr) * mc[k0] + fr * mc[min(k0 + 1, T - 1)] for mc in mom_c]
    thr = (1e-10 * rho.max()) if floor is None else floor
    flagged = rho < thr
    safe = np.where(flagged, 1.0, rho)
    v = np.stack([np.where(flagged, 0.0, m / safe) for m in m_s], axis=-1)
    return v, flagged


def grid_measure(g: GridDensity, max_atoms: int = 1200, rel_floor: float = 1e-4) -> DiscreteMeasure:
    """Cells as atoms, merged in 2^k blocks until at most ``max_atoms`` remain.

    Cells below ``rel_floor`` of the largest cell mass are dropped.
    """
    vals = g.values * g.cell_volume
    centers = g.centers().reshape(g.shape + (g.dim,))
    factor = 1
    while True:
        mass = vals
        cen = centers
        if factor > 1:
            cut = tuple(n - n % factor for n in g.shape)
            sl = tuple(slice(0, c) for c in cut)
            mass = vals[sl]
            cen = centers[sl]
            shp = []
            for c in cut:
                shp += [c // factor, factor]
            mass_b = mass.reshape(shp)
            cen_b = (cen * mass[..., None]).reshape(shp + [g.dim])
            red_axes = tuple(range(1, 2 * g.dim, 2))
            mass = mass_b.sum(axis=red_axes)
            cen = cen_b.sum(axis=red_axes)
            with np.errstate(invalid="ignore", divide="ignore"):
                cen = np.where(mass[..., None] > 0, cen / mass[..., None], 0.0)
        m = mass.ravel()
        keep = m > rel_floor * m.max()
        if keep.sum() <= max_atoms or min(g.shape) // (2 * factor) < 1:
            break
        factor *= 2
    m = m[keep]
    return DiscreteMeasure(cen.reshape(-1, g.dim)[keep], m / m.sum())


def geodesic_w_profile(sol: BbSolution, src: GridDensity, samples: int = 11, max_atoms: int = 1200):
    """``[(s, W(src, rho(s)))]`` on ``samples`` equispaced s values.

    Distances come from the discrete solver on grid-cell measures.
    """
    base = grid_measure(src, max_atoms)
    out = []
    for s in np.linspace(0.0, 1.0, samples):
        w = wasserstein(base, grid_measure(intermediate_density(sol, s), max_atoms))
        out.append((float(s), w))
    return out
