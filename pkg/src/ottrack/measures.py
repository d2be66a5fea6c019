"""Density carriers: gridded PDFs, weighted particle clouds and Gaussians.

Grid values live at cell centers and every integral is a midpoint Riemann
sum, so the mass of a grid is ``values.sum() * cell_volume``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    AllZeroDensity,
    DegenerateEnsemble,
    DimensionMismatch,
    InvalidInput,
    MissingDensityValues,
    NegativeDensity,
    NonPsdCovariance,
    PointOutOfBounds,
    UnnormalizedInput,
)

MASS_TOL = 1e-4
PSD_TOL = 1e-10
SYMMETRY_TOL = 1e-10


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GridDensity:
    """Nonnegative density sampled at the cell centers of a box ``[lo, hi]``.

    ``values`` has shape ``shape``; flattening it in C order gives the
    row-major layout used on disk (last axis fastest).
    """

    lo: np.ndarray
    hi: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        lo = _frozen(np.atleast_1d(self.lo))
        hi = _frozen(np.atleast_1d(self.hi))
        values = _frozen(self.values)
        if lo.ndim != 1 or lo.shape != hi.shape:
            raise DimensionMismatch("lo and hi must be 1-D arrays of equal length")
        if values.ndim != lo.size:
            raise DimensionMismatch(
                f"values has {values.ndim} axes but the box has dimension {lo.size}"
            )
        if np.any(lo >= hi):
            raise InvalidInput("need lo[k] < hi[k] on every axis")
        if not np.all(np.isfinite(values)):
            raise InvalidInput("grid values must be finite")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.lo.size

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def cell_size(self) -> np.ndarray:
        return (self.hi - self.lo) / np.asarray(self.shape)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.cell_size))

    def axes(self) -> list:
        """Cell-center coordinates along each axis."""
        h = self.cell_size
        return [self.lo[k] + h[k] * (np.arange(n) + 0.5) for k, n in enumerate(self.shape)]

    def centers(self) -> np.ndarray:
        """All cell centers as an ``(n_cells, dim)`` array in row-major order."""
        mesh = np.meshgrid(*self.axes(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def mass(self) -> float:
        return float(self.values.sum() * self.cell_volume)

    def same_geometry(self, other: "GridDensity") -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.lo, other.lo)
            and np.array_equal(self.hi, other.hi)
        )

    def with_values(self, values) -> "GridDensity":
        return GridDensity(self.lo, self.hi, np.asarray(values).reshape(self.shape))


@dataclass(frozen=True)
class ParticleEnsemble:
    """Weighted points, optionally carrying the exact PDF value at each point."""

    points: np.ndarray
    weights: np.ndarray
    density_values: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.array(self.weights, dtype=float).ravel()
        if pts.ndim != 2 or pts.shape[0] != w.size:
            raise DimensionMismatch("points must be (N, d) with one weight per point")
        if np.any(w < 0):
            raise InvalidInput("particle weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-9:
            raise InvalidInput(f"particle weights sum to {w.sum():.12g}, expected 1")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "weights", _frozen(w))
        if self.density_values is not None:
            dv = np.array(self.density_values, dtype=float).ravel()
            if dv.size != w.size:
                raise DimensionMismatch("one density value per point required")
            if np.any(dv <= 0):
                raise InvalidInput("density values must be strictly positive")
            object.__setattr__(self, "density_values", _frozen(dv))

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @classmethod
    def uniform_weights(cls, points, density_values=None) -> "ParticleEnsemble":
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n), density_values)


def repair_psd(cov, tol: float = PSD_TOL) -> np.ndarray:
    """Symmetrize ``cov`` and clamp eigenvalues in ``(-tol*trace, 0)`` to zero.

    Larger negative eigenvalues raise :class:`NonPsdCovariance`.
    """
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1]:
        raise DimensionMismatch("covariance must be square")
    scale = np.max(np.abs(cov)) if cov.size else 0.0
    if np.max(np.abs(cov - cov.T), initial=0.0) > SYMMETRY_TOL * max(scale, 1e-300):
        raise NonPsdCovariance("covariance is not symmetric")
    cov = 0.5 * (cov + cov.T)
    evals, evecs = np.linalg.eigh(cov)
    floor = -tol * max(np.trace(cov), 0.0)
    if evals.size and evals.min() < floor:
        raise NonPsdCovariance(f"covariance has eigenvalue {evals.min():.3e}")
    if evals.size and evals.min() < 0:
        evals = np.clip(evals, 0.0, None)
        cov = (evecs * evals) @ evecs.T
        cov = 0.5 * (cov + cov.T)
    return cov


@dataclass(frozen=True)
class GaussianDensity:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).ravel()
        cov = repair_psd(self.cov)
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(
                f"mean has length {mean.size} but cov has shape {cov.shape}"
            )
        object.__setattr__(self, "mean", _frozen(mean))
        object.__setattr__(self, "cov", _frozen(cov))

    @property
    def dim(self) -> int:
        return self.mean.size

    def pdf(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        diff = x - self.mean
        sign, logdet = np.linalg.slogdet(self.cov)
        if sign <= 0:
            raise NonPsdCovariance("pdf needs a positive definite covariance")
        sol = np.linalg.solve(self.cov, diff.T).T
        quad = np.einsum("ij,ij->i", diff, sol)
        return np.exp(-0.5 * (quad + logdet + self.dim * np.log(2 * np.pi)))


def normalize(g: GridDensity) -> GridDensity:
    """Rescale ``g`` so its midpoint Riemann sum is one."""
    if np.any(g.values < 0):
        raise NegativeDensity("grid has negative values")
    mass = g.mass()
    if mass <= 0:
        raise AllZeroDensity("grid has no positive value")
    # already at unit mass up to rounding: return as-is so normalize is idempotent
    if abs(mass - 1.0) <= 1e-12:
        return g
    return g.with_values(g.values / mass)


def moments(g: GridDensity, within_cell: bool = True):
    """Mean vector and covariance matrix of a normalized grid density.

    The density is read as constant on each cell, which adds the uniform
    in-cell variance ``h_k^2 / 12`` to the diagonal; ``within_cell=False``
    gives the plain midpoint sum over cell centers.
    """
    mass = g.mass()
    if abs(mass - 1.0) > MASS_TOL:
        raise UnnormalizedInput(f"grid mass is {mass:.6g}, expected 1")
    c = g.centers()
    w = g.values.ravel() * g.cell_volume
    mean = w @ c
    d = c - mean
    cov = (d * w[:, None]).T @ d
    if within_cell:
        cov = cov + np.diag(g.cell_size**2 / 12.0) * w.sum()
    return mean, 0.5 * (cov + cov.T)


def default_support_radius(points: np.ndarray, cell_size: np.ndarray) -> float:
    """Twice the median nearest-neighbour spacing, but never below a cell diagonal."""
    diag = float(np.linalg.norm(cell_size))
    if points.shape[0] < 2:
        return diag
    dist, _ = cKDTree(points).query(points, k=2)
    return max(2.0 * float(np.median(dist[:, 1])), diag)


def grid_from_particles(
    p: ParticleEnsemble,
    lo,
    hi,
    shape,
    k: int = 8,
    power: float = 2.0,
    support_radius: Optional[float] = None,
) -> GridDensity:
    """Interpolate particle density values onto a regular grid.

    Inverse-distance weighting (power ``power``) over the ``k`` nearest
    particles of each cell center. Cells farther than ``support_radius``
    from every particle are set to zero, otherwise IDW would extend the
    density over the whole box. The result is clamped and normalized.
    """
    if p.density_values is None:
        raise MissingDensityValues("particles carry no density values")
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if lo.size != p.dim or hi.size != p.dim or len(shape) != p.dim:
        raise DimensionMismatch("grid geometry does not match particle dimension")
    if p.size < p.dim + 1:
        raise DegenerateEnsemble(
            f"{p.size} particles cannot support a {p.dim}-D density"
        )
    if np.any(p.points < lo) or np.any(p.points > hi):
        raise PointOutOfBounds("some particles lie outside the grid box")

    template = GridDensity(lo, hi, np.zeros(shape))
    nodes = template.centers()
    tree = cKDTree(p.points)
    kk = min(k, p.size)
    dist, idx = tree.query(nodes, k=kk)
    if kk == 1:
        dist, idx = dist[:, None], idx[:, None]
    vals = p.density_values[idx]
    with np.errstate(divide="ignore"):
        w = 1.0 / dist**power
    exact = dist[:, 0] == 0.0
    w[exact] = 0.0
    w[exact, 0] = 1.0
    out = (w * vals).sum(axis=1) / w.sum(axis=1)

    radius = (
        default_support_radius(p.points, template.cell_size)
        if support_radius is None
        else float(support_radius)
    )
    out[dist[:, 0] > radius] = 0.0
    out = np.clip(out, 0.0, None)
    return normalize(template.with_values(out))


def sample_gaussian(g: GaussianDensity, n: int, seed: int) -> ParticleEnsemble:
    """Draw ``n`` equally weighted samples with numpy's PCG64 generator.

    Exact PDF values are attached when the covariance is positive definite.
    """
    if n < 1:
        raise InvalidInput("need at least one sample")
    rng = np.random.default_rng(seed)
    evals, evecs = np.linalg.eigh(g.cov)
    factor = evecs * np.sqrt(np.clip(evals, 0.0, None))
    z = rng.standard_normal((n, g.dim))
    pts = g.mean + z @ factor.T
    dens = None
    if evals.min() > PSD_TOL * max(np.trace(g.cov), 1e-300):
        dens = np.maximum(g.pdf(pts), np.finfo(float).tiny)
    return ParticleEnsemble(pts, np.full(n, 1.0 / n), dens)


def rasterize_gaussian(g: GaussianDensity, lo, hi, shape) -> GridDensity:
    """Gaussian PDF sampled at cell centers, normalized on the box."""
    template = GridDensity(lo, hi, np.zeros(tuple(np.atleast_1d(shape))))
    return normalize(template.with_values(g.pdf(template.centers())))
