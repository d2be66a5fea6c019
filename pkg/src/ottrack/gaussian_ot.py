"""Closed-form optimal transport between Gaussian densities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonPsdInput, SingularCovariance, SOutOfRange
from .measures import PSD_TOL, GaussianDensity

SINGULAR_TOL = 1e-12


@dataclass(frozen=True)
class AffineMap:
    """The map ``x -> gamma_mat @ x + gamma_vec``."""

    gamma_mat: np.ndarray
    gamma_vec: np.ndarray

    def __post_init__(self):
        mat = np.atleast_2d(np.asarray(self.gamma_mat, dtype=float))
        vec = np.atleast_1d(np.asarray(self.gamma_vec, dtype=float)).ravel()
        if mat.shape != (vec.size, vec.size):
            raise DimensionMismatch("affine map needs a square matrix matching the offset")
        mat.setflags(write=False)
        vec.setflags(write=False)
        object.__setattr__(self, "gamma_mat", mat)
        object.__setattr__(self, "gamma_vec", vec)

    @property
    def dim(self) -> int:
        return self.gamma_vec.size

    @classmethod
    def identity(cls, d: int) -> "AffineMap":
        return cls(np.eye(d), np.zeros(d))

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x @ self.gamma_mat.T + self.gamma_vec

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """``self ∘ inner``."""
        return AffineMap(
            self.gamma_mat @ inner.gamma_mat,
            self.gamma_mat @ inner.gamma_vec + self.gamma_vec,
        )

    def push(self, g: GaussianDensity) -> GaussianDensity:
        """Image of a Gaussian under the map."""
        mat = self.gamma_mat
        return GaussianDensity(mat @ g.mean + self.gamma_vec, mat @ g.cov @ mat.T)


def _eigh_psd(S):
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if S.shape[0] != S.shape[1]:
        raise DimensionMismatch("matrix must be square")
    S = 0.5 * (S + S.T)
    evals, evecs = np.linalg.eigh(S)
    if evals.size and evals.min() < -PSD_TOL * max(np.trace(S), 0.0):
        raise NonPsdInput(f"matrix has eigenvalue {evals.min():.3e}")
    return np.clip(evals, 0.0, None), evecs


def sqrtm_psd(S) -> np.ndarray:
    """Symmetric PSD square root through a symmetric eigendecomposition."""
    evals, evecs = _eigh_psd(S)
    R = (evecs * np.sqrt(evals)) @ evecs.T
    return 0.5 * (R + R.T)


def _inv_sqrtm_pd(S) -> np.ndarray:
    evals, evecs = _eigh_psd(S)
    R = (evecs / np.sqrt(evals)) @ evecs.T
    return 0.5 * (R + R.T)


def _require_pd(g: GaussianDensity, which: str) -> None:
    evals = np.linalg.eigvalsh(g.cov)
    if evals.min() <= SINGULAR_TOL * np.trace(g.cov):
        raise SingularCovariance(f"{which} covariance is not positive definite")


def brenier_matrix(cov_src, cov_tgt) -> np.ndarray:
    """Linear part of the Brenier map between centered Gaussians.

    ``Gamma = S^(1/2) (S^(1/2) P S^(1/2))^(-1/2) S^(1/2)`` with ``P`` the
    source and ``S`` the target covariance.
    """
    root_t = sqrtm_psd(cov_tgt)
    mid = _inv_sqrtm_pd(root_t @ cov_src @ root_t)
    gamma = root_t @ mid @ root_t
    return 0.5 * (gamma + gamma.T)


def gaussian_brenier_map(src: GaussianDensity, tgt: GaussianDensity) -> AffineMap:
    """Optimal map pushing ``src`` onto ``tgt``.

    The offset is ``mu_tgt - Gamma mu_src`` so that the map carries the
    source mean onto the target mean; for centered sources it reduces to
    the difference of the means.
    """
    if src.dim != tgt.dim:
        raise DimensionMismatch("Gaussians of different dimension")
    _require_pd(src, "source")
    _require_pd(tgt, "target")
    gamma = brenier_matrix(src.cov, tgt.cov)
    return AffineMap(gamma, tgt.mean - gamma @ src.mean)


def _is_pd(cov) -> bool:
    return np.linalg.eigvalsh(cov).min() > SINGULAR_TOL * np.trace(cov)


def gaussian_wasserstein(a: GaussianDensity, b: GaussianDensity) -> float:
    """Closed-form order-2 Wasserstein distance between Gaussians.

    For positive definite covariances the squared distance is evaluated as
    the transport cost of the Brenier map, ``|dm|^2 + tr((G - I) A (G - I))``,
    which stays accurate when the two Gaussians nearly coincide. The trace
    formula with the cross root is used otherwise.
    """
    if a.dim != b.dim:
        raise DimensionMismatch("Gaussians of different dimension")
    dm = a.mean - b.mean
    if _is_pd(a.cov) and _is_pd(b.cov):
        D = brenier_matrix(a.cov, b.cov) - np.eye(a.dim)
        w2 = dm @ dm + np.trace(D @ a.cov @ D)
    else:
        root_b = sqrtm_psd(b.cov)
        cross = sqrtm_psd(root_b @ a.cov @ root_b)
        w2 = dm @ dm + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross)
    return math.sqrt(max(float(w2), 0.0))


def map_transport_cost(m: AffineMap, g: GaussianDensity) -> float:
    """``E ||m(x) - x||^2`` for ``x ~ g``, in closed form."""
    D = m.gamma_mat - np.eye(m.dim)
    shift = D @ g.mean + m.gamma_vec
    return float(shift @ shift + np.trace(D @ g.cov @ D.T))


def _check_s(s: float) -> float:
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise SOutOfRange(f"s={s} outside [0, 1]")
    return s


def interpolate_map(m: AffineMap, s: float) -> AffineMap:
    """``(1 - s) Id + s m``."""
    s = _check_s(s)
    return AffineMap((1.0 - s) * np.eye(m.dim) + s * m.gamma_mat, s * m.gamma_vec)


def displacement_interpolate(
    src: GaussianDensity, tgt: GaussianDensity, s: float
) -> GaussianDensity:
    """Point at fraction ``s`` along the Wasserstein geodesic from src to tgt."""
    s = _check_s(s)
    gamma = gaussian_brenier_map(src, tgt).gamma_mat
    L = (1.0 - s) * np.eye(src.dim) + s * gamma
    return GaussianDensity((1.0 - s) * src.mean + s * tgt.mean, L @ src.cov @ L)
