"""Correcting a baseline model's output map with an optimal transport map.

A model ``x_{j+1} = A x_j, y_j = C x_j`` predicts an output density at each
measurement instant. When a measured density is available, the prediction
is composed with the Brenier map from predicted to measured output. The
state recursion itself is never touched and ``j`` is never advanced here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .discrete_ot import DiscreteMeasure, barycentric_projection, solve_plan
from .errors import DimensionMismatch, InvalidInput, TooLarge, UnequalWeights
from .gaussian_ot import AffineMap, _check_s, _require_pd, brenier_matrix, gaussian_brenier_map
from .measures import GaussianDensity, ParticleEnsemble

EMPIRICAL_MAX = 4096


@dataclass(frozen=True)
class LinearGaussianModel:
    a_mat: np.ndarray
    c_mat: np.ndarray
    initial: GaussianDensity

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.a_mat, dtype=float))
        C = np.atleast_2d(np.asarray(self.c_mat, dtype=float))
        d = A.shape[0]
        if A.shape != (d, d) or C.shape[1] != d or self.initial.dim != d:
            raise DimensionMismatch(
                f"inconsistent model shapes A{A.shape}, C{C.shape}, state dim {self.initial.dim}"
            )
        object.__setattr__(self, "a_mat", A)
        object.__setattr__(self, "c_mat", C)

    @property
    def output_dim(self) -> int:
        return self.c_mat.shape[0]

    def output_gain(self, j: int) -> np.ndarray:
        """``C A^j``."""
        if j < 0:
            raise InvalidInput("instant index must be nonnegative")
        return self.c_mat @ np.linalg.matrix_power(self.a_mat, int(j))


def predict_output_gaussian(m: LinearGaussianModel, j: int) -> GaussianDensity:
    """Output density at instant ``j``: ``N(C A^j mu0, (C A^j) P0 (C A^j)^T)``."""
    G = m.output_gain(j)
    return GaussianDensity(G @ m.initial.mean, G @ m.initial.cov @ G.T)


@dataclass(frozen=True)
class RefinedOutputMap:
    """Refined output ``y = correction(base(x))`` at one measurement instant.

    ``base`` is the model's output matrix (Gaussian case) or ``None`` when
    the correction acts directly on predicted output samples. The empirical
    correction is a point map given on ``support`` (predicted points) with
    ``displacement`` per point.
    """

    instant: Optional[int]
    correction: Optional[AffineMap] = None
    base: Optional[np.ndarray] = None
    support: Optional[np.ndarray] = None
    displacement: Optional[np.ndarray] = None

    @property
    def is_affine(self) -> bool:
        return self.correction is not None

    def correct(self, y) -> np.ndarray:
        """Apply the correction to predicted outputs ``y`` (one point or ``(N, p)``)."""
        y = np.asarray(y, dtype=float)
        if self.correction is not None:
            return self.correction(y)
        single = y.ndim == 1
        pts = np.atleast_2d(y)
        # out-of-sample points borrow the displacement of the nearest support point
        _, idx = cKDTree(self.support).query(pts)
        out = pts + self.displacement[idx]
        return out[0] if single else out

    def __call__(self, x) -> np.ndarray:
        """Refined output of states ``x``; needs the base output matrix."""
        if self.base is None:
            raise InvalidInput("no base output map; use correct() on outputs")
        return self.correct(np.asarray(x, dtype=float) @ self.base.T)


def refine_gaussian(
    truth: LinearGaussianModel,
    model: LinearGaussianModel,
    j: int,
    previous: Optional[RefinedOutputMap] = None,
) -> RefinedOutputMap:
    """Brenier correction from the model's to the true output density at ``j``.

    Corrections are per-instant by default. Passing the correction of an
    earlier instant as ``previous`` (chained mode) first pushes the model
    prediction through it and returns the composed map.
    """
    pred = predict_output_gaussian(model, j)
    meas = predict_output_gaussian(truth, j)
    if pred.dim != meas.dim:
        raise DimensionMismatch("model and truth have different output dimensions")
    if previous is not None:
        if previous.correction is None:
            raise InvalidInput("chained mode needs an affine earlier correction")
        fresh = gaussian_brenier_map(previous.correction.push(pred), meas)
        corr = fresh.compose(previous.correction)
    else:
        corr = gaussian_brenier_map(pred, meas)
    return RefinedOutputMap(instant=j, correction=corr, base=model.output_gain(j))


def refine_sequence(
    truth: LinearGaussianModel,
    model: LinearGaussianModel,
    instants: Sequence[int],
    chained: bool = False,
) -> list:
    """One correction per instant; ``chained`` composes each with the last one."""
    out = []
    prev = None
    for j in instants:
        r = refine_gaussian(truth, model, j, previous=prev if chained else None)
        out.append(r)
        prev = r
    return out


def refinement_path(
    truth: LinearGaussianModel, model: LinearGaussianModel, j: int, s: float
) -> GaussianDensity:
    """Intermediate output density at fraction ``s`` of the refinement at ``j``.

    Built directly from the model matrices: the mean interpolates
    ``C_hat A_hat^j mu0`` and ``C A^j mu0``, the covariance is the model
    output covariance conjugated by ``(1 - s) I + s Gamma(j)``.
    """
    s = _check_s(s)
    G_hat = model.output_gain(j)
    G = truth.output_gain(j)
    mu0, P0 = model.initial.mean, model.initial.cov
    mean = ((1.0 - s) * G_hat @ mu0) + s * (G @ truth.initial.mean)
    cov_hat = G_hat @ P0 @ G_hat.T
    cov = G @ truth.initial.cov @ G.T
    _require_pd(GaussianDensity(mean, cov_hat), "model output")
    _require_pd(GaussianDensity(mean, cov), "true output")
    gamma = brenier_matrix(cov_hat, cov)
    L = (1.0 - s) * np.eye(len(mean)) + s * gamma
    return GaussianDensity(mean, L @ cov_hat @ L.T)


def _equal_weights(e: ParticleEnsemble) -> bool:
    return np.max(np.abs(e.weights - 1.0 / e.size)) <= 1e-12


def refine_empirical(
    predicted: ParticleEnsemble, measured: ParticleEnsemble, instant: Optional[int] = None
) -> RefinedOutputMap:
    """Point-map correction from predicted to measured output samples.

    The optimal discrete plan is reduced to a map by sending each predicted
    point to the plan-weighted mean of its targets.
    """
    if predicted.dim != measured.dim:
        raise DimensionMismatch("predicted and measured samples differ in dimension")
    if max(predicted.size, measured.size) > EMPIRICAL_MAX:
        raise TooLarge(f"empirical refinement is limited to {EMPIRICAL_MAX} samples")
    if not (_equal_weights(predicted) and _equal_weights(measured)):
        raise UnequalWeights("empirical refinement needs equally weighted ensembles")
    plan = solve_plan(DiscreteMeasure.uniform(predicted.points), DiscreteMeasure.uniform(measured.points))
    image = barycentric_projection(plan)
    return RefinedOutputMap(
        instant=instant,
        support=predicted.points.copy(),
        displacement=image - predicted.points,
    )
