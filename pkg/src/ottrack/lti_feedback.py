"""Affine state feedback that steers Gaussian state densities along OT maps.

For ``x+ = A x + B u`` and Gaussian densities ``src -> tgt``, the optimal
transport is the affine Brenier map ``x -> Gamma x + gamma``. A feedback
``u = K x + kappa`` realizes it exactly when ``A + B K = Gamma`` and
``B kappa = gamma`` are solvable, i.e. when ``Gamma - A`` and ``gamma`` lie
in the range of ``B``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DimensionMismatch, InfeasibleSteering
from .gaussian_ot import AffineMap, gaussian_brenier_map
from .measures import GaussianDensity

FEASIBILITY_TOL = 1e-8
PINV_CUTOFF = 1e-12


def pinv(M) -> np.ndarray:
    """Moore-Penrose pseudo-inverse; singular values below 1e-12 * s_max are dropped."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return M.T.copy()
    U, sv, Vt = np.linalg.svd(M, full_matrices=False)
    keep = sv > PINV_CUTOFF * (sv[0] if sv.size else 0.0)
    inv = np.zeros_like(sv)
    inv[keep] = 1.0 / sv[keep]
    return (Vt.T * inv) @ U.T


@dataclass(frozen=True)
class LtiSystem:
    a_mat: np.ndarray
    b_mat: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.a_mat, dtype=float))
        B = np.asarray(self.b_mat, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise DimensionMismatch(f"incompatible shapes A{A.shape}, B{B.shape}")
        object.__setattr__(self, "a_mat", A)
        object.__setattr__(self, "b_mat", B)

    @property
    def state_dim(self) -> int:
        return self.a_mat.shape[0]

    @property
    def input_dim(self) -> int:
        return self.b_mat.shape[1]


@dataclass(frozen=True)
class FeedbackLaw:
    """``u = k_mat @ x + kappa``; ``free_pair`` records the (R, r) used."""

    k_mat: np.ndarray
    kappa: np.ndarray
    free_pair: Optional[tuple] = None


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    residual_mat: float
    residual_vec: float
    b_full_rank: bool
    brenier: Optional[AffineMap] = None


def _range_residuals(sys: LtiSystem, target: AffineMap):
    B = sys.b_mat
    proj = np.eye(sys.state_dim) - B @ pinv(B)
    D = target.gamma_mat - sys.a_mat
    res_mat = float(np.linalg.norm(proj @ D, "fro"))
    res_vec = float(np.linalg.norm(proj @ target.gamma_vec))
    scale = 1.0 + np.linalg.norm(D, "fro") + np.linalg.norm(target.gamma_vec)
    return res_mat, res_vec, scale


def check_feasibility(
    sys: LtiSystem, src: GaussianDensity, tgt: GaussianDensity
) -> FeasibilityReport:
    """Can some affine feedback realize the Brenier map from src to tgt?

    ``b_full_rank`` is true when B has full row rank, in which case every
    horizon is feasible.
    """
    if src.dim != sys.state_dim or tgt.dim != sys.state_dim:
        raise DimensionMismatch("Gaussian dimension differs from the state dimension")
    bmap = gaussian_brenier_map(src, tgt)
    res_mat, res_vec, scale = _range_residuals(sys, bmap)
    tol = FEASIBILITY_TOL * scale
    full = np.linalg.matrix_rank(sys.b_mat) == sys.state_dim
    return FeasibilityReport(
        feasible=bool(res_mat <= tol and res_vec <= tol),
        residual_mat=res_mat,
        residual_vec=res_vec,
        b_full_rank=bool(full),
        brenier=bmap,
    )


def synthesize(
    sys: LtiSystem,
    src: GaussianDensity,
    tgt: GaussianDensity,
    free_pair: Optional[tuple] = None,
) -> FeedbackLaw:
    """Feedback gains realizing the optimal Gaussian transport over one horizon.

    ``K = B+ (Gamma - A) - (I - B+ B) R`` and ``kappa = B+ gamma - (I - B+ B) r``.
    The free pair ``(R, r)`` (m x d, length m) only moves the gains within the
    null space of B and leaves the closed loop unchanged. It defaults to zero,
    which gives the minimum-norm gains.
    """
    report = check_feasibility(sys, src, tgt)
    if not report.feasible:
        raise InfeasibleSteering(report)
    B = sys.b_mat
    Bp = pinv(B)
    m, d = sys.input_dim, sys.state_dim
    K = Bp @ (report.brenier.gamma_mat - sys.a_mat)
    kappa = Bp @ report.brenier.gamma_vec
    if free_pair is not None:
        R = np.asarray(free_pair[0], dtype=float).reshape(m, d)
        r = np.asarray(free_pair[1], dtype=float).reshape(m)
        null = np.eye(m) - Bp @ B
        K = K - null @ R
        kappa = kappa - null @ r
        free_pair = (R, r)
    return FeedbackLaw(K, kappa, free_pair)


def closed_loop_map(sys: LtiSystem, law: FeedbackLaw) -> AffineMap:
    """The state map ``x -> (A + B K) x + B kappa``."""
    if law.k_mat.shape != (sys.input_dim, sys.state_dim) or law.kappa.shape != (
        sys.input_dim,
    ):
        raise DimensionMismatch("feedback gains do not match the system")
    return AffineMap(sys.a_mat + sys.b_mat @ law.k_mat, sys.b_mat @ law.kappa)


def closed_loop_push(
    sys: LtiSystem, law: FeedbackLaw, src: GaussianDensity
) -> GaussianDensity:
    if src.dim != sys.state_dim:
        raise DimensionMismatch("Gaussian dimension differs from the state dimension")
    return closed_loop_map(sys, law).push(src)


def plan_sequence(
    systems: Union[LtiSystem, Sequence[LtiSystem]],
    pdfs: Sequence[GaussianDensity],
    free_pair: Optional[tuple] = None,
) -> list:
    """One feedback law per horizon ``pdfs[j] -> pdfs[j+1]``.

    A single system is reused for every horizon; a list gives a different
    (A_j, B_j) per horizon.
    """
    if isinstance(systems, LtiSystem):
        systems = [systems] * (len(pdfs) - 1)
    if len(systems) != len(pdfs) - 1:
        raise DimensionMismatch(
            f"{len(systems)} systems for {len(pdfs) - 1} horizons"
        )
    laws = []
    for j, sys in enumerate(systems):
        try:
            laws.append(synthesize(sys, pdfs[j], pdfs[j + 1], free_pair))
        except InfeasibleSteering as exc:
            raise InfeasibleSteering(exc.report, horizon=j) from None
    return laws
