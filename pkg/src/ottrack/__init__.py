"""Optimal transport tools for tracking and refining distributional dynamics."""

from .benamou_brenier import BbSolution, SolverParams, SpaceTimeField, bb_solve
from .discrete_ot import DiscreteMeasure, TransportPlan, solve_plan, wasserstein
from .gaussian_ot import AffineMap, displacement_interpolate, gaussian_brenier_map, gaussian_wasserstein
from .liouville import VectorFieldSpec, duffing_dataset, propagate
from .lti_feedback import LtiSystem, check_feasibility, synthesize
from .measures import GaussianDensity, GridDensity, ParticleEnsemble
from .refine import LinearGaussianModel, refine_empirical, refine_gaussian, refinement_path

__version__ = "0.1.0"

__all__ = [
    "AffineMap",
    "BbSolution",
    "DiscreteMeasure",
    "GaussianDensity",
    "GridDensity",
    "LinearGaussianModel",
    "LtiSystem",
    "ParticleEnsemble",
    "SolverParams",
    "SpaceTimeField",
    "TransportPlan",
    "VectorFieldSpec",
    "bb_solve",
    "check_feasibility",
    "displacement_interpolate",
    "duffing_dataset",
    "gaussian_brenier_map",
    "gaussian_wasserstein",
    "propagate",
    "refine_empirical",
    "refine_gaussian",
    "refinement_path",
    "solve_plan",
    "synthesize",
    "wasserstein",
]
