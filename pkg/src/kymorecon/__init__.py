"""Sub-pixel kymograph reconstruction from fluorescence image stacks.

A virtual microscope renders curvilinear objects carrying a fluorescence
density; a MAP estimator with a Poisson likelihood and first-order
innovation priors recovers that density along the curve from the stacks.
"""

__version__ = "0.1.0"

from ._validation import DomainError, FormatError, SolverDivergenceError
from .baselines import ExponentialBackground, Kymograph, fit_background, nn_kymograph, parametric_ml_fit
from .conditioning import PoissonML, assemble_point_source_matrix, rcn, run_error_sweep, run_rcn_sweep
from .geometry import LineCurve, SplineCurve, build_virtual_sources, embed_point, metric
from .microscope import (
    BackgroundModel,
    CameraModel,
    ImagingConfig,
    PsfModel,
    build_system,
    expected_counts,
    simulate_frame,
)
from .photometry import BasisSpec, InnovationPrior, PhotometryVector, whitening_matrix
from .solver import MAPKymograph, SolverConfig, run_map

__all__ = [
    "BackgroundModel", "BasisSpec", "CameraModel", "DomainError", "ExponentialBackground", "FormatError",
    "ImagingConfig", "InnovationPrior", "Kymograph", "LineCurve", "MAPKymograph", "PhotometryVector",
    "PoissonML", "PsfModel", "SolverConfig", "SolverDivergenceError", "SplineCurve",
    "assemble_point_source_matrix", "build_system", "build_virtual_sources", "embed_point",
    "expected_counts", "fit_background", "metric", "nn_kymograph", "parametric_ml_fit", "rcn",
    "run_error_sweep", "run_map", "run_rcn_sweep", "simulate_frame", "whitening_matrix",
]
