"""Historical functional linear regression with a nested group bridge penalty.

Estimates a scalar-on-function slope that vanishes after an unknown cutoff
time, using B-splines, a roughness penalty and BIC tuning.
"""
from importlib import resources

from .bspline import BSplineBasis, SplineFunction, make_basis
from .design import FunctionalDataset, build_design, center
from .estimator import NGBConfig, NGBFit, fit_ngb, tune_fit, tune_smoothing_spline
from .inference import BootstrapBand, bootstrap_band

__version__ = "0.1.0"

__all__ = [
    "BSplineBasis",
    "SplineFunction",
    "make_basis",
    "FunctionalDataset",
    "build_design",
    "center",
    "NGBConfig",
    "NGBFit",
    "fit_ngb",
    "tune_fit",
    "tune_smoothing_spline",
    "BootstrapBand",
    "bootstrap_band",
    "example_data_paths",
]


def example_data_paths():
    """Paths of the packaged 108-curve, 61-point example (curves, responses)."""
    root = resources.files(__name__).joinpath("data")
    return (str(root.joinpath("application_curves.csv")),
            str(root.joinpath("application_responses.csv")))
