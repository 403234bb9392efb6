"""regnorm: smooth convex surrogates and regularity certificates for
aggregated, quotient, ellitopic and spectratopic norms."""

from .aggregation import (
    AggregateState,
    MinimizerResult,
    aggregate_absolute,
    aggregate_general,
    make_aggregate_state,
    phi_eval,
    phi_grad,
    t_of_x,
)
from .builder import build_certificate, norm_value
from .catalog import (
    lp_sq_eval_grad,
    schatten_sq_eval_grad,
    smooth_surrogate_for_linf,
    smooth_surrogate_for_spectral,
)
from .certify import (
    CertifyReport,
    brute_force_phi,
    certify_surrogate,
    check_gradient,
    check_sandwich,
    check_smoothness,
)
from .core import (
    AggregateDescriptor,
    BlockVector,
    EllitopeNormDescriptor,
    LpDescriptor,
    PullbackDescriptor,
    QuotientDescriptor,
    RegularityCertificate,
    SchattenDescriptor,
    SmoothSquaredNorm,
    SpectratopeNormDescriptor,
    approximation_certificate,
    pullback_certificate,
)
from .geometry import (
    Ellitope,
    Spectratope,
    ellitope,
    ellitope_norm_eval,
    membership,
    regular_surrogate,
    spectratope,
    spectratope_norm_eval,
)
from .proxlab import ProxProblem, mirror_descent, random_quadratic
from .quotient import QuotientNorm, quotient_certificate, quotient_eval, quotient_grad, quotient_norm
from .theta import ThetaAggregator, bar_augment, theta_lq, unit_scale

__version__ = "0.1.0"


def default_suite_path():
    """Path of the shipped descriptor suite used by the certification tests."""
    import importlib.resources

    return str(importlib.resources.files("regnorm").joinpath("data/default_suite.json"))
