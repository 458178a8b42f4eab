"""Numerical Finsler geometry: metric families with analytic jets, connection
and curvature evaluation, geodesic integration and boundary-value solves,
volume measures in polar form, and Monte Carlo verification of integral
curvature comparison inequalities, plus a deterministic CLI front end."""

from . import (comparison, curvature, geodesics, indicatrix, jets, measures,
               models, reporting, streams, tensors)
from .comparison import (ComparisonReport, KNormEstimate, MyersConstants,
                         berwald_density_check, knorm, myers_constants,
                         myers_verify, segment_check, segment_constant,
                         volume_comparison_check)
from .curvature import (connection, flag_curvature, min_ricci, ricci,
                        ricci_trace)
from .errors import (ChartDomainError, ConvexityError,
                     DegenerateDirectionError, FinslerError, IntegrationError,
                     ParameterError, QuadratureError, RadiusError,
                     SamplingError, ShootingError, UnsupportedModelError)
from .geodesics import (GeodesicPath, distance, distance_batch, exp_map,
                        forward_ball_sample, index_form, integrate_geodesic,
                        parallel_frame, transport)
from .measures import (BH, HT, ball_measure, density, distortion,
                       polar_density, s_curvature, space_form_volume)
from .models import (BerwaldProduct, Euclidean, FlatRiemannian, MetricModel,
                     PoincareBall, RandersFlat, RandersPerturbed,
                     ReversibleQuartic, RoundSphere, TangentSample,
                     model_from_config)
from .reporting import ReportEnvelope, emit_geodesic_csv, load_geodesic_csv
from .tensors import average_metric, fundamental_tensor, uniformity_constant

__version__ = "0.1.0"

__all__ = [
    "BH", "HT", "BerwaldProduct", "ChartDomainError", "ComparisonReport",
    "ConvexityError", "DegenerateDirectionError", "Euclidean",
    "FinslerError", "FlatRiemannian", "GeodesicPath", "IntegrationError",
    "KNormEstimate", "MetricModel", "MyersConstants", "ParameterError",
    "PoincareBall", "QuadratureError", "RadiusError", "RandersFlat",
    "RandersPerturbed", "ReportEnvelope", "ReversibleQuartic", "RoundSphere",
    "SamplingError", "ShootingError", "TangentSample",
    "UnsupportedModelError", "average_metric", "ball_measure",
    "berwald_density_check", "comparison", "connection", "curvature",
    "density", "distance", "distance_batch", "distortion",
    "emit_geodesic_csv", "exp_map", "flag_curvature", "forward_ball_sample",
    "fundamental_tensor", "geodesics", "index_form", "indicatrix",
    "integrate_geodesic", "jets", "knorm", "load_geodesic_csv", "measures",
    "min_ricci", "model_from_config", "models", "myers_constants",
    "myers_verify", "parallel_frame", "polar_density", "reporting", "ricci",
    "ricci_trace", "s_curvature", "segment_check", "segment_constant",
    "space_form_volume", "streams", "tensors", "transport",
    "uniformity_constant", "volume_comparison_check",
]
