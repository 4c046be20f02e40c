"""Diffeomorphic registration by broken geodesics of stationary velocity fields."""
from .broken_geodesic import (
    BrokenGeodesic,
    DriverConfig,
    forward_backward,
    path_metric,
    replay,
    run_broken_geodesic,
)
from .demons import LegConfig, LegResult, NumericalError, demons_update, energy, register_leg, v_norm
from .evaluation import EvalReport, LabelImage, dice, evaluate_pair, transfer_labels
from .field_core import (
    ContractError,
    DisplacementTransform,
    GridMismatchError,
    ScalarImage,
    VectorField,
    compose,
    gaussian_smooth,
    gradient,
    interpolate,
    jacobian_determinant,
    warp,
)
from .svf_exp import ExpConfig, exp_oracle, exp_svf, inverse_transform
from .synth import SynthSpec, generate_deformation, make_pair, metric_vs_degree, phantom

__version__ = "0.1.0"
