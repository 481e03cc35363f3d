"""Post-training quantization toolkit.

Calibrates per-layer quantization step sizes of a small inference graph by
minimizing the task loss on a calibration set: layer-wise Lp-error
calibration over a grid of exponents, a quadratic pick of the starting
point, and joint derivative-free refinement. Ships loss-landscape
diagnostics (grid scans, finite-difference Hessian, Gaussian curvature,
interaction terms) and per-channel bias correction of quantized weights.
"""

from .bias import bias_correct
from .calibrate import DEFAULT_P_GRID, PNormSample, calibrate_model, calibrate_tensor
from .errors import DegenerateInputError, FormatError, QtkError, ShapeError
from .graph import (
    CalibSet,
    Layer,
    Model,
    StepEntry,
    StepVector,
    accuracy,
    collect_activations,
    forward,
    load_model,
    loss,
    save_model,
    subset,
)
from .landscape import (
    CurvatureReport,
    HessianMatrix,
    gaussian_curvature,
    gradient_fd,
    grid_scan,
    hessian_fd,
    interaction_split,
    interaction_term,
    loss_evaluator,
)
from .optimize import (
    CalibrationResult,
    LineSearchConfig,
    PipelineConfig,
    PowellConfig,
    PowellResult,
    choose_start,
    fit_quadratic,
    joint_calibrate,
    powell_minimize,
)
from .quantizer import QuantParams, clipping_of, lp_error, params_from_clipping, quantize
from .tensor import Tensor, load_qtn, save_qtn, tensor

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "tensor",
    "load_qtn",
    "save_qtn",
    "QuantParams",
    "quantize",
    "clipping_of",
    "params_from_clipping",
    "lp_error",
    "Layer",
    "Model",
    "CalibSet",
    "StepEntry",
    "StepVector",
    "forward",
    "loss",
    "accuracy",
    "collect_activations",
    "load_model",
    "save_model",
    "subset",
    "DEFAULT_P_GRID",
    "PNormSample",
    "calibrate_tensor",
    "calibrate_model",
    "LineSearchConfig",
    "PowellConfig",
    "PowellResult",
    "PipelineConfig",
    "CalibrationResult",
    "fit_quadratic",
    "choose_start",
    "powell_minimize",
    "joint_calibrate",
    "bias_correct",
    "HessianMatrix",
    "CurvatureReport",
    "loss_evaluator",
    "grid_scan",
    "gradient_fd",
    "hessian_fd",
    "gaussian_curvature",
    "interaction_term",
    "interaction_split",
    "QtkError",
    "ShapeError",
    "FormatError",
    "DegenerateInputError",
    "__version__",
]
