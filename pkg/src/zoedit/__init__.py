"""zoedit — forward-only (backprop-free) knowledge editing for small
decoder-only transformers, with zeroth-order value optimization, closed-form
rank-one weight injection, W8A16 quantization emulation, and a Monte Carlo
lab for quantization-noise propagation."""

from .checkpoint import load_checkpoint, save_checkpoint
from .editor import (
    CovarianceEstimate,
    EditReport,
    EditRequest,
    KeyVector,
    PrefixSet,
    RankOneResult,
    ValueState,
    ZOConfig,
    compute_key,
    edit,
    edit_loss,
    estimate_covariance,
    optimize_value,
    rank_one_update,
    sample_prefixes,
    success_check,
)
from .model import (
    ForwardResult,
    ModelBundle,
    ModelConfig,
    PrefixCache,
    TapRequest,
    ValueOverride,
    build_prefix_cache,
    forward,
    greedy_decode,
    init_weights,
    kl_divergence,
    log_prob,
    replace_downproj,
)
from .quant import (
    CalibrationStats,
    MixedPrecisionPolicy,
    QuantSpec,
    calibrate,
    fp_flop_fraction,
    quantize_model,
)
from .zo import CosineLR, StaticLR, sample_direction, zo_gradient

__version__ = "0.1.0"

__all__ = [
    "CalibrationStats",
    "CosineLR",
    "CovarianceEstimate",
    "EditReport",
    "EditRequest",
    "ForwardResult",
    "KeyVector",
    "MixedPrecisionPolicy",
    "ModelBundle",
    "ModelConfig",
    "PrefixCache",
    "PrefixSet",
    "QuantSpec",
    "RankOneResult",
    "StaticLR",
    "TapRequest",
    "ValueOverride",
    "ValueState",
    "ZOConfig",
    "build_prefix_cache",
    "calibrate",
    "compute_key",
    "edit",
    "edit_loss",
    "estimate_covariance",
    "forward",
    "fp_flop_fraction",
    "greedy_decode",
    "init_weights",
    "kl_divergence",
    "load_checkpoint",
    "log_prob",
    "optimize_value",
    "quantize_model",
    "rank_one_update",
    "replace_downproj",
    "sample_direction",
    "sample_prefixes",
    "save_checkpoint",
    "success_check",
    "zo_gradient",
]
