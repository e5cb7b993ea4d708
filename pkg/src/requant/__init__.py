"""Path-integral sensitivity analysis and dense-and-sparse weight quantization
for small trained models, with exact loss bookkeeping throughout."""

from .autodiff import (forward_loss, grad, loss_and_grad, per_sample_grads,
                       per_sample_losses, predict)
from .config import (ExperimentConfig, apply_overrides, config_hash,
                     derive_seed, dump_config, load_config, parse_config)
from .errors import (ConfigurationError, FormatError, NumericalError,
                     ToolkitError, TrainingError)
from .models import (CalibSet, ComputationSpec, LayerSegment, TrainInfo,
                     WeightVector, generate_calib, init_weights, interpolate,
                     make_layout, train)
from .pipeline import (DetachStep, OutlierPlan, PipelineResult, StepRecord,
                       allocate_budget, outlier_allocation,
                       outlier_ratio_search, run_pipeline, select_outliers,
                       significant_weight_search)
from .pqi import (PQIResult, aggregate, coverage_curve, path_gradient_mean,
                  path_positions, pqi_integral)
from .quantizers import (BitsBreakdown, KMeansResult, QuantConfig,
                         QuantizedLayer, QuantizedModel, SparseTriplets,
                         bits_breakdown, group_dequantize, group_quantize,
                         kmeans_fit, quantize_model, reconstruct,
                         sparse_matvec)
from .sensitivity import (SensitivityVector, TaylorRow, layer_study,
                          lambda_study, make_metric, taylor_first,
                          taylor_second)
from .storage import (load_artifact, load_calib, load_checkpoint,
                      save_artifact, save_calib, save_checkpoint)

__version__ = "0.1.0"

__all__ = [
    "BitsBreakdown", "CalibSet", "ComputationSpec", "ConfigurationError",
    "DetachStep", "ExperimentConfig", "FormatError", "KMeansResult",
    "LayerSegment", "NumericalError", "OutlierPlan", "PQIResult",
    "PipelineResult", "QuantConfig", "QuantizedLayer", "QuantizedModel",
    "SensitivityVector", "SparseTriplets", "StepRecord", "TaylorRow",
    "ToolkitError", "TrainInfo", "TrainingError", "WeightVector",
    "aggregate", "allocate_budget", "apply_overrides", "bits_breakdown",
    "config_hash", "coverage_curve", "derive_seed", "dump_config",
    "forward_loss", "generate_calib", "grad", "group_dequantize",
    "group_quantize", "init_weights", "interpolate", "kmeans_fit",
    "layer_study", "lambda_study", "load_artifact", "load_calib",
    "load_checkpoint", "load_config", "loss_and_grad", "make_layout",
    "make_metric", "outlier_allocation", "outlier_ratio_search",
    "parse_config", "path_gradient_mean", "path_positions",
    "per_sample_grads", "per_sample_losses", "pqi_integral", "predict",
    "quantize_model", "reconstruct", "run_pipeline", "save_artifact",
    "save_calib", "save_checkpoint", "select_outliers",
    "significant_weight_search", "sparse_matvec", "taylor_first",
    "taylor_second", "train",
]
