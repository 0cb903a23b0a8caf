"""Cross-domain mixture-of-experts Transformer for domain generalization.

The package is layered bottom-up: :mod:`d2sdk.autodiff` (reverse-mode tensors),
:mod:`d2sdk.attention` (post-LN encoder/decoder), :mod:`d2sdk.experts` and
:mod:`d2sdk.model` (the network, its sub-models and baselines),
:mod:`d2sdk.data` (synthetic shifted domains), :mod:`d2sdk.trainer` (SGD loop)
and :mod:`d2sdk.harness` / :mod:`d2sdk.cli` (experiments and reports).
"""
from .autodiff import Tensor, backward, gradient_check
from .data import DomainSpec, make_lodo_split, make_s4, mix_domains
from .errors import ConfigError, ContractError, D2SDKError, DimensionError, LabelError, NumericError
from .harness import ExperimentPlan, ExperimentReport, emit_report
from .model import Checkpoint, D2SDKModel, ModelConfig, compute_loss, predict
from .trainer import OptimConfig, lr_at, sgd_step, train_run

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "ConfigError", "ContractError", "D2SDKError", "D2SDKModel", "DimensionError",
    "DomainSpec", "ExperimentPlan", "ExperimentReport", "LabelError", "ModelConfig", "NumericError",
    "OptimConfig", "Tensor", "backward", "compute_loss", "emit_report", "gradient_check", "lr_at",
    "make_lodo_split", "make_s4", "mix_domains", "predict", "sgd_step", "train_run",
]
