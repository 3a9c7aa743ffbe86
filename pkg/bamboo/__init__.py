from bamboo._config import ConfigModel
from bamboo._data import Dataset
from bamboo._data import SyntheticSpec
from bamboo._data import generate
from bamboo._data import oracle_label
from bamboo._diagnostics import DiagnosticReport
from bamboo._diagnostics import PositionsMode
from bamboo._diagnostics import VerificationReport
from bamboo._diagnostics import Verdict
from bamboo._diagnostics import centered_pair_cosine
from bamboo._diagnostics import compare_residual_delta
from bamboo._diagnostics import diagnose
from bamboo._diagnostics import mean_token_std
from bamboo._diagnostics import variance_trace
from bamboo._diagnostics import verify_lemma1
from bamboo._diagnostics import verify_lemma2
from bamboo._experiment import ExperimentKind
from bamboo._experiment import ExperimentSpec
from bamboo._experiment import VerifySpec
from bamboo._experiment import load_spec
from bamboo._experiment import load_verify_spec
from bamboo._experiment import run
from bamboo._model import ActivationTrace
from bamboo._model import Activation
from bamboo._model import HeadMode
from bamboo._model import ModelConfig
from bamboo._model import NormPlacement
from bamboo._model import Objective
from bamboo._model import Parameters
from bamboo._model import build
from bamboo._model import forward
from bamboo._planner import PlannedConfig
from bamboo._planner import ReferenceScale
from bamboo._planner import cost_ratio
from bamboo._planner import flops_per_token
from bamboo._planner import param_count
from bamboo._planner import plan_widths
from bamboo._tensor import grad_check
from bamboo._tensor import precision
from bamboo._train import MaskPlan
from bamboo._train import TrainConfig
from bamboo._train import TrainState
from bamboo._train import pretrain_then_finetune
from bamboo._train import sample_mask
from bamboo._train import train

__all__ = [
    "Activation",
    "ActivationTrace",
    "ConfigModel",
    "Dataset",
    "DiagnosticReport",
    "ExperimentKind",
    "ExperimentSpec",
    "HeadMode",
    "MaskPlan",
    "ModelConfig",
    "NormPlacement",
    "Objective",
    "Parameters",
    "PlannedConfig",
    "PositionsMode",
    "ReferenceScale",
    "SyntheticSpec",
    "TrainConfig",
    "TrainState",
    "Verdict",
    "VerificationReport",
    "VerifySpec",
    "build",
    "centered_pair_cosine",
    "compare_residual_delta",
    "cost_ratio",
    "diagnose",
    "flops_per_token",
    "forward",
    "generate",
    "grad_check",
    "load_spec",
    "load_verify_spec",
    "mean_token_std",
    "oracle_label",
    "param_count",
    "plan_widths",
    "precision",
    "pretrain_then_finetune",
    "run",
    "sample_mask",
    "train",
    "variance_trace",
    "verify_lemma1",
    "verify_lemma2",
]
