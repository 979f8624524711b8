"""Label learning flows: conditional normalizing flows trained from weak supervision."""
from .data import TabularDataset, load_dataset, random_split
from .flows import FlowModel, affine_flow, coupling_flow, generate, invert, log_prob
from .objectives import PenaltyConfig
from .trainer import TrainConfig, evaluate, predict, train_llf, train_llf_wo_nll, train_two_stage
from .weaksig import ClassificationSignals, LabelScaler, RegressionRuleSignals

__version__ = "0.1.0"

__all__ = [
    "ClassificationSignals",
    "FlowModel",
    "LabelScaler",
    "PenaltyConfig",
    "RegressionRuleSignals",
    "TabularDataset",
    "TrainConfig",
    "affine_flow",
    "coupling_flow",
    "evaluate",
    "generate",
    "invert",
    "load_dataset",
    "log_prob",
    "predict",
    "random_split",
    "train_llf",
    "train_llf_wo_nll",
    "train_two_stage",
]
