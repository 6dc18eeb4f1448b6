"""Hessian-aware structured pruning and neural implants for small numpy networks."""

from . import autodiff, checkpoint, datasets, hessian, implant, models, oracle, pruning, training
from .datasets import Dataset, load_dataset
from .errors import (
    CapacityError,
    CheckpointError,
    CheckpointVersionError,
    ConfigError,
    DatasetFormatError,
    HapError,
    InfeasiblePlanError,
    MissingTraceError,
    NonFiniteError,
    PlanError,
    ShapeError,
    SingularMatrixError,
    SpecError,
    TrainingDivergedError,
)
from .estimators import HessianAwarePruner, NetworkClassifier
from .hessian import TraceEstimate, all_group_traces, group_trace
from .implant import apply_implant, lowrank_baseline
from .models import ModelInstance, ModelSpec, build, cost, rebuild
from .pipeline import PipelineConfig, PipelineReport, run_pipeline
from .pruning import PrunePlan, rank, score_groups, select
from .training import TrainConfig, finetune, train

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "checkpoint",
    "datasets",
    "hessian",
    "implant",
    "models",
    "oracle",
    "pruning",
    "training",
    "Dataset",
    "load_dataset",
    "CapacityError",
    "CheckpointError",
    "CheckpointVersionError",
    "ConfigError",
    "DatasetFormatError",
    "HapError",
    "InfeasiblePlanError",
    "MissingTraceError",
    "NonFiniteError",
    "PlanError",
    "ShapeError",
    "SingularMatrixError",
    "SpecError",
    "TrainingDivergedError",
    "HessianAwarePruner",
    "NetworkClassifier",
    "TraceEstimate",
    "all_group_traces",
    "group_trace",
    "apply_implant",
    "lowrank_baseline",
    "ModelInstance",
    "ModelSpec",
    "build",
    "cost",
    "rebuild",
    "PipelineConfig",
    "PipelineReport",
    "run_pipeline",
    "PrunePlan",
    "rank",
    "score_groups",
    "select",
    "TrainConfig",
    "finetune",
    "train",
]
