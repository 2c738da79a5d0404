"""Multi-task prognosis models for volumetric scans, built on a small numpy autodiff."""
from .model import ModelConfig, MultiTaskModel, combined_loss, predict
from .synth import PhantomSpec, SyntheticCohort, generate_cohort, load_cohort
from .training import TrainConfig, stratified_kfold, train_one_fold

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "MultiTaskModel",
    "PhantomSpec",
    "SyntheticCohort",
    "TrainConfig",
    "combined_loss",
    "generate_cohort",
    "load_cohort",
    "predict",
    "stratified_kfold",
    "train_one_fold",
]
