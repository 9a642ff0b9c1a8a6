"""Weak-shot semantic segmentation via dual similarity transfer,
exercised on a synthetic shapes corpus."""

__version__ = "0.1.0"

from .synthdata import (ClassSplit, DatasetManifest, FullSample,
                        GenerationConfig, WeakShotSample, generate_dataset,
                        make_weakshot, sample_reference, split_classes)
from .model import ModelConfig, ModelOutputs, SegModel, SimNet
from .losses import LossConfig, LossReport
from .matching import Assignment, TargetEntry, hungarian_assign, match_targets
from .inference import SegmentationResult, make_pseudo_labels, semantic_segment
from .evaluation import (IoUReport, PairF1Report, compute_miou,
                         eval_simnet_f1, significance_test)
from .training import TrainConfig, Trainer, run_retraining, run_training

__all__ = [
    "ClassSplit", "DatasetManifest", "FullSample", "GenerationConfig",
    "WeakShotSample", "generate_dataset", "make_weakshot", "sample_reference",
    "split_classes", "ModelConfig", "ModelOutputs", "SegModel", "SimNet",
    "LossConfig", "LossReport", "Assignment", "TargetEntry",
    "hungarian_assign", "match_targets", "SegmentationResult",
    "make_pseudo_labels", "semantic_segment", "IoUReport", "PairF1Report",
    "compute_miou", "eval_simnet_f1", "significance_test", "TrainConfig",
    "Trainer", "run_retraining", "run_training",
]
