"""Multi-modal novel-class discovery at desk scale.

Synthetic multi-modal datasets, a member/leader attention-fusion network
trained with reward, cross-entropy, and contrastive objectives, strict-to-
loose density pseudo-labeling of the unlabeled pool, and an open-set
retrieval evaluation suite.
"""

__version__ = "0.1.0"

from .clustering import ClusterParams, RelaxationSchedule, calibrate, dbscan, relax
from .data import Dataset, GeneratorConfig, generate_dataset, load_dataset, save_dataset
from .evaluation import anmrr, build_run, map_metric, ncd_accuracy, ndcg_at, nn_metric, pr_curve
from .model import FusionNetwork
from .training import TrainConfig, Trainer, load_checkpoint, resume_trainer, save_checkpoint

__all__ = [
    "ClusterParams", "RelaxationSchedule", "calibrate", "dbscan", "relax",
    "Dataset", "GeneratorConfig", "generate_dataset", "load_dataset", "save_dataset",
    "anmrr", "build_run", "map_metric", "ncd_accuracy", "ndcg_at", "nn_metric", "pr_curve",
    "FusionNetwork", "TrainConfig", "Trainer", "load_checkpoint", "resume_trainer",
    "save_checkpoint",
]
