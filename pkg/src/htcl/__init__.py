"""Head-tail cooperative predicate classification for scene graphs on synthetic long-tail data."""
from .dataset import (BalancedIndex, ClassStats, DatasetSchemaError, GenConfig, SceneGraph,
                      balanced_resample, class_stats, effective_number_weights, generate,
                      load_split, save_split)
from .estimator import HTCLRelationClassifier, check_scenes
from .metrics import (MetricsReport, PredictedTriplet, bias_report, evaluate_ranked, f_at_k,
                      m_at_k, mean_recall_at_k, rank_triplets, recall_at_k)
from .model import Dims, HTCLNet
from .numeric import grad_check
from .trainer import (ConfigError, TrainConfig, TrainingDiverged, evaluate, finetune_classifier,
                      fit_pipeline, load, run_ablation, save, train)

__version__ = "0.1.0"

__all__ = [
    "BalancedIndex", "ClassStats", "ConfigError", "DatasetSchemaError", "Dims", "GenConfig",
    "HTCLNet", "HTCLRelationClassifier", "MetricsReport", "PredictedTriplet", "SceneGraph",
    "TrainConfig", "TrainingDiverged", "balanced_resample", "bias_report", "check_scenes",
    "class_stats", "effective_number_weights", "evaluate", "evaluate_ranked", "f_at_k",
    "finetune_classifier", "fit_pipeline", "generate", "grad_check", "load", "load_split",
    "m_at_k", "mean_recall_at_k", "rank_triplets", "recall_at_k", "run_ablation", "save",
    "save_split", "train",
]
