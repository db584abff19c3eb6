"""Personalized gating for multi-domain, multi-task interaction prediction.

Modules: ``numerics`` (autodiff), ``gates`` (Gate NU, EPNet, PPNet), ``model``,
``store`` (embedding table with eviction and delta sync), ``datagen``,
``trainer``, ``evaluation`` and ``cli``.
"""
__version__ = "0.1.0"

from .datagen import GenConfig, Log, generate, read_log, split_by_time, write_log
from .evaluation import Report, auc, evaluate, gauc
from .model import VARIANTS, ModelConfig, PepNetModel, load_checkpoint, save_checkpoint
from .store import EmbeddingStore, FeatureKey, StoreConfig, SyncPolicy
from .trainer import TrainConfig, Trainer, run_ablation_grid, run_online_passes, train

__all__ = [
    "GenConfig", "Log", "generate", "read_log", "split_by_time", "write_log",
    "Report", "auc", "evaluate", "gauc",
    "VARIANTS", "ModelConfig", "PepNetModel", "load_checkpoint", "save_checkpoint",
    "EmbeddingStore", "FeatureKey", "StoreConfig", "SyncPolicy",
    "TrainConfig", "Trainer", "run_ablation_grid", "run_online_passes", "train",
]
