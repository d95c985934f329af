"""Chemotherapy response prediction from 3D lesion masks.

A desk-scale, fully testable pipeline: a float64 autodiff engine, a
frozen transformer slice encoder with low-rank adapters, attention pooling
over the slice axis, a dual-head objective (cross-entropy plus a ramped
margin contrastive term on paired volumes), a deterministic trainer, and a
complete evaluation suite (ROC/DeLong/bootstrap/calibration).
"""

from .aggregator import AttentionRecord
from .autodiff import Tensor, backward, finite_diff_check, no_grad
from .data import DatasetManifest, MaskVolume, SynthConfig
from .encoder import EncoderConfig
from .heads import LossConfig
from .metrics import ScoredCohort
from .model import ModelConfig, ResponseModel, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord",
    "Tensor",
    "backward",
    "finite_diff_check",
    "no_grad",
    "DatasetManifest",
    "MaskVolume",
    "SynthConfig",
    "EncoderConfig",
    "LossConfig",
    "ScoredCohort",
    "ModelConfig",
    "ResponseModel",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "fit",
    "__version__",
]
