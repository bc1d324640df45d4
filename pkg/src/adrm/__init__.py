"""Continual learning with adversarially diversified rehearsal memory (ADRM)."""

from .attacks import AttackSpec, evaluate_under_attack, fgsm, pgd
from .corruptions import CORRUPTIONS, CorruptionSpec, corrupt
from .data import AugmentConfig, DatasetHandle, LabeledDataset, augment_batch, make_synthetic, make_task_stream
from .diversify import DiversificationSpec, DiversifiedBatch, diversify, mix_rehearsal
from .evaluation import AccuracyMatrix, aca, corruption_sweep, extract_features, linear_cka
from .memory import MemoryBuffer
from .models import forward, init_model, loss_and_grads
from .trainer import Seeds, TrainConfig, run_stream

__version__ = "0.1.0"
