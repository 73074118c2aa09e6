"""Desk-scale adversarial tight matching for unsupervised domain adaptation."""

from .diffcore import Tensor, backward, grad_check
from .divergence import (FiniteDist, SampleSet, energy_distance, jeffreys_kl,
                         lemma_audit, mdd_batch, mdd_full, mdd_population,
                         mmd_gaussian, total_variation)
from .models import AtmModel, MlpSpec, adversarial_loss, entropy_weight, multilinear_map
from .trainer import MetricsLog, TrainConfig, run

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check",
    "SampleSet", "FiniteDist", "mdd_population", "mdd_full", "mdd_batch",
    "energy_distance", "mmd_gaussian", "jeffreys_kl", "total_variation", "lemma_audit",
    "AtmModel", "MlpSpec", "adversarial_loss", "entropy_weight", "multilinear_map",
    "TrainConfig", "MetricsLog", "run",
]
