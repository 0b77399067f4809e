"""Contrastive-analysis VAE separating common from target-specific (salient) factors."""

from .distributions import (
    DiagGaussian,
    kl_monte_carlo_oracle,
    kl_to_isotropic,
    kl_to_standard_normal,
    sample_reparameterized,
)
from .errors import ConfigError, ContractViolation, DataLoadError, DegenerateProbeError, NonFiniteLossError
from .losses import LossBreakdown, LossWeights, total_loss
from .model import LatentCode, ModelConfig, SepVAE, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingHistory, fit, train_step

__version__ = "0.1.0"
