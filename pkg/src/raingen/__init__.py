"""Variational rain generation: networks, training, sampling and evaluation."""

from .data import PairedDataset, ToyRainParams, load_paired_dataset, make_toy_rain_dataset, sample_patches
from .losses import (BackgroundPosterior, LatentPosterior, LossBreakdown, kl_background, kl_latent,
                     reparameterize, total_objective, wasserstein_losses)
from .networks import ArchConfig, BNet, Discriminator, Generator, RNet, VRGNet, gradient_penalty
from .training import TrainConfig, Trainer, apply_variant, lr_at, train

__version__ = "0.1.0"
