"""Hybrid beta-VAE/GAN with differentiable augmentation for two-phase microstructures."""

from .autodiff import Tape, Tensor, backward, grad
from .models import ArchSpec, HybridModel, ellipse_arch, load_checkpoint, save_checkpoint, small_data_arch
from .trainer import TrainConfig, preset, train, train_step

__version__ = "0.1.0"
