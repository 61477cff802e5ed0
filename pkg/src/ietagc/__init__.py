"""Iterative ensemble training with anti-gradient control for small diffusion models."""

from .agc import MemoryBank, SkipRecord, apply_mask, ratio, update_bank
from .audit import frechet_distance, loss_profile, mq_counts, nn_ratio, spectral_energy
from .config import ExperimentSpec
from .data import Dataset, default_mixture, default_patterns, gen_mixture, gen_patterns, load_dataset, save_dataset
from .diffusion import (Architecture, DenoiserParams, Schedule, build_schedule, denoiser_forward, forward_noise,
                        init_params, load_checkpoint, loss_gradient, per_sample_loss, sample_generate,
                        save_checkpoint)
from .iet import RoundConfig, ShardPlan, aggregate, aggregate_banks, run_iet, split_dataset
from .trainer import TrainConfig, add_input_noise, dp_noise, sgd_step, train_epochs

__version__ = "0.1.0"
