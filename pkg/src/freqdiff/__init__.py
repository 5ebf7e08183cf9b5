"""Frequency-band controlled diffusion at toy scale.

DCT band filtering and equifrequency shuffling of latents, a small
numpy denoiser with per-band control branches, DDIM sampling, a
procedural image dataset and a command-line front end.
"""
from .control_net import ModelParams, forward_base, forward_controlled, init_params, load_checkpoint, save_checkpoint
from .data import DatasetSpec, decode, encode, generate, generate_dataset, read_ppm, write_ppm
from .diffusion import SamplerConfig, ddim_sample, make_schedule, q_sample
from .estimators import FrequencyControlledDiffusion, FrequencyFilter, LatentCodec
from .filters import band_consistency, band_energy_profile, equifrequency_shuffle, ffm, make_mask
from .spectral import dct2, idct2
from .training import TrainConfig, evaluate, pretrain, train_branch, translate

__version__ = "0.1.0"
