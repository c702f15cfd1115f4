"""Spectral-spatial selective-scan (Mamba-style) classifier for hyperspectral images."""
from .autodiff import Graph, Tape, Tensor, grad_check
from .blocks import ArchConfig, Model, mamba_block_forward, model_forward, sstg_forward
from .data import HsiCube, extract_patches, load_cube, pca_reduce, save_cube, stratified_split, synth_dataset
from .metrics import ConfusionMatrix, metrics_from_confusion
from .routes import Route, build_route_sequences, scan_and_merge
from .ssm import S6Params, discretize_zoh, s6_selective_scan, ssm_conv_apply, ssm_conv_kernel, ssm_recurrence
from .train import ModelCheckpoint, TrainConfig, evaluate, train

__version__ = "0.1.0"
