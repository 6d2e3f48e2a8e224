"""Unsupervised deformable registration with training schedules that reduce folding."""

from .losses import LossConfig, baseline_loss, cc_loss, cycle_loss, smoothness_loss
from .metrics import dice, evaluate, folding_fraction, jacobian_det_map, render_det, render_grid
from .nets import ArchConfig, ModelParams, init_params, load_checkpoint, save_checkpoint
from .stn import identity_grid, warp, warp_labels
from .trainer import TrainConfig, predict, train, train_baseline, train_cycle, train_refine

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "LossConfig", "ModelParams", "TrainConfig",
    "baseline_loss", "cc_loss", "cycle_loss", "dice", "evaluate",
    "folding_fraction", "identity_grid", "init_params", "jacobian_det_map",
    "load_checkpoint", "predict", "render_det", "render_grid",
    "save_checkpoint", "smoothness_loss", "train", "train_baseline",
    "train_cycle", "train_refine", "warp", "warp_labels",
]
