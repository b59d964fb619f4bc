"""Desk-scale ambient lighting normalization.

Restores uniformly lit images from synthetic colored-illumination scenes
with a guided encoder-decoder network, built on a small reverse-mode
autodiff tensor core.
"""

from .tensor import Tensor, backward, clear_tape, finite_difference_gradient, no_grad
from .wavelet import Subbands, dwt2_haar, idwt2_haar
from .prior import RgbPatchEncoder, SemanticFeatureSet, SyntheticEncoder, load_features, save_features
from .model import ModelConfig, ModelParams, forward, init_params, load_checkpoint, refiner_apply, save_checkpoint
from .scenes import SceneConfig, SceneTriplet, build_dataset, generate_scene, load_dataset
from .metrics import ConsistencyReport, patch_consistency, psnr, ssim
from .training import TrainConfig, adam_step, cosine_lr, evaluate, loss, train_loop

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "clear_tape",
    "finite_difference_gradient",
    "no_grad",
    "Subbands",
    "dwt2_haar",
    "idwt2_haar",
    "SemanticFeatureSet",
    "SyntheticEncoder",
    "RgbPatchEncoder",
    "load_features",
    "save_features",
    "ModelConfig",
    "ModelParams",
    "forward",
    "init_params",
    "refiner_apply",
    "save_checkpoint",
    "load_checkpoint",
    "SceneConfig",
    "SceneTriplet",
    "generate_scene",
    "build_dataset",
    "load_dataset",
    "ConsistencyReport",
    "patch_consistency",
    "psnr",
    "ssim",
    "TrainConfig",
    "loss",
    "adam_step",
    "cosine_lr",
    "train_loop",
    "evaluate",
]
