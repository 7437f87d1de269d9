"""Diffeomorphic deformable image registration with learned gated fusion.

Submodules:
  tensor     reverse-mode autodiff core (Tensor, Tape, ops, backward)
  transform  velocity sampling, scaling-and-squaring, warping, Jacobians
  model      the three-branch gated-fusion network and ablation variants
  losses     NCC / KL / folding / FocalDice objectives
  metrics    DSC, NJD, before/after evaluation reports
  data       FVOL + NIfTI-1 I/O, synthetic pairs, manifests, sampling
  train      Adam, staged schedules, validation-based checkpointing
  cli        command-line entry points
"""

from .losses import LossConfig
from .model import GatedFusionNet, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .tensor import GradError, ShapeError, Tape, Tensor, backward
from .train import TrainConfig, train
from .transform import FlowField, GaussianFlowParams, integrate_ss, njd, sample_velocity, upsample_flow, warp

__version__ = "0.1.0"

__all__ = [
    "FlowField",
    "GatedFusionNet",
    "GaussianFlowParams",
    "GradError",
    "LossConfig",
    "ModelConfig",
    "ShapeError",
    "Tape",
    "Tensor",
    "TrainConfig",
    "backward",
    "build_model",
    "integrate_ss",
    "load_checkpoint",
    "njd",
    "sample_velocity",
    "save_checkpoint",
    "train",
    "upsample_flow",
    "warp",
    "__version__",
]
