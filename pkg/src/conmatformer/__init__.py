"""Hybrid attention image classifier with its own autodiff core.

Main entry points:
  tensor     - Tensor type, primitive differentiable ops, binary container
  gradcheck  - finite-difference gradient verification
  blocks     - CBAM, dual attention, ConvNeXt blocks, transformer, stem
  model      - full architecture, parameter/MAC census, checkpoints
  data       - ingestion, stratified splitting, augmentation, balancing
  train      - Adam and the training loop
  metrics    - confusion/ROC/AUC metrics, k-fold CV, paired t-tests
  xai        - class activation maps and local surrogate explanations
  cli        - the `conmatformer` command
"""

from .tensor import Tensor, backward, no_grad, load_tensor, save_tensor
from .gradcheck import grad_check
from .model import (ConMatFormer, ModelConfig, ablation_presets, build_model,
                    count_params_macs, load_checkpoint, model_presets,
                    save_checkpoint)
from .train import TrainConfig, train
from .metrics import evaluate, kfold_cv, paired_t_test, roc_auc

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "no_grad", "load_tensor", "save_tensor",
    "grad_check", "ConMatFormer", "ModelConfig", "ablation_presets",
    "build_model", "count_params_macs", "load_checkpoint", "model_presets",
    "save_checkpoint", "TrainConfig", "train", "evaluate", "kfold_cv",
    "paired_t_test", "roc_auc", "__version__",
]
