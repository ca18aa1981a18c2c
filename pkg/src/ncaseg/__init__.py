"""Cellular-automaton image segmentation with hand-rolled training.

A small, self-verifying stack: dense tensor ops, the automaton itself,
reverse-mode gradients through the unrolled rollout, an AdamW training loop,
a synthetic multi-domain dataset, and a leave-one-domain-out experiment
harness. Everything is numpy + the standard library.
"""

from .autodiff_bptt import Grads, Tape, backward, dice_softmax_grad, forward_with_tape, grad_check
from .datagen import DEFAULT_DOMAINS, DomainSpec, Sample, gen_dataset, gen_sample, load_dataset
from .experiment import ExperimentReport, LodoSplit, evaluate, make_lodo_splits, run_lodo
from .nca_core import (
    CellGrid,
    CheckpointError,
    DivergenceError,
    FireMask,
    NcaConfig,
    RuleParams,
    count_trainable_params,
    fixed_kernel_bank,
    init_params,
    load_checkpoint,
    nca_step,
    perceive,
    random_params,
    read_class_logits,
    rollout,
    save_checkpoint,
    seed_grid,
)
from .training import (
    OptState,
    TrainConfig,
    adamw_step,
    dice_loss,
    dice_score,
    fit,
    init_opt_state,
    select_best,
    train_epoch,
    validate,
)

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "CellGrid",
    "CheckpointError",
    "DivergenceError",
    "DEFAULT_DOMAINS",
    "DomainSpec",
    "ExperimentReport",
    "FireMask",
    "Grads",
    "LodoSplit",
    "NcaConfig",
    "OptState",
    "RuleParams",
    "Sample",
    "Tape",
    "TrainConfig",
    "adamw_step",
    "backward",
    "count_trainable_params",
    "dice_loss",
    "dice_score",
    "dice_softmax_grad",
    "evaluate",
    "fit",
    "fixed_kernel_bank",
    "forward_with_tape",
    "gen_dataset",
    "gen_sample",
    "grad_check",
    "init_opt_state",
    "init_params",
    "load_checkpoint",
    "load_dataset",
    "make_lodo_splits",
    "nca_step",
    "perceive",
    "random_params",
    "read_class_logits",
    "rollout",
    "run_lodo",
    "save_checkpoint",
    "seed_grid",
    "select_best",
    "train_epoch",
    "validate",
]
