"""Dice loss and score, the AdamW optimizer, and the epoch loop.

Training follows the iteration-count randomization scheme: every batch rolls
the automaton a uniformly random number of steps in ``[t_min, t_max]``, while
validation always uses exactly ``t_eval`` steps. Model selection minimizes
the soft validation Dice loss.

Batches run through the automaton as a single ``[D, B, I, J]`` stacked state
so the per-cell layers become large matrix products; memory-wise the BPTT
tape forces splitting a batch into gradient chunks (``grad_chunk`` samples
each), summed in a fixed order so runs are reproducible.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import seeds
from .autodiff_bptt import (
    Grads,
    _backward_state,
    _forward_tape_state,
    dice_softmax_grad,
    zeros_like_grads,
)
from .nca_core import (
    DivergenceError,
    NcaConfig,
    RuleParams,
    _rollout_state,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import one_hot, softmax_over_channels

__all__ = [
    "TrainConfig",
    "OptState",
    "TrainLog",
    "FitResult",
    "dice_loss",
    "dice_score",
    "init_opt_state",
    "adamw_step",
    "clip_global_norm",
    "train_epoch",
    "validate",
    "select_best",
    "fit",
    "DICE_EPS",
]

DICE_EPS = 1e-6


# --- losses and metrics -----------------------------------------------------


def dice_loss(probs: np.ndarray, target_onehot: np.ndarray, eps: float = DICE_EPS) -> float:
    """Soft Dice loss over ``[C, I, J]`` probabilities vs a one-hot target.

    Sum over classes of 1 - (2*intersection + eps) / (sums + eps); 0 for a
    perfect prediction, approaches C for total disjointness. ``probs`` must
    be per-pixel normalized (this is the post-softmax convention; feeding
    raw logits is a bug this check catches).
    """
    if probs.shape != target_onehot.shape:
        raise ValueError(f"probs {probs.shape} vs target {target_onehot.shape}")
    if probs.ndim != 3:
        raise ValueError(f"expected [C, I, J], got {probs.shape}")
    sums = probs.sum(axis=0)
    if np.abs(sums - 1.0).max() > 1e-4:
        raise ValueError("probs are not per-pixel normalized (channel sums deviate from 1)")
    total = 0.0
    for c in range(probs.shape[0]):
        inter_c = float((probs[c] * target_onehot[c]).sum())
        den_c = float(probs[c].sum()) + float(target_onehot[c].sum())
        total += 1.0 - (2.0 * inter_c + eps) / (den_c + eps)
    return total


def dice_score(
    pred_labels: np.ndarray, true_labels: np.ndarray, n_cls: int
) -> tuple[np.ndarray, float]:
    """Hard per-class Dice of two label maps, plus the foreground mean.

    A class absent from both maps scores 1.0 (correctly predicting absence
    is not an error); the mean skips the background class 0.
    """
    if pred_labels.shape != true_labels.shape:
        raise ValueError("label map shapes differ")
    for name, arr in (("pred", pred_labels), ("true", true_labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= n_cls):
            raise ValueError(f"{name} labels outside [0, {n_cls})")
    scores = np.empty(n_cls, dtype=np.float64)
    for c in range(n_cls):
        in_pred = pred_labels == c
        in_true = true_labels == c
        denom = int(in_pred.sum()) + int(in_true.sum())
        if denom == 0:
            scores[c] = 1.0
        else:
            scores[c] = 2.0 * int((in_pred & in_true).sum()) / denom
    if n_cls < 2:
        raise ValueError("need at least one foreground class")
    return scores, float(scores[1:].mean())


# --- optimizer ----------------------------------------------------------------


@dataclass
class OptState:
    """Decoupled-weight-decay Adam moments plus the shared hyper-parameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def init_opt_state(params: RuleParams, cfg: "TrainConfig") -> OptState:
    zeros = lambda: {k: np.zeros_like(p) for k, p in params.trainables().items()}
    return OptState(
        m=zeros(),
        v=zeros(),
        t=0,
        lr=cfg.lr,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


def adamw_step(params: RuleParams, grads: Grads, opt: OptState) -> tuple[RuleParams, OptState]:
    """One AdamW update, in place on the trainable tensors.

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    with the weight-decay term outside the moment machinery (decoupled).
    The fixed kernels are not trainable and are never touched.
    """
    opt.t += 1
    t = opt.t
    bc1 = 1.0 - opt.beta1**t
    bc2 = 1.0 - opt.beta2**t
    g_by_name = grads.tensors()
    for name, theta in params.trainables().items():
        g = g_by_name[name]
        if g.shape != theta.shape:
            raise ValueError(f"grad {name} shape {g.shape} != param {theta.shape}")
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        update += opt.weight_decay * theta
        update *= opt.lr
        theta -= update
        if not np.isfinite(theta).all():
            raise DivergenceError(f"non-finite parameter {name} after optimizer step {t}")
    return params, opt


def clip_global_norm(grads: Grads, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``;
    returns the pre-clip norm."""
    sq = 0.0
    for g in grads.tensors().values():
        sq += float((g.astype(np.float64) ** 2).sum())
    norm = math.sqrt(sq)
    if norm > max_norm:
        grads.scale_(max_norm / norm)
    return norm


def opt_to_sections(opt: OptState) -> dict[str, np.ndarray]:
    out = {"opt_t": np.array([opt.t], dtype=np.float32)}
    for kind, table in (("m", opt.m), ("v", opt.v)):
        for name, arr in table.items():
            out[f"opt_{kind}_{name}"] = arr
    return out


def opt_from_sections(sections: dict[str, np.ndarray], cfg: "TrainConfig", params: RuleParams) -> OptState:
    opt = init_opt_state(params, cfg)
    opt.t = int(round(float(sections["opt_t"][0])))
    for kind, table in (("m", opt.m), ("v", opt.v)):
        for name in table:
            table[name] = sections[f"opt_{kind}_{name}"].copy()
    return opt


# --- configuration ------------------------------------------------------------


@dataclass
class TrainConfig:
    """Epoch-loop hyper-parameters. Defaults are the reference settings; the
    bundled profiles shrink them to desk scale."""

    epochs: int = 100
    batch_size: int = 32
    t_min: int = 64
    t_max: int = 256
    t_eval: int = 128
    lr: float = 5e-4
    fire_rate: float = 0.5
    seed: int = 0
    selection_metric: str = "val_dice_loss"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    grad_clip: float = 0.0
    grad_chunk: int = 8

    def __post_init__(self):
        if not (1 <= self.t_min <= self.t_max):
            raise ValueError("need 1 <= t_min <= t_max")
        if self.batch_size < 1 or self.grad_chunk < 1:
            raise ValueError("batch_size and grad_chunk must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.t_eval < 0:
            raise ValueError("t_eval must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ValueError("fire_rate must be in (0, 1]")
        if self.selection_metric != "val_dice_loss":
            raise ValueError(f"unsupported selection_metric {self.selection_metric!r}")


# --- batch plumbing -----------------------------------------------------------


def _stack_batch(samples, n_cls: int):
    """[d_img, B, I, J] images and [C, B, I, J] one-hot targets."""
    images = np.stack([s.image for s in samples], axis=1)
    masks = np.stack([np.asarray(s.mask) for s in samples], axis=0)
    return images, one_hot(masks, n_cls), masks


def _seed_states(images: np.ndarray, state_dim: int) -> np.ndarray:
    state = np.zeros((state_dim,) + images.shape[1:], dtype=images.dtype)
    state[: images.shape[0]] = images
    return state


def train_epoch(
    params: RuleParams,
    opt: OptState,
    samples: list,
    nca_cfg: NcaConfig,
    cfg: TrainConfig,
    epoch: int,
) -> float:
    """One pass over ``samples`` in a shuffled order; returns the mean batch
    loss. All randomness is keyed on (cfg.seed, stream, epoch) so a resumed
    run replays exactly the batches the unbroken run would have seen.
    """
    if not samples:
        raise ValueError("no training samples")
    order_rng = seeds.stream(cfg.seed, seeds.ORDER, epoch)
    time_rng = seeds.stream(cfg.seed, seeds.TIME, epoch)
    fire_rng = seeds.stream(cfg.seed, seeds.FIRE, epoch)
    perm = order_rng.permutation(len(samples))
    d_img, n_cls = nca_cfg.d_img, nca_cfg.n_cls

    batch_losses = []
    for b0 in range(0, len(perm), cfg.batch_size):
        batch_idx = perm[b0 : b0 + cfg.batch_size]
        batch = [samples[i] for i in batch_idx]
        n_steps = int(time_rng.integers(cfg.t_min, cfg.t_max + 1))
        total = zeros_like_grads(params)
        loss_sum = 0.0
        try:
            for c0 in range(0, len(batch), cfg.grad_chunk):
                chunk = batch[c0 : c0 + cfg.grad_chunk]
                images, targets, _ = _stack_batch(chunk, n_cls)
                state = _seed_states(images, nca_cfg.state_dim)
                final, tape = _forward_tape_state(
                    state, params, n_steps, fire_rng, cfg.fire_rate, d_img
                )
                losses, d_logits = dice_softmax_grad(
                    final[d_img : d_img + n_cls], targets
                )
                grad_final = np.zeros_like(final)
                grad_final[d_img : d_img + n_cls] = d_logits
                total.add_(_backward_state(tape, params, grad_final))
                loss_sum += float(losses.sum())
        except DivergenceError as exc:
            raise DivergenceError(f"batch {b0 // cfg.batch_size}: {exc}") from exc
        total.scale_(1.0 / len(batch))
        if cfg.grad_clip > 0:
            clip_global_norm(total, cfg.grad_clip)
        adamw_step(params, total, opt)
        batch_losses.append(loss_sum / len(batch))
    return float(np.mean(batch_losses))


def validate(
    params: RuleParams,
    samples: list,
    nca_cfg: NcaConfig,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Mean soft Dice loss and mean hard foreground Dice at ``t_eval`` steps.

    Rollouts run in chunks for speed; the loss of each sample goes through
    the plain dice_loss path, which independently cross-checks the fused
    loss-and-gradient routine used in training.
    """
    if not samples:
        raise ValueError("no validation samples")
    d_img, n_cls = nca_cfg.d_img, nca_cfg.n_cls
    losses, scores = [], []
    for c0 in range(0, len(samples), cfg.grad_chunk):
        chunk = samples[c0 : c0 + cfg.grad_chunk]
        images, targets, masks = _stack_batch(chunk, n_cls)
        state = _seed_states(images, nca_cfg.state_dim)
        final = _rollout_state(state, params, cfg.t_eval, rng, cfg.fire_rate, d_img)
        probs = softmax_over_channels(final[d_img : d_img + n_cls])
        pred = np.argmax(final[d_img : d_img + n_cls], axis=0)
        for i in range(len(chunk)):
            losses.append(dice_loss(probs[:, i], targets[:, i]))
            _, fg = dice_score(pred[i], masks[i], n_cls)
            scores.append(fg)
    return float(np.mean(losses)), float(np.mean(scores))


def select_best(history: list[tuple[int, float]]) -> int:
    """Epoch with the lowest validation Dice loss; earliest epoch on ties."""
    if not history:
        raise ValueError("empty history")
    best_epoch, best = history[0]
    for epoch, value in history[1:]:
        if value < best:
            best_epoch, best = epoch, value
    return best_epoch


# --- epoch loop ---------------------------------------------------------------


class TrainLog:
    """Append-only CSV metric log, one row per (epoch, split, metric)."""

    FIELDS = ("epoch", "split", "metric", "value", "seed", "run_id")

    def __init__(self, path):
        self.path = str(path)
        if not os.path.exists(self.path) or os.path.getsize(self.path) == 0:
            os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.FIELDS)

    def append(self, epoch: int, split: str, metric: str, value: float, seed: int, run_id: str):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([epoch, split, metric, f"{value:.9g}", seed, run_id])

    @staticmethod
    def read_history(path, split: str = "val", metric: str = "dice_loss") -> list[tuple[int, float]]:
        history = []
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["split"] == split and row["metric"] == metric:
                    history.append((int(row["epoch"]), float(row["value"])))
        return history


@dataclass
class FitResult:
    best_epoch: int
    best_val_loss: float
    best_path: str
    history: list[tuple[int, float]] = field(default_factory=list)


def _ckpt_path(out_dir: str, epoch: int) -> str:
    return os.path.join(out_dir, "checkpoints", f"epoch_{epoch:04d}.ncat")


def fit(
    params: RuleParams,
    opt: OptState,
    train_samples: list,
    val_samples: list,
    nca_cfg: NcaConfig,
    cfg: TrainConfig,
    out_dir: str,
    run_id: str,
    verbose: bool = True,
    resume: bool = False,
) -> FitResult:
    """Run the epoch loop: train, validate, log, checkpoint, select best.

    Writes ``train_log.csv`` plus one checkpoint per epoch (with optimizer
    state for resumption) and ``checkpoints/best.ncat`` (weights only).
    With ``resume=True`` the caller has already loaded params/opt from the
    latest checkpoint; the start epoch is derived from the step counter.
    """
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "checkpoints"), exist_ok=True)
    log = TrainLog(os.path.join(out_dir, "train_log.csv"))
    batches_per_epoch = math.ceil(len(train_samples) / cfg.batch_size)
    start_epoch = 0
    history: list[tuple[int, float]] = []
    if resume:
        if opt.t % batches_per_epoch != 0:
            raise ValueError(
                f"optimizer step counter {opt.t} is mid-epoch for "
                f"{batches_per_epoch} batches/epoch; cannot resume cleanly"
            )
        start_epoch = opt.t // batches_per_epoch
        history = [
            (e, v) for e, v in TrainLog.read_history(log.path) if e < start_epoch
        ]

    for epoch in range(start_epoch, cfg.epochs):
        try:
            train_loss = train_epoch(params, opt, train_samples, nca_cfg, cfg, epoch)
        except DivergenceError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}") from exc
        val_rng = seeds.stream(cfg.seed, seeds.VAL, epoch)
        val_loss, val_score = validate(params, val_samples, nca_cfg, cfg, val_rng)
        log.append(epoch, "train", "dice_loss", train_loss, cfg.seed, run_id)
        log.append(epoch, "val", "dice_loss", val_loss, cfg.seed, run_id)
        log.append(epoch, "val", "dice_score", val_score, cfg.seed, run_id)
        save_checkpoint(
            _ckpt_path(out_dir, epoch), params, nca_cfg, opt_sections=opt_to_sections(opt)
        )
        history.append((epoch, val_loss))
        if verbose:
            print(
                f"epoch {epoch:4d}  train_loss {train_loss:.4f}  "
                f"val_loss {val_loss:.4f}  val_dice {val_score:.4f}",
                flush=True,
            )

    best_epoch = select_best(history)
    best_val = dict(history)[best_epoch]
    best_params, best_cfg, _ = load_checkpoint(_ckpt_path(out_dir, best_epoch))
    best_path = os.path.join(out_dir, "checkpoints", "best.ncat")
    save_checkpoint(best_path, best_params, best_cfg)
    return FitResult(
        best_epoch=best_epoch, best_val_loss=best_val, best_path=best_path, history=history
    )
