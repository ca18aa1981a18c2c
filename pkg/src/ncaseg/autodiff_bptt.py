"""Hand-derived reverse-mode gradients through the unrolled automaton.

The differentiated computation is the whole training objective: soft Dice
loss of the softmaxed class logits read from the final state of a T-step
rollout. No autodiff framework is involved; the chain rule is written out
against the step function

    S_{t+1} = pin(S_t + M_t * w2 @ relu(w1 @ P(S_t) + b1))

where P is the fixed-kernel perception stage and pin overwrites the image
channels with their step-t values. Per step, walking backwards with G the
gradient w.r.t. S_{t+1}:

    dDelta = M * G, image rows zeroed   (the pin discards those rows)
    g_w2  += dDelta @ hidden^T
    dH     = w2^T @ dDelta, gated by the ReLU sign
    g_w1  += dH @ P(S_t)^T;  g_b1 += row-sums of dH
    G_prev = G + P-adjoint(w1^T @ dH)   (identity path plus perception path)

The tape stores one (pre-step state, fire mask) record per step; hidden
activations and perception outputs are recomputed during the backward sweep.
That costs one extra forward inside backward but keeps the tape near the
size of the states themselves, which is what actually fits in memory for
long rollouts (storing activations would be ~8x larger).

float64 inputs run the identical code path; the finite-difference checker
uses that for headroom.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import seeds
from .nca_core import (
    CellGrid,
    DivergenceError,
    RuleParams,
    _delta_from_hidden,
    _hidden_act,
    _step_state,
)
from .tensor import NonFiniteError, depthwise_adjoint, depthwise_stack, one_hot, softmax_over_channels

__all__ = [
    "Grads",
    "Tape",
    "StepRecord",
    "forward_with_tape",
    "replay",
    "backward",
    "dice_softmax_grad",
    "grad_check",
    "TAPE_BUDGET_BYTES",
]

# refuse tapes that cannot fit the sandbox's memory; callers chunk instead
TAPE_BUDGET_BYTES = 3 << 30

_TRAINABLE = ("w1", "b1", "w2")


@dataclass
class Grads:
    """Loss gradients for the trainable tensors, shaped like RuleParams."""

    g_w1: np.ndarray
    g_b1: np.ndarray
    g_w2: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w1": self.g_w1, "b1": self.g_b1, "w2": self.g_w2}

    def add_(self, other: "Grads") -> "Grads":
        self.g_w1 += other.g_w1
        self.g_b1 += other.g_b1
        self.g_w2 += other.g_w2
        return self

    def scale_(self, factor: float) -> "Grads":
        self.g_w1 *= factor
        self.g_b1 *= factor
        self.g_w2 *= factor
        return self


def zeros_like_grads(params: RuleParams) -> Grads:
    return Grads(
        g_w1=np.zeros_like(params.w1),
        g_b1=np.zeros_like(params.b1),
        g_w2=np.zeros_like(params.w2),
    )


@dataclass
class StepRecord:
    state: np.ndarray  # state before the step, [D, ..., I, J]
    mask: np.ndarray  # fire mask for the step, [..., I, J]


@dataclass
class Tape:
    """Everything backward needs to replay a rollout exactly: one record per
    step plus the channel split the pinning used."""

    steps: list[StepRecord]
    d_img: int

    def __len__(self) -> int:
        return len(self.steps)


def _forward_tape_state(
    state: np.ndarray,
    params: RuleParams,
    n_steps: int,
    rng: np.random.Generator,
    fire_rate: float,
    d_img: int,
) -> tuple[np.ndarray, Tape]:
    need = n_steps * (state.nbytes + state[0].nbytes)
    if need > TAPE_BUDGET_BYTES:
        raise MemoryError(
            f"tape for {n_steps} steps over state {state.shape} needs ~{need >> 20} MiB; "
            f"budget is {TAPE_BUDGET_BYTES >> 20} MiB (reduce steps or chunk the batch)"
        )
    records = []
    for _ in range(n_steps):
        mask = (rng.random(state.shape[1:]) < fire_rate).astype(np.float32)
        records.append(StepRecord(state=state, mask=mask))
        state = _step_state(state, params, mask, d_img)
    return state, Tape(steps=records, d_img=d_img)


def forward_with_tape(
    grid: CellGrid,
    params: RuleParams,
    n_steps: int,
    rng: np.random.Generator,
    fire_rate: float = 0.5,
) -> tuple[CellGrid, Tape]:
    """Rollout that also returns the tape backward() needs.

    Bit-identical to :func:`ncaseg.nca_core.rollout` for the same seed; the
    mask draws are the same expressions in the same order.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1 to produce a tape")
    final, tape = _forward_tape_state(
        grid.state, params, n_steps, rng, fire_rate, grid.d_img
    )
    return CellGrid(state=final, d_img=grid.d_img, n_cls=grid.n_cls), tape


def replay(tape: Tape, params: RuleParams) -> np.ndarray:
    """Re-run the taped steps from the first recorded state; returns the
    final state. A consistency probe: must equal the forward output."""
    if not tape.steps:
        raise ValueError("empty tape")
    state = tape.steps[0].state
    for rec in tape.steps:
        state = _step_state(state, params, rec.mask, tape.d_img)
    return state


def _backward_state(
    tape: Tape, params: RuleParams, grad_final: np.ndarray
) -> Grads:
    w1, b1, w2 = params.w1, params.b1, params.w2
    d_img = tape.d_img
    g = grad_final.copy()
    g_w1 = np.zeros_like(w1)
    g_b1 = np.zeros_like(b1)
    g_w2 = np.zeros_like(w2)
    # scratch reused across steps; every step fully overwrites each buffer
    shape = tape.steps[0].state.shape
    dt = tape.steps[0].state.dtype
    n_flat = int(np.prod(shape[1:]))
    perc = np.empty((4 * shape[0],) + shape[1:], dtype=dt)
    hidden = np.empty((w1.shape[0], n_flat), dtype=dt)
    dh = np.empty_like(hidden)
    d_delta = np.empty(shape, dtype=dt)
    dperc = np.empty((4 * shape[0], n_flat), dtype=dt)
    adj = np.empty(shape, dtype=dt)
    for rec in reversed(tape.steps):
        depthwise_stack(rec.state, params.fixed_kernels, out=perc)
        pf = perc.reshape(perc.shape[0], -1)
        np.dot(w1, pf, out=hidden)
        hidden += b1[:, None]
        np.maximum(hidden, 0.0, out=hidden)

        np.multiply(g, rec.mask[None], out=d_delta)
        d_delta[:d_img] = 0.0
        ddf = d_delta.reshape(d_delta.shape[0], -1)

        g_w2 += ddf @ hidden.T
        np.dot(w2.T, ddf, out=dh)
        dh *= hidden > 0
        g_w1 += dh @ pf.T
        g_b1 += dh.sum(axis=1)
        np.dot(w1.T, dh, out=dperc)
        g += depthwise_adjoint(dperc.reshape(perc.shape), params.fixed_kernels, out=adj)
    return Grads(g_w1=g_w1, g_b1=g_b1, g_w2=g_w2)


def backward(tape: Tape, params: RuleParams, grad_final: np.ndarray) -> Grads:
    """Exact gradient of the taped rollout w.r.t. the trainable tensors.

    ``grad_final`` is the loss gradient w.r.t. the final state, same shape
    as the taped states. Deterministic; linear in ``grad_final``.
    """
    if not tape.steps:
        raise ValueError("empty tape")
    first = tape.steps[0].state
    if first.shape[0] != params.state_dim:
        raise ValueError(
            f"tape state depth {first.shape[0]} does not match params D={params.state_dim}"
        )
    if params.w1.shape != (params.hidden_dim, 4 * params.state_dim):
        raise ValueError("params w1 shape inconsistent with w2")
    if grad_final.shape != first.shape:
        raise ValueError(
            f"grad_final shape {grad_final.shape} does not match taped states {first.shape}"
        )
    grads = _backward_state(tape, params, grad_final)
    for name, g in grads.tensors().items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
    return grads


def dice_softmax_grad(
    logits: np.ndarray, target_onehot: np.ndarray, eps: float = 1e-6
):
    """Soft Dice loss of softmax(logits) and its gradient w.r.t. the logits.

    ``logits`` and ``target_onehot`` are ``[C, ..., I, J]``; pixel sums run
    over the trailing two axes, so any middle axes act as independent batch
    entries. Returns ``(loss, d_logits)`` where ``loss`` is a float for
    rank-3 inputs and an array over the batch axes otherwise; ``d_logits``
    is the gradient of the per-entry loss (callers average over the batch
    themselves).

    Per class: 1 - (2*intersection + eps) / (prob_sum + target_sum + eps),
    summed over classes. Gradient w.r.t. a probability is
    num/den^2 - 2*target/den, pushed through the softmax Jacobian as
    s * (g - sum_c s_c g_c).
    """
    if logits.shape != target_onehot.shape:
        raise ValueError(
            f"logits {logits.shape} and target {target_onehot.shape} differ"
        )
    probs = softmax_over_channels(logits)
    pix = (-2, -1)
    inter = (probs * target_onehot).sum(axis=pix)
    psum = probs.sum(axis=pix)
    tsum = target_onehot.sum(axis=pix)
    num = 2.0 * inter + eps
    den = psum + tsum + eps
    loss = (1.0 - num / den).sum(axis=0)

    d_probs = (num / den**2)[..., None, None] - (2.0 / den)[..., None, None] * target_onehot
    d_logits = probs * (d_probs - (probs * d_probs).sum(axis=0, keepdims=True))
    if loss.ndim == 0:
        return float(loss), d_logits
    return loss, d_logits


def _coord_of(params: RuleParams, flat_index: int) -> tuple[str, int]:
    for name in _TRAINABLE:
        size = params.trainables()[name].size
        if flat_index < size:
            return name, flat_index
        flat_index -= size
    raise IndexError("flat index out of range")


def _rollout_with_signs(
    state: np.ndarray,
    params: RuleParams,
    n_steps: int,
    rng: np.random.Generator,
    fire_rate: float,
    d_img: int,
):
    """Plain rollout that also returns the ReLU sign pattern of every step,
    packed as one bool array [T, H, ...]."""
    signs = np.empty((n_steps, params.hidden_dim) + state.shape[1:], dtype=bool)
    for t in range(n_steps):
        mask = (rng.random(state.shape[1:]) < fire_rate).astype(np.float32)
        perc = depthwise_stack(state, params.fixed_kernels)
        hidden = _hidden_act(perc, params.w1, params.b1)
        # post-ReLU support equals the preactivation sign pattern
        signs[t] = hidden > 0
        delta = _delta_from_hidden(hidden, params.w2)
        new_state = state + delta * mask[None]
        new_state[:d_img] = state[:d_img]
        if not np.isfinite(new_state).all():
            raise DivergenceError("cell state went non-finite during update")
        state = new_state
    return state, signs


def grad_check(
    params: RuleParams,
    sample,
    n_steps: int,
    eps: float = 1e-3,
    n_probe: int = 64,
    seed: int = 0,
    fire_rate: float = 1.0,
    n_cls: int = 4,
    probe_tensors: tuple[str, ...] = _TRAINABLE,
    corruption: float = 0.0,
) -> float:
    """Compare backward() against central finite differences of the full
    Dice objective; returns the max relative error over ``n_probe`` randomly
    probed parameter coordinates.

    Perturbed and unperturbed runs recreate the fire-mask stream from the
    same seed, so they share masks exactly. Runs in float64 regardless of
    the params dtype. Error is |analytic - fd| / max(|analytic|, |fd|),
    falling back to the absolute difference when both are below 1e-6.

    A central difference is only a derivative estimate where the loss is
    smooth across the whole [theta-eps, theta+eps] interval; a probe whose
    perturbation flips any ReLU activation anywhere in the rollout straddles
    a kink, so it is discarded and another coordinate is drawn (the analytic
    gradient at such points is still exact; the estimator is not). The
    returned error always covers ``n_probe`` valid probes.

    ``sample`` needs ``image`` ([d_img, I, J], values in [0, 1]) and ``mask``
    ([I, J] class ids) attributes. ``corruption`` is a test hook that skews
    the analytic g_w1 so negative controls can prove the check can fail.
    """
    for name in probe_tensors:
        if name not in _TRAINABLE:
            raise ValueError(f"cannot probe non-trainable tensor {name!r}")
    image = np.asarray(sample.image, dtype=np.float64)
    labels = np.asarray(sample.mask)
    target = one_hot(labels, n_cls).astype(np.float64)
    p64 = params.astype(np.float64)
    d_img = image.shape[0]
    d = p64.state_dim
    if d_img + n_cls > d:
        raise ValueError("params too small for image + class channels")

    def seed_state() -> np.ndarray:
        state = np.zeros((d,) + image.shape[1:], dtype=np.float64)
        state[:d_img] = image
        return state

    def eval_loss(p: RuleParams):
        rng = seeds.stream(seed, seeds.FIRE)
        final, signs = _rollout_with_signs(seed_state(), p, n_steps, rng, fire_rate, d_img)
        loss, _ = dice_softmax_grad(final[d_img : d_img + n_cls], target)
        if not np.isfinite(loss):
            raise NonFiniteError("non-finite loss in grad_check")
        return loss, signs

    rng = seeds.stream(seed, seeds.FIRE)
    final, tape = _forward_tape_state(seed_state(), p64, n_steps, rng, fire_rate, d_img)
    _, d_logits = dice_softmax_grad(final[d_img : d_img + n_cls], target)
    grad_final = np.zeros_like(final)
    grad_final[d_img : d_img + n_cls] = d_logits
    grads = backward(tape, p64, grad_final)
    if corruption:
        grads.g_w1 += corruption
    analytic = {name: g.ravel() for name, g in grads.tensors().items()}
    _, center_signs = eval_loss(p64)

    total = sum(p64.trainables()[name].size for name in _TRAINABLE)
    order = seeds.stream(seed, seeds.PROBE).permutation(total)
    max_err = 0.0
    valid = 0
    for flat in order:
        if valid == n_probe:
            break
        name, idx = _coord_of(p64, int(flat))
        if name not in probe_tensors:
            continue
        tensor = p64.trainables()[name]
        orig = tensor.flat[idx]
        tensor.flat[idx] = orig + eps
        up, up_signs = eval_loss(p64)
        tensor.flat[idx] = orig - eps
        down, dn_signs = eval_loss(p64)
        tensor.flat[idx] = orig
        if not (
            np.array_equal(up_signs, center_signs)
            and np.array_equal(dn_signs, center_signs)
        ):
            continue
        fd = (up - down) / (2.0 * eps)
        a = float(analytic[name][idx])
        denom = max(abs(a), abs(fd))
        err = abs(a - fd) if denom < 1e-6 else abs(a - fd) / denom
        max_err = max(max_err, err)
        valid += 1
    if valid < n_probe:
        raise RuntimeError(
            f"only {valid}/{n_probe} probes avoided activation kinks at eps={eps}"
        )
    return max_err
