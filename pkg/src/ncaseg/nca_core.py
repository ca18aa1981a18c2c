"""The cellular automaton: cell-grid state, the fixed perception stage, one
stochastic masked update step, and multi-step rollout.

Cell state is a ``[D, I, J]`` float array with a fixed channel layout:
channels ``[0, d_img)`` hold the input image and are re-pinned to it after
every step, the next ``n_cls`` channels are the class logits read out for
segmentation, and the remainder is latent state the rule learns to use.

One step: gather a 4-kernel perception of the 3x3 neighborhood of every cell
(identity, box average, and the two smoothed-gradient kernels), push it
through a two-layer per-cell MLP (1x1 convolutions, ReLU between, no bias on
the output layer), and add the result into the state wherever a Bernoulli
fire mask is 1. With the output layer zero-initialized the whole automaton
starts as the identity map, which is what makes training through hundreds of
unrolled steps stable.

The private ``_*_state`` helpers operate on raw state arrays of shape
``[D, ..., I, J]`` so the same code drives single grids and batches; the
public API wraps them in :class:`CellGrid`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import container
from .tensor import depthwise_stack, require_finite

__all__ = [
    "DivergenceError",
    "CheckpointError",
    "NcaConfig",
    "RuleParams",
    "CellGrid",
    "FireMask",
    "fixed_kernel_bank",
    "init_params",
    "random_params",
    "count_trainable_params",
    "seed_grid",
    "perceive",
    "nca_step",
    "rollout",
    "read_class_logits",
    "draw_fire_mask",
    "save_checkpoint",
    "load_checkpoint",
]

N_KERNELS = 4


class DivergenceError(FloatingPointError):
    """Cell state went non-finite; the surrounding training step must abort."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or inconsistent with expectations."""


def fixed_kernel_bank() -> np.ndarray:
    """The four non-trainable 3x3 perception kernels, shape ``[4, 3, 3]``.

    Order: identity, box average, gradient along the row axis, gradient along
    the column axis (Sobel kernels scaled by 1/8). These are constants of the
    architecture; checkpoints that disagree with them are rejected.
    """
    identity = [[0, 0, 0], [0, 1, 0], [0, 0, 0]]
    average = [[1 / 9] * 3] * 3
    grad_i = [[-1 / 8, -2 / 8, -1 / 8], [0, 0, 0], [1 / 8, 2 / 8, 1 / 8]]
    grad_j = [[-1 / 8, 0, 1 / 8], [-2 / 8, 0, 2 / 8], [-1 / 8, 0, 1 / 8]]
    return np.array([identity, average, grad_i, grad_j], dtype=np.float32)


@dataclass(frozen=True)
class NcaConfig:
    """Architecture hyper-parameters: channel layout, widths, fire rate."""

    d_img: int = 1
    n_cls: int = 4
    state_dim: int = 32
    hidden_dim: int = 128
    fire_rate: float = 0.5

    def __post_init__(self):
        if self.d_img < 1 or self.n_cls < 2:
            raise ValueError("need d_img >= 1 and n_cls >= 2")
        if self.d_img + self.n_cls > self.state_dim:
            raise ValueError("state_dim too small for image + class channels")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ValueError("fire_rate must be in (0, 1]")


@dataclass
class RuleParams:
    """Rule-set weights: two 1x1 layers (trainable) + the fixed kernel bank.

    ``w1``: ``[H, 4*D]`` with bias ``b1``: ``[H]``; ``w2``: ``[D, H]``, no
    bias. ``fixed_kernels`` is never touched by the optimizer.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    fixed_kernels: np.ndarray = field(default_factory=fixed_kernel_bank)

    @property
    def state_dim(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w2.shape[1]

    def trainables(self) -> dict[str, np.ndarray]:
        """Trainable tensors in canonical order (fixed_kernels excluded)."""
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2}

    def astype(self, dtype) -> "RuleParams":
        return RuleParams(
            w1=self.w1.astype(dtype),
            b1=self.b1.astype(dtype),
            w2=self.w2.astype(dtype),
            fixed_kernels=self.fixed_kernels.astype(dtype),
        )


def init_params(cfg: NcaConfig, rng: np.random.Generator) -> RuleParams:
    """Fresh weights: fan-in uniform for the hidden layer, zeros elsewhere.

    ``w2 = 0`` makes the initial automaton the identity map regardless of
    ``w1``, so rollouts of any length are stable at step 0 of training.
    """
    d, h = cfg.state_dim, cfg.hidden_dim
    bound = float(np.sqrt(1.0 / (N_KERNELS * d)))
    w1 = rng.uniform(-bound, bound, size=(h, N_KERNELS * d)).astype(np.float32)
    return RuleParams(
        w1=w1,
        b1=np.zeros(h, dtype=np.float32),
        w2=np.zeros((d, h), dtype=np.float32),
    )


def random_params(cfg: NcaConfig, rng: np.random.Generator, w2_scale: float = 1.0) -> RuleParams:
    """Weights with a nonzero output layer, for verification probes.

    Training never starts here (see init_params); gradient checks need all
    parameter paths live, and long-rollout property tests pass a small
    ``w2_scale`` to keep 256-step dynamics inside float32 range.
    """
    d, h = cfg.state_dim, cfg.hidden_dim
    a1 = float(np.sqrt(1.0 / (N_KERNELS * d)))
    a2 = w2_scale * float(np.sqrt(1.0 / h))
    return RuleParams(
        w1=rng.uniform(-a1, a1, size=(h, N_KERNELS * d)).astype(np.float32),
        b1=rng.uniform(-0.05, 0.05, size=h).astype(np.float32),
        w2=rng.uniform(-a2, a2, size=(d, h)).astype(np.float32),
    )


def count_trainable_params(params: RuleParams) -> int:
    """Number of optimized scalars (the fixed kernels never count)."""
    return params.w1.size + params.b1.size + params.w2.size


@dataclass
class CellGrid:
    """Per-image automaton state ``[D, I, J]`` plus its channel layout."""

    state: np.ndarray
    d_img: int
    n_cls: int

    def __post_init__(self):
        if self.state.ndim != 3:
            raise ValueError(f"state must be [D, I, J], got {self.state.shape}")
        if self.d_img + self.n_cls > self.state.shape[0]:
            raise ValueError("channel layout exceeds state depth")


@dataclass
class FireMask:
    """Per-cell Bernoulli gate: ``mask`` is a float {0,1} array ``[I, J]``."""

    mask: np.ndarray
    fire_rate: float

    def __post_init__(self):
        vals = np.unique(self.mask)
        if not np.isin(vals, [0.0, 1.0]).all():
            raise ValueError("fire mask entries must be exactly 0 or 1")
        if not 0.0 < self.fire_rate <= 1.0:
            raise ValueError("fire_rate must be in (0, 1]")


def draw_fire_mask(shape: tuple[int, ...], fire_rate: float, rng: np.random.Generator) -> FireMask:
    """Draw an i.i.d. Bernoulli(fire_rate) mask over ``shape``."""
    mask = (rng.random(shape) < fire_rate).astype(np.float32)
    return FireMask(mask=mask, fire_rate=fire_rate)


def seed_grid(image: np.ndarray, state_dim: int, n_cls: int = 4) -> CellGrid:
    """Embed an image ``[d_img, I, J]`` into a fresh all-zero cell state."""
    if image.ndim != 3:
        raise ValueError(f"image must be [d_img, I, J], got {image.shape}")
    d_img = image.shape[0]
    if d_img + n_cls > state_dim:
        raise ValueError(f"state_dim={state_dim} too small for d_img={d_img} + n_cls={n_cls}")
    state = np.zeros((state_dim,) + image.shape[1:], dtype=image.dtype)
    state[:d_img] = image
    return CellGrid(state=state, d_img=d_img, n_cls=n_cls)


# --- raw-state core, shared by the public API, the trainer, and BPTT -------


def _perception_state(state: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    # [D, ..., I, J] -> [4D, ..., I, J], kernel-major blocks
    return depthwise_stack(state, kernels)


def _hidden_act(perc: np.ndarray, w1: np.ndarray, b1: np.ndarray) -> np.ndarray:
    # per-pixel affine layer + ReLU, fused in place; flattening trailing axes
    # makes the affine part one GEMM
    flat = w1 @ perc.reshape(perc.shape[0], -1)
    flat += b1[:, None]
    np.maximum(flat, 0.0, out=flat)
    return flat.reshape((w1.shape[0],) + perc.shape[1:])


def _delta_from_hidden(hidden: np.ndarray, w2: np.ndarray) -> np.ndarray:
    flat = w2 @ hidden.reshape(hidden.shape[0], -1)
    return flat.reshape((w2.shape[0],) + hidden.shape[1:])


def _step_state(
    state: np.ndarray, params: RuleParams, mask: np.ndarray, d_img: int
) -> np.ndarray:
    """One masked residual update on raw state ``[D, ..., I, J]``.

    ``mask`` has shape ``state.shape[1:]`` and gates the whole per-cell
    update vector. Image channels are re-pinned afterwards.
    """
    perc = _perception_state(state, params.fixed_kernels)
    hidden = _hidden_act(perc, params.w1, params.b1)
    new_state = _delta_from_hidden(hidden, params.w2)
    new_state *= mask[None]
    new_state += state
    new_state[:d_img] = state[:d_img]
    if not np.isfinite(new_state).all():
        raise DivergenceError("cell state went non-finite during update")
    return new_state


def _rollout_state(
    state: np.ndarray,
    params: RuleParams,
    n_steps: int,
    rng: np.random.Generator,
    fire_rate: float,
    d_img: int,
) -> np.ndarray:
    """T sequential updates with a fresh fire mask per step."""
    for _ in range(n_steps):
        mask = (rng.random(state.shape[1:]) < fire_rate).astype(np.float32)
        state = _step_state(state, params, mask, d_img)
    return state


# --- public per-grid API ----------------------------------------------------


def perceive(grid: CellGrid, params: RuleParams) -> np.ndarray:
    """Perception stage: the fixed kernel bank applied to every state channel,
    returning ``[4*D, I, J]`` (block k = kernel k over all D channels)."""
    out = _perception_state(grid.state, params.fixed_kernels)
    require_finite(out, "perception output")
    return out


def nca_step(grid: CellGrid, params: RuleParams, fire: FireMask) -> CellGrid:
    """One update step; returns a new grid, the input is untouched."""
    if fire.mask.shape != grid.state.shape[1:]:
        raise ValueError(
            f"fire mask {fire.mask.shape} does not match grid {grid.state.shape[1:]}"
        )
    if params.state_dim != grid.state.shape[0]:
        raise ValueError("params state_dim does not match grid depth")
    new_state = _step_state(grid.state, params, fire.mask, grid.d_img)
    return CellGrid(state=new_state, d_img=grid.d_img, n_cls=grid.n_cls)


def rollout(
    grid: CellGrid,
    params: RuleParams,
    n_steps: int,
    rng: np.random.Generator,
    fire_rate: float = 0.5,
) -> CellGrid:
    """Apply ``n_steps`` sequential updates, one fresh fire mask per step.

    Deterministic given (grid, params, n_steps, seed); ``n_steps=0`` is the
    identity.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    state = _rollout_state(grid.state, params, n_steps, rng, fire_rate, grid.d_img)
    return CellGrid(state=state, d_img=grid.d_img, n_cls=grid.n_cls)


def read_class_logits(grid: CellGrid) -> np.ndarray:
    """Copy of the class-logit channels, ``[n_cls, I, J]``."""
    return grid.state[grid.d_img : grid.d_img + grid.n_cls].copy()


# --- checkpoint format ------------------------------------------------------

_META_SECTION = "meta"
_REQUIRED_SECTIONS = ("w1", "b1", "w2", "fixed_kernels", _META_SECTION)
_OPT_SECTIONS = ("opt_t", "opt_m_w1", "opt_v_w1", "opt_m_b1", "opt_v_b1", "opt_m_w2", "opt_v_w2")


def save_checkpoint(
    path,
    params: RuleParams,
    cfg: NcaConfig,
    opt_sections: dict[str, np.ndarray] | None = None,
) -> None:
    """Write params + architecture meta (and optionally optimizer state).

    Section order is fixed so identical inputs serialize byte-identically.
    """
    meta = np.array(
        [
            cfg.state_dim,
            cfg.hidden_dim,
            cfg.d_img,
            cfg.n_cls,
            round(cfg.fire_rate * 1e6),
        ],
        dtype=np.float32,
    )
    sections = {
        "w1": params.w1,
        "b1": params.b1,
        "w2": params.w2,
        "fixed_kernels": params.fixed_kernels,
        _META_SECTION: meta,
    }
    if opt_sections:
        for name in _OPT_SECTIONS:
            if name not in opt_sections:
                raise CheckpointError(f"optimizer sections incomplete: missing {name}")
            sections[name] = opt_sections[name]
    container.write_sections(path, sections)


def load_checkpoint(path) -> tuple[RuleParams, NcaConfig, dict[str, np.ndarray] | None]:
    """Read and validate a checkpoint.

    Rejects files whose fixed kernels deviate bit-for-bit from the canonical
    bank, or whose tensor shapes disagree with the recorded meta.
    """
    try:
        sections = container.read_sections(path)
    except container.ContainerError as exc:
        raise CheckpointError(str(exc)) from exc
    for name in _REQUIRED_SECTIONS:
        if name not in sections:
            raise CheckpointError(f"{path}: missing required section {name!r}")
    meta = sections[_META_SECTION]
    if meta.shape != (5,):
        raise CheckpointError(f"{path}: meta must have 5 entries, got {meta.shape}")
    d, h, d_img, n_cls = (int(round(float(v))) for v in meta[:4])
    fire_rate = float(meta[4]) / 1e6
    try:
        cfg = NcaConfig(d_img=d_img, n_cls=n_cls, state_dim=d, hidden_dim=h, fire_rate=fire_rate)
    except ValueError as exc:
        raise CheckpointError(f"{path}: bad meta: {exc}") from exc
    kernels = sections["fixed_kernels"]
    if kernels.tobytes() != fixed_kernel_bank().tobytes():
        raise CheckpointError(f"{path}: fixed perception kernels deviate from the canonical bank")
    params = RuleParams(
        w1=sections["w1"], b1=sections["b1"], w2=sections["w2"], fixed_kernels=kernels
    )
    expected = {
        "w1": (h, N_KERNELS * d),
        "b1": (h,),
        "w2": (d, h),
    }
    for name, shape in expected.items():
        if sections[name].shape != shape:
            raise CheckpointError(
                f"{path}: section {name} has shape {sections[name].shape}, expected {shape}"
            )
    opt = None
    extra = [k for k in sections if k not in _REQUIRED_SECTIONS]
    if extra:
        if set(extra) != set(_OPT_SECTIONS):
            raise CheckpointError(f"{path}: unexpected sections {sorted(set(extra) - set(_OPT_SECTIONS))}")
        opt = {k: sections[k] for k in _OPT_SECTIONS}
        for suffix in ("w1", "b1", "w2"):
            for kind in ("m", "v"):
                name = f"opt_{kind}_{suffix}"
                if opt[name].shape != expected[suffix]:
                    raise CheckpointError(f"{path}: optimizer section {name} shape mismatch")
    return params, cfg, opt
