"""Dense float-array numerics: the two convolution shapes the automaton needs,
pointwise activations, and per-pixel softmax.

Arrays are channels-first ``[C, I, J]``, row-major (last axis fastest).
float32 is the working precision; float64 is accepted everywhere so
verification paths (finite-difference checks) can run at higher precision.
Every public op is a pure function of its inputs and raises instead of
silently propagating NaN/Inf.
"""

from __future__ import annotations

import numba
import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "conv3x3_depthwise",
    "conv1x1",
    "relu",
    "softmax_over_channels",
    "one_hot",
    "require_finite",
]

_FLOAT_DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    """An operand's shape violates the operation's contract."""


class NonFiniteError(FloatingPointError):
    """A public operation produced (or received) NaN or Inf."""


def require_finite(arr: np.ndarray, what: str) -> None:
    """Raise NonFiniteError unless every entry of ``arr`` is finite."""
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


def _check_float(arr: np.ndarray, what: str) -> None:
    if not isinstance(arr, np.ndarray) or arr.dtype.type not in _FLOAT_DTYPES:
        raise ShapeError(f"{what} must be a float32/float64 ndarray")


@numba.njit(cache=True)
def _stack3_jit(padded, kernels, out):
    # padded [M, I+2, J+2], kernels [K, 3, 3], out [K, M, I, J]; plain 9-tap
    # cross-correlation, kernel loop outermost so the j loop stays vectorizable
    n_k = kernels.shape[0]
    n_m, n_i, n_j = out.shape[1], out.shape[2], out.shape[3]
    for k in range(n_k):
        w00 = kernels[k, 0, 0]; w01 = kernels[k, 0, 1]; w02 = kernels[k, 0, 2]
        w10 = kernels[k, 1, 0]; w11 = kernels[k, 1, 1]; w12 = kernels[k, 1, 2]
        w20 = kernels[k, 2, 0]; w21 = kernels[k, 2, 1]; w22 = kernels[k, 2, 2]
        for m in range(n_m):
            for i in range(n_i):
                for j in range(n_j):
                    out[k, m, i, j] = (
                        w00 * padded[m, i, j]
                        + w01 * padded[m, i, j + 1]
                        + w02 * padded[m, i, j + 2]
                        + w10 * padded[m, i + 1, j]
                        + w11 * padded[m, i + 1, j + 1]
                        + w12 * padded[m, i + 1, j + 2]
                        + w20 * padded[m, i + 2, j]
                        + w21 * padded[m, i + 2, j + 1]
                        + w22 * padded[m, i + 2, j + 2]
                    )


@numba.njit(cache=True)
def _adjoint3_jit(padded, kernels, out):
    # padded [K, M, I+2, J+2], kernels [K, 3, 3] already flipped, out [M, I, J]
    # prezeroed; accumulates the per-kernel correlations
    n_k = kernels.shape[0]
    n_m, n_i, n_j = out.shape
    for k in range(n_k):
        w00 = kernels[k, 0, 0]; w01 = kernels[k, 0, 1]; w02 = kernels[k, 0, 2]
        w10 = kernels[k, 1, 0]; w11 = kernels[k, 1, 1]; w12 = kernels[k, 1, 2]
        w20 = kernels[k, 2, 0]; w21 = kernels[k, 2, 1]; w22 = kernels[k, 2, 2]
        for m in range(n_m):
            for i in range(n_i):
                for j in range(n_j):
                    out[m, i, j] += (
                        w00 * padded[k, m, i, j]
                        + w01 * padded[k, m, i, j + 1]
                        + w02 * padded[k, m, i, j + 2]
                        + w10 * padded[k, m, i + 1, j]
                        + w11 * padded[k, m, i + 1, j + 1]
                        + w12 * padded[k, m, i + 1, j + 2]
                        + w20 * padded[k, m, i + 2, j]
                        + w21 * padded[k, m, i + 2, j + 1]
                        + w22 * padded[k, m, i + 2, j + 2]
                    )


def depthwise_stack(
    x: np.ndarray, kernels: np.ndarray, out: np.ndarray | None = None
) -> np.ndarray:
    """Apply every 3x3 kernel to every channel of ``x`` (zero padding, stride 1).

    ``x`` has shape ``[C, ..., I, J]`` (extra axes, e.g. a batch axis, ride
    along untouched); the result has shape ``[K*C, ..., I, J]`` with
    kernel-major blocks: block ``k`` is kernel ``k`` applied to all C channels.
    ``out``, when given, must be that shape/dtype and C-contiguous.
    """
    n_k = kernels.shape[0]
    bank = np.ascontiguousarray(kernels, dtype=x.dtype)
    flat = np.ascontiguousarray(x).reshape((-1,) + x.shape[-2:])
    padded = np.pad(flat, [(0, 0), (1, 1), (1, 1)])
    want = (n_k * x.shape[0],) + x.shape[1:]
    if out is None:
        out = np.empty(want, dtype=x.dtype)
    elif out.shape != want or out.dtype != x.dtype or not out.flags.c_contiguous:
        raise ShapeError(f"out must be C-contiguous {want} of dtype {x.dtype}")
    _stack3_jit(padded, bank, out.reshape((n_k, flat.shape[0]) + x.shape[-2:]))
    return out


def depthwise_adjoint(
    y: np.ndarray, kernels: np.ndarray, out: np.ndarray | None = None
) -> np.ndarray:
    """Adjoint of :func:`depthwise_stack`: fold ``[K*C, ..., I, J]`` back to
    ``[C, ..., I, J]``.

    The transpose of a zero-padded "same" convolution is the same convolution
    with the kernel flipped in both spatial axes, summed over kernel blocks.
    ``out``, when given, is overwritten (same contiguity rule as the stack).
    """
    n_k = kernels.shape[0]
    n_c = y.shape[0] // n_k
    flipped = np.ascontiguousarray(kernels[:, ::-1, ::-1], dtype=y.dtype)
    flat = np.ascontiguousarray(y).reshape((n_k, -1) + y.shape[-2:])
    padded = np.pad(flat, [(0, 0), (0, 0), (1, 1), (1, 1)])
    want = (n_c,) + y.shape[1:]
    if out is None:
        out = np.zeros(want, dtype=y.dtype)
    elif out.shape != want or out.dtype != y.dtype or not out.flags.c_contiguous:
        raise ShapeError(f"out must be C-contiguous {want} of dtype {y.dtype}")
    else:
        out[...] = 0
    _adjoint3_jit(padded, flipped, out.reshape((flat.shape[1],) + y.shape[-2:]))
    return out


def conv3x3_depthwise(
    input: np.ndarray, kernels: np.ndarray, padding: str = "zero"
) -> np.ndarray:
    """Depthwise 3x3 "same" convolution of ``[Cin, I, J]`` with a kernel bank
    ``[K, 3, 3]``, returning ``[K*Cin, I, J]``.

    Output channel ``k*Cin + c`` is kernel ``k`` applied to input channel ``c``.
    Cells outside the grid contribute zero (the only supported padding mode).
    """
    _check_float(input, "input")
    _check_float(kernels, "kernels")
    if padding != "zero":
        raise ShapeError(f"unsupported padding mode {padding!r} (only 'zero')")
    if input.ndim != 3:
        raise ShapeError(f"input must be rank 3 [C, I, J], got shape {input.shape}")
    if kernels.ndim != 3 or kernels.shape[1:] != (3, 3):
        raise ShapeError(f"kernels must be [K, 3, 3], got shape {kernels.shape}")
    out = depthwise_stack(input, kernels)
    require_finite(out, "conv3x3_depthwise output")
    return out


def conv1x1(
    input: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None
) -> np.ndarray:
    """Per-pixel affine map: ``[Cin, I, J] -> [Cout, I, J]``.

    Equivalent to ``weight @ x + bias`` applied independently at every pixel.
    """
    _check_float(input, "input")
    _check_float(weight, "weight")
    if input.ndim != 3:
        raise ShapeError(f"input must be rank 3 [C, I, J], got shape {input.shape}")
    if weight.ndim != 2 or weight.shape[1] != input.shape[0]:
        raise ShapeError(
            f"weight {weight.shape} does not match input channels {input.shape[0]}"
        )
    flat = weight @ input.reshape(input.shape[0], -1)
    if bias is not None:
        _check_float(bias, "bias")
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        flat += bias[:, None]
    out = flat.reshape((weight.shape[0],) + input.shape[1:])
    require_finite(out, "conv1x1 output")
    return out


def relu(input: np.ndarray) -> np.ndarray:
    """Elementwise max(0, x)."""
    _check_float(input, "input")
    return np.maximum(input, 0.0)


def one_hot(labels: np.ndarray, n_cls: int) -> np.ndarray:
    """Integer label map ``[...]`` -> float32 one-hot ``[n_cls, ...]``."""
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"labels outside [0, {n_cls})")
    classes = np.arange(n_cls).reshape((n_cls,) + (1,) * labels.ndim)
    return (labels[None] == classes).astype(np.float32)


def softmax_over_channels(input: np.ndarray) -> np.ndarray:
    """Per-pixel softmax across the channel axis (axis 0).

    Stabilized by per-pixel max subtraction; accepts ``[C, I, J]`` or any
    ``[C, ...]`` layout with channels leading. Requires C >= 2.
    """
    _check_float(input, "input")
    if input.ndim < 1 or input.shape[0] < 2:
        raise ShapeError(f"softmax needs >= 2 channels, got shape {input.shape}")
    require_finite(input, "softmax input")
    shifted = input - input.max(axis=0, keepdims=True)
    np.exp(shifted, out=shifted)
    shifted /= shifted.sum(axis=0, keepdims=True)
    return shifted
