"""Dense tensor operations for the network core: forwards and hand-written
backwards.

Tensors are plain C-contiguous numpy arrays; shape metadata is the ndarray
shape, data is the flat row-major buffer. Convolution inputs are
[channels, height, width] single examples; batching is the caller's loop,
except batch normalization in training mode which is defined over a stacked
[batch, channels, ...] tensor because its statistics couple the batch.

Every forward surfaces NaN/Inf as NumericFaultError: silent non-finite
values would otherwise poison gradient checks downstream. No op mutates its
inputs, so read-only tensors may be shared across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericFaultError, ShapeMismatchError

_TENSOR_FIELDS = ("weights", "bias", "bn_gamma", "bn_beta", "bn_mean", "bn_var")


@dataclass
class LayerParams:
    """Named parameter bundle for one layer.

    Convolution/dense layers carry weights (+ optional bias); layers with an
    attached batch norm also carry the four bn tensors. A pure normalization
    layer carries only the bn tensors.
    """

    name: str
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None
    bn_gamma: np.ndarray | None = None
    bn_beta: np.ndarray | None = None
    bn_mean: np.ndarray | None = None
    bn_var: np.ndarray | None = None

    def tensors(self) -> dict[str, np.ndarray]:
        """Present tensors keyed as '<layer>.<field>', in declaration order."""
        out = {}
        for f in _TENSOR_FIELDS:
            value = getattr(self, f)
            if value is not None:
                out[f"{self.name}.{f}"] = value
        return out

    def has_bn(self) -> bool:
        return self.bn_gamma is not None

    def validate(self) -> None:
        if self.bn_var is not None and np.any(self.bn_var < 0):
            raise ShapeMismatchError(f"{self.name}: bn_var has negative entries")
        bn = [self.bn_gamma, self.bn_beta, self.bn_mean, self.bn_var]
        if any(t is not None for t in bn) and not all(t is not None for t in bn):
            raise ShapeMismatchError(f"{self.name}: partial batch-norm tensor set")


def layer_params_fields() -> tuple[str, ...]:
    return _TENSOR_FIELDS


def _ensure_finite(op: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericFaultError(f"{op} produced non-finite values")


# --- convolution -----------------------------------------------------------

def _conv_windows(x: np.ndarray, k_h: int, k_w: int, pad_h: int, pad_w: int) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    if k_h > xp.shape[1] or k_w > xp.shape[2]:
        raise ShapeMismatchError(
            f"kernel {k_h}x{k_w} larger than padded input {xp.shape[1]}x{xp.shape[2]}"
        )
    return sliding_window_view(xp, (k_h, k_w), axis=(1, 2))  # [C, H', W', kH, kW]


def conv2d(x: np.ndarray, params: LayerParams, pad_h: int = 0, pad_w: int = 0) -> np.ndarray:
    """Valid cross-correlation of a zero-padded [C_in, H, W] input with
    [C_out, C_in, kH, kW] kernels; per-channel bias added when present."""
    w = params.weights
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise ShapeMismatchError(
            f"{params.name}: conv input {x.shape} vs weights {w.shape}"
        )
    win = _conv_windows(x, w.shape[2], w.shape[3], pad_h, pad_w)
    y = np.tensordot(w, win, axes=([1, 2, 3], [0, 3, 4]))
    if params.bias is not None:
        y = y + params.bias[:, None, None]
    _ensure_finite("conv2d", y)
    return y


def conv2d_backward(
    x: np.ndarray,
    params: LayerParams,
    grad_out: np.ndarray,
    pad_h: int = 0,
    pad_w: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Exact gradients of conv2d: (grad_input, grad_weights, grad_bias)."""
    w = params.weights
    k_h, k_w = w.shape[2], w.shape[3]
    win = _conv_windows(x, k_h, k_w, pad_h, pad_w)
    if grad_out.shape != (w.shape[0],) + win.shape[1:3]:
        raise ShapeMismatchError(
            f"{params.name}: grad_out {grad_out.shape} inconsistent with forward"
        )
    grad_w = np.tensordot(grad_out, win, axes=([1, 2], [1, 2]))
    grad_b = grad_out.sum(axis=(1, 2)) if params.bias is not None else None

    # full correlation of grad_out with the flipped kernel, then crop padding
    gp = np.pad(grad_out, ((0, 0), (k_h - 1, k_h - 1), (k_w - 1, k_w - 1)))
    gwin = sliding_window_view(gp, (k_h, k_w), axis=(1, 2))
    w_flip = w[:, :, ::-1, ::-1]
    grad_xp = np.tensordot(w_flip, gwin, axes=([0, 2, 3], [0, 3, 4]))
    h, wd = x.shape[1], x.shape[2]
    grad_x = grad_xp[:, pad_h : pad_h + h, pad_w : pad_w + wd]
    _ensure_finite("conv2d_backward", grad_x, grad_w)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# --- dense -----------------------------------------------------------------

def dense(x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Affine map of a vector: weights [M, N] @ x [N] + bias [M]."""
    w = params.weights
    if x.ndim != 1 or w.ndim != 2 or w.shape[1] != x.shape[0]:
        raise ShapeMismatchError(f"{params.name}: dense input {x.shape} vs weights {w.shape}")
    y = w @ x
    if params.bias is not None:
        y = y + params.bias
    _ensure_finite("dense", y)
    return y


def dense_backward(
    x: np.ndarray, params: LayerParams, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    w = params.weights
    if grad_out.shape != (w.shape[0],):
        raise ShapeMismatchError(f"{params.name}: grad_out {grad_out.shape} vs weights {w.shape}")
    grad_w = np.outer(grad_out, x)
    grad_b = grad_out.copy() if params.bias is not None else None
    grad_x = w.T @ grad_out
    return grad_x, grad_w, grad_b


# --- batch normalization ----------------------------------------------------

def _bn_shape(param: np.ndarray, ndim: int, channel_axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[channel_axis] = param.shape[0]
    return param.reshape(shape)


def batchnorm_infer(x: np.ndarray, params: LayerParams, epsilon: float = 1e-5) -> np.ndarray:
    """Normalize with stored running statistics; channel axis is axis 0."""
    c = x.shape[0]
    if params.bn_gamma is None or params.bn_gamma.shape[0] != c:
        raise ShapeMismatchError(f"{params.name}: bn parameters do not match {c} channels")
    gamma, beta, mean, var = (
        _bn_shape(t, x.ndim, 0) for t in (params.bn_gamma, params.bn_beta, params.bn_mean, params.bn_var)
    )
    y = (x - mean) / np.sqrt(var + epsilon) * gamma + beta
    _ensure_finite("batchnorm_infer", y)
    return y


def batchnorm_infer_backward(
    x: np.ndarray, params: LayerParams, grad_out: np.ndarray, epsilon: float = 1e-5
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of batchnorm_infer wrt (x, gamma, beta, mean, var).

    Running statistics are plain parameters of the inference map, so they
    get exact gradients too; this is what lets the whole-network gradient
    check cover every stored tensor.
    """
    axes = tuple(range(1, x.ndim))
    gamma = _bn_shape(params.bn_gamma, x.ndim, 0)
    mean = _bn_shape(params.bn_mean, x.ndim, 0)
    var = _bn_shape(params.bn_var, x.ndim, 0)
    inv = 1.0 / np.sqrt(var + epsilon)
    xc = x - mean
    grad_x = grad_out * gamma * inv
    grad_gamma = (grad_out * xc * inv).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    grad_mean = -(grad_out * gamma * inv).sum(axis=axes)
    grad_var = (grad_out * xc * gamma * (-0.5) * inv**3).sum(axis=axes)
    return grad_x, grad_gamma, grad_beta, grad_mean, grad_var


def batchnorm_train(
    batch: np.ndarray, params: LayerParams, epsilon: float = 1e-5
) -> tuple[np.ndarray, np.ndarray, np.ndarray, dict]:
    """Normalize a [B, C, ...] batch with its own statistics.

    Returns (output, batch_mean, batch_var, cache); variance is the biased
    per-channel moment over batch and spatial axes. The cache feeds
    batchnorm_train_backward.
    """
    c = batch.shape[1]
    if params.bn_gamma is None or params.bn_gamma.shape[0] != c:
        raise ShapeMismatchError(f"{params.name}: bn parameters do not match {c} channels")
    axes = (0,) + tuple(range(2, batch.ndim))
    mean = batch.mean(axis=axes)
    var = batch.var(axis=axes)
    inv = 1.0 / np.sqrt(_bn_shape(var, batch.ndim, 1) + epsilon)
    xhat = (batch - _bn_shape(mean, batch.ndim, 1)) * inv
    y = xhat * _bn_shape(params.bn_gamma, batch.ndim, 1) + _bn_shape(params.bn_beta, batch.ndim, 1)
    _ensure_finite("batchnorm_train", y)
    cache = {"xhat": xhat, "inv": inv, "axes": axes, "count": batch.size // c}
    return y, mean, var, cache


def batchnorm_train_backward(
    params: LayerParams, cache: dict, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of batchnorm_train wrt (batch, gamma, beta)."""
    xhat, inv, axes, m = cache["xhat"], cache["inv"], cache["axes"], cache["count"]
    gamma = _bn_shape(params.bn_gamma, grad_out.ndim, 1)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    gxhat = grad_out * gamma
    sum_g = _bn_shape(gxhat.sum(axis=axes), grad_out.ndim, 1)
    sum_gx = _bn_shape((gxhat * xhat).sum(axis=axes), grad_out.ndim, 1)
    grad_x = (inv / m) * (m * gxhat - sum_g - xhat * sum_gx)
    return grad_x, grad_gamma, grad_beta


# --- activations ------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    arr = np.asarray(x)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    scalar_input = arr.ndim == 0
    arr = np.atleast_1d(arr)
    out = np.empty_like(arr)
    pos = arr >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[~pos])
    out[~pos] = ex / (1.0 + ex)
    _ensure_finite("sigmoid", out)
    return out[0] if scalar_input else out


def sigmoid_backward(y: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Backward from the forward output y = sigmoid(x)."""
    return grad_out * y * (1.0 - y)


def softmax_over_axis(x: np.ndarray, axis: int) -> np.ndarray:
    """Shift-invariant softmax along one axis."""
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    _ensure_finite("softmax_over_axis", y)
    return y


def softmax_backward(y: np.ndarray, grad_out: np.ndarray, axis: int) -> np.ndarray:
    inner = (grad_out * y).sum(axis=axis, keepdims=True)
    return y * (grad_out - inner)


# --- pooling ----------------------------------------------------------------

def pool_max(x: np.ndarray, window_h: int, window_w: int) -> np.ndarray:
    """Non-overlapping max pooling of [C, H, W]; windows must divide extents."""
    c, h, w = x.shape
    if h % window_h != 0 or w % window_w != 0:
        raise ShapeMismatchError(
            f"pool window {window_h}x{window_w} does not divide input {h}x{w}"
        )
    view = x.reshape(c, h // window_h, window_h, w // window_w, window_w)
    return view.max(axis=(2, 4))


def pool_max_backward(
    x: np.ndarray, window_h: int, window_w: int, grad_out: np.ndarray
) -> np.ndarray:
    """Routes each window's gradient to its first (lowest linear index) max."""
    c, h, w = x.shape
    ho, wo = h // window_h, w // window_w
    tiles = x.reshape(c, ho, window_h, wo, window_w).transpose(0, 1, 3, 2, 4)
    flat = tiles.reshape(c, ho, wo, window_h * window_w)
    idx = flat.argmax(axis=3)
    grad_tiles = np.zeros_like(flat)
    np.put_along_axis(grad_tiles, idx[..., None], grad_out[..., None], axis=3)
    return (
        grad_tiles.reshape(c, ho, wo, window_h, window_w)
        .transpose(0, 1, 3, 2, 4)
        .reshape(c, h, w)
    )


def pool_mean_over_axis(x: np.ndarray, axis: int) -> np.ndarray:
    return x.mean(axis=axis)


def pool_mean_over_axis_backward(
    shape: tuple[int, ...], axis: int, grad_out: np.ndarray
) -> np.ndarray:
    n = shape[axis]
    return np.broadcast_to(np.expand_dims(grad_out / n, axis), shape).copy()


def pool_max_over_axis(x: np.ndarray, axis: int) -> np.ndarray:
    return x.max(axis=axis)


def pool_max_over_axis_backward(x: np.ndarray, axis: int, grad_out: np.ndarray) -> np.ndarray:
    """Gradient to the first maximal element along the axis."""
    idx = np.expand_dims(x.argmax(axis=axis), axis)
    grad = np.zeros_like(x)
    np.put_along_axis(grad, idx, np.expand_dims(grad_out, axis), axis=axis)
    return grad


# --- gradient checking -------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    max_relative_error: float
    passed: bool


@dataclass
class GradCheckReport:
    tolerance: float
    epsilon: float
    entries: list[GradCheckEntry]

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.max_relative_error)

    def __str__(self) -> str:
        lines = [
            f"{e.name}: {e.max_relative_error:.3e} {'ok' if e.passed else 'FAIL'}"
            for e in self.entries
        ]
        lines.append(f"overall: {'ok' if self.passed else 'FAIL'} (tol {self.tolerance:g})")
        return "\n".join(lines)


def grad_check(f, inputs: dict[str, np.ndarray], epsilon: float = 1e-5,
               tolerance: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    `f(tensors)` must return (loss, grads) where grads maps every key of
    `inputs` to an array of the same shape. Inputs must be float64: at lower
    precision the difference quotient noise swamps the tolerance. Relative
    error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    for name, arr in inputs.items():
        if arr.dtype != np.float64:
            raise NumericFaultError(f"grad_check needs float64 inputs, {name} is {arr.dtype}")
    _, analytic = f(inputs)
    entries = []
    for name, arr in inputs.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != arr.shape:
            raise ShapeMismatchError(f"analytic gradient for {name} has shape {a.shape}")
        worst = 0.0
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            perturbed = {k: (v if k != name else v.copy()) for k, v in inputs.items()}
            pflat = perturbed[name].reshape(-1)
            pflat[i] = orig + epsilon
            loss_plus, _ = f(perturbed)
            pflat[i] = orig - epsilon
            loss_minus, _ = f(perturbed)
            numeric = (loss_plus - loss_minus) / (2.0 * epsilon)
            ai = a.reshape(-1)[i]
            err = abs(ai - numeric) / max(abs(ai), abs(numeric), 1e-8)
            worst = max(worst, err)
        entries.append(GradCheckEntry(name, worst, worst < tolerance))
    return GradCheckReport(tolerance=tolerance, epsilon=epsilon, entries=entries)
