"""Forward and backward kernels for every layer the classifier uses.

All functions are pure: they never modify their arguments and always return
fresh arrays. Image tensors are (n, c, h, w). Per-channel parameters are
expanded explicitly with ``reshape(1, c, 1, 1)`` before being combined with
feature maps.

Convolution is cross-correlation with stride 1 and no padding, so an ``H x W``
image and a ``kh x kw`` filter give ``(H - kh + 1) x (W - kw + 1)`` outputs.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError
from .tensor import is_deterministic, matmul, require_rank

# Upper bound on im2col buffer elements per chunk in the BLAS path.
_IM2COL_BUDGET = 1 << 24


@dataclass(frozen=True)
class ConvAttrs:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: str = "valid"

    def __post_init__(self):
        if self.kernel_h < 1 or self.kernel_w < 1 or self.out_channels < 1:
            raise ParameterError(f"invalid conv attributes {self}")
        if self.stride != 1 or self.padding != "valid":
            raise ParameterError("only stride 1 with valid padding is supported")


@dataclass(frozen=True)
class PoolAttrs:
    window_h: int
    window_w: int
    stride_h: int | None = None
    stride_w: int | None = None
    mode: str = "average"

    def __post_init__(self):
        # stride defaults to the window
        if self.stride_h is None:
            object.__setattr__(self, "stride_h", self.window_h)
        if self.stride_w is None:
            object.__setattr__(self, "stride_w", self.window_w)
        if min(self.window_h, self.window_w, self.stride_h, self.stride_w) < 1:
            raise ParameterError(f"invalid pool attributes {self}")
        if self.mode not in ("average", "max"):
            raise ParameterError(f"pool mode must be 'average' or 'max', got {self.mode!r}")

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        if self.window_h > h or self.window_w > w:
            raise ShapeError(
                f"pool window {self.window_h}x{self.window_w} exceeds input {h}x{w}"
            )
        return (h - self.window_h) // self.stride_h + 1, (w - self.window_w) // self.stride_w + 1


@dataclass(frozen=True)
class NormState:
    """Batch normalization parameters and running statistics for one layer."""

    gamma: np.ndarray
    beta: np.ndarray
    moving_mean: np.ndarray
    moving_var: np.ndarray
    epsilon: float = 1e-3
    momentum: float = 0.99

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64, **kw) -> "NormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            moving_mean=np.zeros(channels, dtype),
            moving_var=np.ones(channels, dtype),
            **kw,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


# -- activations -------------------------------------------------------------


def sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    if grad_out.shape != x.shape:
        raise ShapeError(f"relu backward: {grad_out.shape} vs {x.shape}")
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def softmax(z: np.ndarray) -> np.ndarray:
    require_rank(z, 2, "softmax input")
    if z.shape[1] < 2:
        raise ShapeError("softmax needs at least two classes")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(grad_out: np.ndarray, probs: np.ndarray) -> np.ndarray:
    if grad_out.shape != probs.shape:
        raise ShapeError(f"softmax backward: {grad_out.shape} vs {probs.shape}")
    inner = (grad_out * probs).sum(axis=1, keepdims=True)
    return probs * (grad_out - inner)


# -- convolution -------------------------------------------------------------


def _check_conv(x: np.ndarray, weights: np.ndarray) -> tuple[int, int]:
    require_rank(x, 4, "conv input")
    require_rank(weights, 4, "conv weights")
    if x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"conv channel mismatch: input has {x.shape[1]}, filters expect {weights.shape[1]}"
        )
    kh, kw = weights.shape[2:]
    if kh > x.shape[2] or kw > x.shape[3]:
        raise ShapeError(f"kernel {kh}x{kw} larger than image {x.shape[2]}x{x.shape[3]}")
    return x.shape[2] - kh + 1, x.shape[3] - kw + 1


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Rows ordered (n, i, j); columns ordered (c, ki, kj)."""
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    ho, wo = win.shape[2:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _batch_chunks(n: int, per_sample: int) -> list[slice]:
    step = max(1, _IM2COL_BUDGET // max(per_sample, 1))
    return [slice(i, min(i + step, n)) for i in range(0, n, step)]


def conv2d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Valid, stride-1 cross-correlation of ``x`` with ``weights`` plus ``bias``."""
    ho, wo = _check_conv(x, weights)
    f, c, kh, kw = weights.shape
    if bias.shape != (f,):
        raise ShapeError(f"conv bias: expected ({f},), got {bias.shape}")
    n = x.shape[0]
    dtype = np.result_type(x, weights)
    if is_deterministic():
        # acc = 0; for c, ki, kj: acc += x * w; then + bias
        out = np.zeros((n, f, ho, wo), dtype=dtype)
        wcol = weights.reshape(1, f, c, kh, kw)
        for ch in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    out += x[:, ch : ch + 1, ki : ki + ho, kj : kj + wo] * wcol[
                        :, :, ch, ki, kj
                    ].reshape(1, f, 1, 1)
        out += bias.reshape(1, f, 1, 1)
        return out
    out = np.empty((n, f, ho, wo), dtype=dtype)
    wmat = weights.reshape(f, c * kh * kw).T
    for sl in _batch_chunks(n, ho * wo * c * kh * kw):
        cols = _im2col(x[sl], kh, kw)
        res = (cols @ wmat).reshape(sl.stop - sl.start, ho, wo, f)
        out[sl] = res.transpose(0, 3, 1, 2)
    out += bias.reshape(1, f, 1, 1)
    return out


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray, need_grad_x: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Return ``(grad_x, grad_weights, grad_bias)``; ``grad_x`` is None if not needed."""
    ho, wo = _check_conv(x, weights)
    f, c, kh, kw = weights.shape
    n = x.shape[0]
    if grad_out.shape != (n, f, ho, wo):
        raise ShapeError(f"conv backward: grad_out {grad_out.shape}, expected {(n, f, ho, wo)}")
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = np.zeros_like(x, dtype=np.result_type(x, grad_out)) if need_grad_x else None
    if is_deterministic():
        grad_w = np.empty(weights.shape, dtype=np.result_type(x, grad_out))
        for ki in range(kh):
            for kj in range(kw):
                xs = x[:, :, ki : ki + ho, kj : kj + wo]
                grad_w[:, :, ki, kj] = np.einsum("nfij,ncij->fc", grad_out, xs)
                if need_grad_x:
                    grad_x[:, :, ki : ki + ho, kj : kj + wo] += np.einsum(
                        "nfij,fc->ncij", grad_out, weights[:, :, ki, kj]
                    )
        return grad_x, grad_w, grad_b
    k = c * kh * kw
    grad_w = np.zeros((f, k), dtype=np.result_type(x, grad_out))
    wmat = weights.reshape(f, k)
    for sl in _batch_chunks(n, ho * wo * k):
        m = sl.stop - sl.start
        g = grad_out[sl].transpose(0, 2, 3, 1).reshape(m * ho * wo, f)
        grad_w += g.T @ _im2col(x[sl], kh, kw)
        if need_grad_x:
            gcols = (g @ wmat).reshape(m, ho, wo, c, kh, kw)
            gx = grad_x[sl]
            for ki in range(kh):
                for kj in range(kw):
                    gx[:, :, ki : ki + ho, kj : kj + wo] += gcols[:, :, :, :, ki, kj].transpose(
                        0, 3, 1, 2
                    )
    return grad_x, grad_w.reshape(weights.shape), grad_b


# -- pooling -----------------------------------------------------------------


def _pool_windows(x: np.ndarray, attrs: PoolAttrs) -> np.ndarray:
    ho, wo = attrs.output_hw(x.shape[2], x.shape[3])
    win = sliding_window_view(x, (attrs.window_h, attrs.window_w), axis=(2, 3))
    return win[:, :, : (ho - 1) * attrs.stride_h + 1 : attrs.stride_h,
               : (wo - 1) * attrs.stride_w + 1 : attrs.stride_w]


def pool2d_forward(x: np.ndarray, attrs: PoolAttrs) -> np.ndarray:
    require_rank(x, 4, "pool input")
    win = _pool_windows(x, attrs)
    if attrs.mode == "average":
        return win.mean(axis=(4, 5), dtype=x.dtype)
    return win.max(axis=(4, 5))


def pool2d_backward(grad_out: np.ndarray, x: np.ndarray, attrs: PoolAttrs) -> np.ndarray:
    """Average pooling spreads gradient evenly; max pooling routes it to the first maximum."""
    require_rank(x, 4, "pool input")
    ho, wo = attrs.output_hw(x.shape[2], x.shape[3])
    if grad_out.shape != x.shape[:2] + (ho, wo):
        raise ShapeError(f"pool backward: grad_out {grad_out.shape} vs expected {x.shape[:2] + (ho, wo)}")
    wh, ww, sh, sw = attrs.window_h, attrs.window_w, attrs.stride_h, attrs.stride_w
    grad_x = np.zeros(x.shape, dtype=np.result_type(x, grad_out))
    if attrs.mode == "average":
        share = grad_out / (wh * ww)
        for a in range(wh):
            for b in range(ww):
                grad_x[:, :, a : a + (ho - 1) * sh + 1 : sh, b : b + (wo - 1) * sw + 1 : sw] += share
        return grad_x
    win = _pool_windows(x, attrs).reshape(x.shape[:2] + (ho, wo, wh * ww))
    arg = win.argmax(axis=-1)
    for a in range(wh):
        for b in range(ww):
            hit = arg == a * ww + b
            grad_x[:, :, a : a + (ho - 1) * sh + 1 : sh, b : b + (wo - 1) * sw + 1 : sw] += np.where(
                hit, grad_out, 0
            )
    return grad_x


# -- batch normalization -----------------------------------------------------


def _check_norm(x: np.ndarray, state: NormState) -> int:
    require_rank(x, 4, "batchnorm input")
    c = x.shape[1]
    for name in ("gamma", "beta", "moving_mean", "moving_var"):
        if getattr(state, name).shape != (c,):
            raise ShapeError(f"batchnorm {name}: expected ({c},), got {getattr(state, name).shape}")
    return c


def _batch_moments(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean.reshape(1, -1, 1, 1)
    return mean, (centered * centered).mean(axis=(0, 2, 3))


def batchnorm_forward(
    x: np.ndarray, state: NormState, mode: str
) -> tuple[np.ndarray, NormState]:
    """Normalize per channel; returns the output and the (possibly updated) state.

    Train mode uses the biased batch variance over (n, h, w) and folds it into
    the running statistics with ``momentum``. Infer mode uses the running
    statistics and returns ``state`` unchanged.
    """
    c = _check_norm(x, state)
    expand = (1, c, 1, 1)
    if mode == "train":
        mean, var = _batch_moments(x)
        mom = state.momentum
        state = dataclasses.replace(
            state,
            moving_mean=(mom * state.moving_mean + (1 - mom) * mean).astype(state.moving_mean.dtype),
            moving_var=(mom * state.moving_var + (1 - mom) * var).astype(state.moving_var.dtype),
        )
    elif mode == "infer":
        mean, var = state.moving_mean, state.moving_var
    else:
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean.reshape(expand)) * inv_std.reshape(expand)
    y = x_hat * state.gamma.reshape(expand) + state.beta.reshape(expand)
    return y.astype(x.dtype, copy=False), state


def batchnorm_backward(
    grad_out: np.ndarray, x: np.ndarray, state: NormState
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the train-mode transform, batch statistics included."""
    c = _check_norm(x, state)
    if grad_out.shape != x.shape:
        raise ShapeError(f"batchnorm backward: {grad_out.shape} vs {x.shape}")
    expand = (1, c, 1, 1)
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mean, var = _batch_moments(x)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    x_hat = (x - mean.reshape(expand)) * inv_std.reshape(expand)
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * x_hat).sum(axis=(0, 2, 3))
    scale = (state.gamma * inv_std / count).reshape(expand)
    grad_x = scale * (
        count * grad_out - grad_beta.reshape(expand) - x_hat * grad_gamma.reshape(expand)
    )
    return grad_x.astype(x.dtype, copy=False), grad_gamma, grad_beta


# -- dense -------------------------------------------------------------------


def _check_dense(x: np.ndarray, weights: np.ndarray) -> None:
    require_rank(x, 2, "dense input")
    require_rank(weights, 2, "dense weights")
    if x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense: input width {x.shape[1]} vs weights {weights.shape}")


def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _check_dense(x, weights)
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias: expected ({weights.shape[1]},), got {bias.shape}")
    return matmul(x, weights) + bias.reshape(1, -1)


def dense_backward(
    grad_out: np.ndarray, x: np.ndarray, weights: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_dense(x, weights)
    if grad_out.shape != (x.shape[0], weights.shape[1]):
        raise ShapeError(f"dense backward: grad_out {grad_out.shape}")
    return matmul(grad_out, weights.T), matmul(x.T, grad_out), grad_out.sum(axis=0)


# -- dropout -----------------------------------------------------------------


def dropout(
    x: np.ndarray, rate: float, mode: str, rng: np.random.Generator | None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Inverted dropout. Returns ``(output, mask)``; the mask already carries the
    ``1 / (1 - rate)`` scale and is None when the op is the identity."""
    if not 0 <= rate < 1:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ParameterError(f"mode must be 'train' or 'infer', got {mode!r}")
    if mode == "infer" or rate == 0:
        return x.copy(), None
    if rng is None:
        raise ParameterError("train-mode dropout needs a random generator")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    if mask is None:
        return grad_out.copy()
    if mask.shape != grad_out.shape:
        raise ShapeError(f"dropout backward: {grad_out.shape} vs mask {mask.shape}")
    return grad_out * mask


# -- reshaping ---------------------------------------------------------------


def flatten(x: np.ndarray) -> np.ndarray:
    require_rank(x, 4, "flatten input")
    return x.reshape(x.shape[0], -1).copy()


def unflatten(x: np.ndarray, shape: Sequence[int]) -> np.ndarray:
    return x.reshape(tuple(shape)).copy()


def concat(xs: Sequence[np.ndarray]) -> np.ndarray:
    if not xs:
        raise ShapeError("concat needs at least one input")
    for x in xs:
        require_rank(x, 2, "concat input")
    if len({x.shape[0] for x in xs}) != 1:
        raise ShapeError(f"concat batch extents differ: {[x.shape for x in xs]}")
    return np.concatenate(xs, axis=1)


def concat_backward(grad_out: np.ndarray, widths: Sequence[int]) -> list[np.ndarray]:
    if sum(widths) != grad_out.shape[1]:
        raise ShapeError(f"concat backward: widths {list(widths)} vs {grad_out.shape}")
    cuts = np.cumsum(widths)[:-1]
    return [g.copy() for g in np.split(grad_out, cuts, axis=1)]
