"""Minimal numerical engine: layer primitives with analytic backward passes.

Tensors are plain numpy arrays (row-major, C order). Every forward function
returns ``(output, cache)`` and the matching backward consumes that cache, so
a model can be assembled without an autodiff graph. Computation happens in the
dtype of the input; models store float32 parameters and gradient checks run
the same code in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _kernels
from .errors import InvalidArgument


@dataclass
class LayerParams:
    """Weights and biases of one conv2d or dense layer.

    conv2d weights are (out, in, kh, kw); dense weights are (out, in).
    """

    kind: str
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        if self.kind not in ("conv2d", "dense"):
            raise InvalidArgument(f"unknown layer kind {self.kind!r}")
        expected = 4 if self.kind == "conv2d" else 2
        if self.weights.ndim != expected:
            raise InvalidArgument(
                f"{self.kind} weights must be {expected}-D, got {self.weights.shape}"
            )
        if self.biases.shape != (self.weights.shape[0],):
            raise InvalidArgument("bias length must equal output units")

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.weights.shape[1:]))

    def astype(self, dtype) -> "LayerParams":
        return LayerParams(self.kind, self.weights.astype(dtype), self.biases.astype(dtype))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(params), np.zeros_like(params), 0)


def he_init(fan_in: int, count, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Zero-mean normal samples with variance 2/fan_in.

    ``count`` may be an int or a shape tuple.
    """
    if fan_in < 1:
        raise InvalidArgument(f"fan_in must be >= 1, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(count) * std).astype(dtype)


def init_layer(kind: str, shape: tuple, rng: np.random.Generator, dtype=np.float32) -> LayerParams:
    fan_in = int(np.prod(shape[1:]))
    w = he_init(fan_in, shape, rng, dtype)
    return LayerParams(kind, w, np.zeros(shape[0], dtype=dtype))


# ---------------------------------------------------------------- conv2d


@dataclass
class ConvCache:
    input_shape: tuple
    cols: np.ndarray  # (C*kh*kw, Ho*Wo)
    stride: int
    padding: int
    out_hw: tuple


def _conv_out_hw(h, w, kh, kw, stride):
    return (h - kh) // stride + 1, (w - kw) // stride + 1


def conv2d_forward(x: np.ndarray, params: LayerParams, stride: int = 1, padding: int = 0):
    """Valid cross-correlation of a CxHxW input (im2col + one GEMM)."""
    if x.ndim != 3:
        raise InvalidArgument(f"conv2d input must be CxHxW, got shape {x.shape}")
    if stride < 1:
        raise InvalidArgument("stride must be positive")
    w = params.weights
    o, c, kh, kw = w.shape
    if x.shape[0] != c:
        raise InvalidArgument(f"input has {x.shape[0]} channels, kernel expects {c}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    h, wd = x.shape[1:]
    if kh > h or kw > wd:
        raise InvalidArgument(f"kernel {kh}x{kw} larger than input {h}x{wd}")
    ho, wo = _conv_out_hw(h, wd, kh, kw, stride)
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (C, Ho, Wo, kh, kw) -> (C, kh, kw, Ho, Wo) -> (K, P)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * kh * kw, ho * wo)
    out = w.reshape(o, -1) @ cols
    out += params.biases[:, None]
    cache = ConvCache((c, h - 2 * padding, wd - 2 * padding), cols, stride, padding, (ho, wo))
    return out.reshape(o, ho, wo), cache


def conv2d(x: np.ndarray, params: LayerParams, stride: int = 1, padding: int = 0) -> np.ndarray:
    return conv2d_forward(x, params, stride, padding)[0]


def conv2d_backward(grad: np.ndarray, cache: ConvCache, params: LayerParams, need_input_grad=True):
    """Return (input_grad, weight_grad, bias_grad); input_grad is None when not requested."""
    w = params.weights
    o, c, kh, kw = w.shape
    ho, wo = cache.out_hw
    if grad.shape != (o, ho, wo):
        raise InvalidArgument(f"upstream gradient shape {grad.shape} != {(o, ho, wo)}")
    g = grad.reshape(o, ho * wo)
    dw = (g @ cache.cols.T).reshape(w.shape)
    db = g.sum(axis=1, dtype=np.float64).astype(grad.dtype)
    if not need_input_grad:
        return None, dw, db
    s, p = cache.stride, cache.padding
    dcols = (w.reshape(o, -1).T @ g).reshape(c, kh, kw, ho, wo)
    _, h, wd = cache.input_shape
    dx = _kernels.col2im(dcols, c, h + 2 * p, wd + 2 * p, kh, kw, s, ho, wo)
    if p:
        dx = dx[:, p:-p, p:-p]
    return dx, dw, db


# ---------------------------------------------------------------- maxpool


@dataclass
class PoolCache:
    input_shape: tuple
    argmax: np.ndarray  # flat input index of each output element


def maxpool2d_forward(x: np.ndarray, window=(2, 2), stride: int | None = None):
    """Max over windows; ties go to the lowest linear index.

    Returns ``(output, cache)``; ``cache.argmax`` holds flat input indices.
    """
    if x.ndim != 3:
        raise InvalidArgument(f"maxpool input must be CxHxW, got shape {x.shape}")
    kh, kw = window
    stride = kh if stride is None else stride
    c, h, w = x.shape
    if kh > h or kw > w:
        raise InvalidArgument(f"window {kh}x{kw} larger than input {h}x{w}")
    ho, wo = _conv_out_hw(h, w, kh, kw, stride)
    if kh == 1 and kw == 1 and stride == 1:
        idx = np.arange(x.size).reshape(x.shape)
        return x.copy(), PoolCache(x.shape, idx)
    out, idx = _kernels.maxpool_fwd(np.ascontiguousarray(x), kh, kw, stride, ho, wo)
    return out, PoolCache(x.shape, idx)


def maxpool2d(x: np.ndarray, window=(2, 2), stride: int | None = None):
    out, cache = maxpool2d_forward(x, window, stride)
    return out, cache.argmax


def maxpool2d_backward(grad: np.ndarray, cache: PoolCache) -> np.ndarray:
    size = int(np.prod(cache.input_shape))
    dx = _kernels.scatter_add(cache.argmax, np.ascontiguousarray(grad), size)
    return dx.reshape(cache.input_shape)


# ---------------------------------------------------------------- dense


def dense_forward(x: np.ndarray, params: LayerParams):
    w = params.weights
    if x.ndim != 1 or x.shape[0] != w.shape[1]:
        raise InvalidArgument(f"dense expects input of length {w.shape[1]}, got shape {x.shape}")
    return w @ x + params.biases, x


def dense(x: np.ndarray, params: LayerParams) -> np.ndarray:
    return dense_forward(x, params)[0]


def dense_backward(grad: np.ndarray, x: np.ndarray, params: LayerParams, need_input_grad=True):
    dw = np.outer(grad, x)
    db = grad.copy()
    dx = params.weights.T @ grad if need_input_grad else None
    return dx, dw, db


# ---------------------------------------------------------------- ELU (alpha = 1)


def elu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_backward(grad: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad * np.where(x > 0, 1, np.exp(np.minimum(x, 0))).astype(grad.dtype)


# ---------------------------------------------------------------- dropout


def dropout(x: np.ndarray, rate: float, mode: str = "train", rng: np.random.Generator | None = None):
    """Inverted dropout. Returns ``(output, mask)``; mask is None when identity.

    The mask already carries the 1/(1-rate) survivor scale.
    """
    if not 0.0 <= rate < 1.0:
        raise InvalidArgument(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise InvalidArgument(f"unknown mode {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x, None
    if rng is None:
        raise InvalidArgument("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - rate))
    return x * mask, mask


def dropout_backward(grad: np.ndarray, mask: np.ndarray | None) -> np.ndarray:
    return grad if mask is None else grad * mask


# ---------------------------------------------------------------- ADAM


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr: float = 5e-5, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected ADAM update, applied in place to ``params`` and ``state``."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise InvalidArgument(
            f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1) or eps <= 0:
        raise InvalidArgument("need 0 <= beta1, beta2 < 1 and eps > 0")
    state.t += 1
    state.m *= beta1
    state.m += (1 - beta1) * grads
    state.v *= beta2
    state.v += (1 - beta2) * np.square(grads)
    mhat = state.m / (1 - beta1 ** state.t)
    vhat = state.v / (1 - beta2 ** state.t)
    params -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(params.dtype)
    return params
