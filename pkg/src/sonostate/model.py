"""Dual-branch CNN with one shared trunk and a mask-gated linear head.

Each muscle (GM, SO) feeds a 2-channel (reference, test) region through the
same trunk parameters. The two FC feature vectors are concatenated, GM first,
and a 4-unit linear head maps them to (EMG-GM, EMG-SO, moment, angle). The
binary gating mask keeps each EMG output wired to its own muscle only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import InvalidArgument, InvalidState

SIGNALS = ("emg_gm", "emg_so", "moment", "angle")
INPUT_SHAPE = (2, 128, 256)


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: tuple = (3, 3)
    stride: int = 1
    padding: int = 0
    pool: tuple = (2, 2)
    pool_stride: int = 2


@dataclass(frozen=True)
class NetworkSpec:
    """Trunk layout, FC width and one dropout rate per trunk block plus FC."""

    blocks: tuple = (
        ConvBlock(16, (5, 5)),
        ConvBlock(32, (3, 3)),
        ConvBlock(48, (3, 3)),
        ConvBlock(64, (3, 3)),
    )
    fc_width: int = 256
    dropout: tuple = (0.05, 0.1, 0.15, 0.2, 0.4)
    input_shape: tuple = INPUT_SHAPE

    def validate(self) -> list[tuple]:
        """Check chaining and return the activation shape after each block."""
        if tuple(self.input_shape) != INPUT_SHAPE:
            raise InvalidArgument(f"trunk input must be {INPUT_SHAPE}, got {self.input_shape}")
        if len(self.dropout) != len(self.blocks) + 1:
            raise InvalidArgument("need one dropout rate per block plus one for FC")
        if any(b < a for a, b in zip(self.dropout, self.dropout[1:])):
            raise InvalidArgument("dropout rates must be non-decreasing toward the output")
        if any(not 0 <= r < 1 for r in self.dropout):
            raise InvalidArgument("dropout rates must lie in [0, 1)")
        if self.fc_width < 1 or not self.blocks:
            raise InvalidArgument("need at least one conv block and a positive FC width")
        c, h, w = self.input_shape
        shapes = []
        for i, b in enumerate(self.blocks):
            kh, kw = b.kernel
            h, w = h + 2 * b.padding, w + 2 * b.padding
            if kh > h or kw > w:
                raise InvalidArgument(f"block {i}: kernel {b.kernel} does not fit {h}x{w}")
            h, w = (h - kh) // b.stride + 1, (w - kw) // b.stride + 1
            ph, pw = b.pool
            if ph > h or pw > w:
                raise InvalidArgument(f"block {i}: pool {b.pool} does not fit {h}x{w}")
            h, w = (h - ph) // b.pool_stride + 1, (w - pw) // b.pool_stride + 1
            c = b.out_channels
            shapes.append((c, h, w))
        return shapes

    @property
    def feature_size(self) -> int:
        return int(np.prod(self.validate()[-1]))


def gating_mask(fc_width: int) -> np.ndarray:
    """4 x 2F binary mask; columns [0, F) come from GM, [F, 2F) from SO."""
    f = fc_width
    m = np.ones((4, 2 * f), dtype=np.float32)
    m[0, f:] = 0
    m[1, :f] = 0
    return m


@dataclass
class ModelParams:
    spec: NetworkSpec
    trunk: list  # LayerParams per conv block, shared by both branches
    fc: T.LayerParams
    head: T.LayerParams
    mask: np.ndarray
    label_std: np.ndarray | None = None

    def named_arrays(self) -> dict[str, np.ndarray]:
        """Every trainable array keyed by a stable name (views, not copies)."""
        out = {}
        for i, lp in enumerate(self.trunk):
            out[f"trunk.{i}.weights"] = lp.weights
            out[f"trunk.{i}.biases"] = lp.biases
        out["fc.weights"] = self.fc.weights
        out["fc.biases"] = self.fc.biases
        out["head.weights"] = self.head.weights
        out["head.biases"] = self.head.biases
        return out

    def astype(self, dtype) -> "ModelParams":
        std = None if self.label_std is None else self.label_std.copy()
        return ModelParams(self.spec, [lp.astype(dtype) for lp in self.trunk],
                           self.fc.astype(dtype), self.head.astype(dtype),
                           self.mask.astype(dtype), std)

    def copy(self) -> "ModelParams":
        return self.astype(self.fc.weights.dtype)

    @property
    def dtype(self):
        return self.fc.weights.dtype


def build_network(spec: NetworkSpec, rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    shapes = spec.validate()
    trunk = []
    c = spec.input_shape[0]
    for b in spec.blocks:
        trunk.append(T.init_layer("conv2d", (b.out_channels, c, *b.kernel), rng, dtype))
        c = b.out_channels
    fc = T.init_layer("dense", (spec.fc_width, int(np.prod(shapes[-1]))), rng, dtype)
    head = T.init_layer("dense", (4, 2 * spec.fc_width), rng, dtype)
    mask = gating_mask(spec.fc_width).astype(dtype)
    head.weights *= mask
    return ModelParams(spec, trunk, fc, head, mask)


# ---------------------------------------------------------------- forward


@dataclass
class BranchCache:
    convs: list = field(default_factory=list)
    pools: list = field(default_factory=list)
    pre_elu: list = field(default_factory=list)
    drops: list = field(default_factory=list)
    flat_shape: tuple = ()
    fc_in: np.ndarray | None = None
    fc_pre: np.ndarray | None = None
    fc_drop: np.ndarray | None = None


@dataclass
class ForwardCache:
    gm: BranchCache
    so: BranchCache
    features: np.ndarray


def _branch_forward(x, params: ModelParams, mode, rng, cache: BranchCache | None):
    spec = params.spec
    h = x
    for i, (b, lp) in enumerate(zip(spec.blocks, params.trunk)):
        h, cc = T.conv2d_forward(h, lp, b.stride, b.padding)
        # ELU is monotone, so pooling first gives the same values and argmax
        h, pc = T.maxpool2d_forward(h, b.pool, b.pool_stride)
        pre = h
        h = T.elu(h)
        h, mask = T.dropout(h, spec.dropout[i], mode, rng)
        if cache is not None:
            cache.convs.append(cc)
            cache.pools.append(pc)
            cache.pre_elu.append(pre)
            cache.drops.append(mask)
    flat = h.reshape(-1)
    pre, _ = T.dense_forward(flat, params.fc)
    f = T.elu(pre)
    f, mask = T.dropout(f, spec.dropout[-1], mode, rng)
    if cache is not None:
        cache.flat_shape = h.shape
        cache.fc_in = flat
        cache.fc_pre = pre
        cache.fc_drop = mask
    return f


def _check_input(x, params, name):
    if x.shape != tuple(params.spec.input_shape):
        raise InvalidArgument(f"{name} must have shape {params.spec.input_shape}, got {x.shape}")


def forward(gm_pair: np.ndarray, so_pair: np.ndarray, params: ModelParams,
            mode: str = "infer", rng: np.random.Generator | None = None):
    """Normalized 4-vector output; in train mode also returns the activation cache."""
    _check_input(gm_pair, params, "gm_pair")
    _check_input(so_pair, params, "so_pair")
    dt = params.dtype
    gm_pair = np.asarray(gm_pair, dtype=dt)
    so_pair = np.asarray(so_pair, dtype=dt)
    train = mode == "train"
    gm_cache = BranchCache() if train else None
    so_cache = BranchCache() if train else None
    f_gm = _branch_forward(gm_pair, params, mode, rng, gm_cache)
    f_so = _branch_forward(so_pair, params, mode, rng, so_cache)
    feats = np.concatenate([f_gm, f_so])
    out = params.head.weights @ feats + params.head.biases
    if train:
        return out, ForwardCache(gm_cache, so_cache, feats)
    return out


def loss_mae(output: np.ndarray, label: np.ndarray):
    """Mean absolute error over the 4 signals and its subgradient (sign(0) = 0)."""
    diff = np.asarray(output) - np.asarray(label)
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _branch_backward(g_feat, params: ModelParams, cache: BranchCache, grads: dict):
    spec = params.spec
    g = T.dropout_backward(g_feat, cache.fc_drop)
    g = T.elu_backward(g, cache.fc_pre)
    dx, dw, db = T.dense_backward(g, cache.fc_in, params.fc)
    grads["fc.weights"] += dw
    grads["fc.biases"] += db
    g = dx.reshape(cache.flat_shape)
    for i in reversed(range(len(spec.blocks))):
        g = T.dropout_backward(g, cache.drops[i])
        g = T.elu_backward(g, cache.pre_elu[i])
        g = T.maxpool2d_backward(g, cache.pools[i])
        dx, dw, db = T.conv2d_backward(g, cache.convs[i], params.trunk[i], need_input_grad=i > 0)
        grads[f"trunk.{i}.weights"] += dw
        grads[f"trunk.{i}.biases"] += db
        g = dx


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in params.named_arrays().items()}


def backward_gated(cache: ForwardCache | None, grad_out: np.ndarray, params: ModelParams,
                   grads: dict | None = None, branches=("gm", "so")) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients of a train-mode forward into ``grads``.

    Trunk and FC gradients are the sum of both branch contributions; head
    weight gradients are masked. ``branches`` restricts which branch
    contributions are added (used to inspect the shared-weight sum).
    """
    if cache is None:
        raise InvalidState("backward needs the cache of a train-mode forward")
    if grads is None:
        grads = zero_grads(params)
    grad_out = np.asarray(grad_out, dtype=params.dtype)
    grads["head.weights"] += np.outer(grad_out, cache.features) * params.mask
    grads["head.biases"] += grad_out
    g_feat = params.head.weights.T @ grad_out
    f = params.spec.fc_width
    if "gm" in branches:
        _branch_backward(g_feat[:f], params, cache.gm, grads)
    if "so" in branches:
        _branch_backward(g_feat[f:], params, cache.so, grads)
    return grads


def apply_mask(params: ModelParams) -> None:
    params.head.weights *= params.mask


def normalize_labels(diff: np.ndarray, params: ModelParams) -> np.ndarray:
    if params.label_std is None:
        raise InvalidState("model has no label normalization constants")
    return np.asarray(diff, dtype=np.float64) / params.label_std


def predict_denormalized(output: np.ndarray, params: ModelParams, reference: np.ndarray) -> np.ndarray:
    """Absolute state = reference label + output * per-signal std."""
    if params.label_std is None:
        raise InvalidState("model has no label normalization constants")
    return np.asarray(reference, dtype=np.float64) + np.asarray(output, dtype=np.float64) * params.label_std
