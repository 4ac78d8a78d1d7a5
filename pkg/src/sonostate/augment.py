"""Online input conditioning: local contrast normalization and paired rigid jitter.

Each muscle gets its own rotation/translation draw, and that draw is applied
to both its reference and test image so the pair stays registered.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import SamplePair
from . import _kernels
from .errors import InvalidArgument
from .imaging import box_sum, rotation_matrix

LCN_EPS = 1e-5


@dataclass(frozen=True)
class AugmentConfig:
    lcn_window: int = 31
    rot_range: float = 5.0
    trans_range: float = 10.0
    train_rigid: bool = True

    def __post_init__(self):
        if self.lcn_window < 3 or self.lcn_window % 2 == 0:
            raise InvalidArgument(f"lcn_window must be odd and >= 3, got {self.lcn_window}")
        if self.rot_range < 0 or self.trans_range < 0:
            raise InvalidArgument("augmentation ranges must be non-negative")


@dataclass(frozen=True)
class RigidParams:
    rotation: float = 0.0
    dx: float = 0.0
    dy: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self.rotation == 0 and self.dx == 0 and self.dy == 0


def lcn(image: np.ndarray, window: int = 31) -> np.ndarray:
    """(x - local mean) / (local std + 1e-5) over a square window.

    Windows are clipped at the image border, so statistics near an edge only
    use in-image pixels.
    """
    if window % 2 == 0 or window < 1:
        raise InvalidArgument(f"LCN window must be odd, got {window}")
    img = np.asarray(image, dtype=np.float64)
    r = window // 2
    s1, n = box_sum(img, r)
    s2, _ = box_sum(img * img, r)
    mean = s1 / n
    var = np.maximum(s2 / n - mean * mean, 0.0)
    return (img - mean) / (np.sqrt(var) + LCN_EPS)


def sample_rigid(rng: np.random.Generator, config: AugmentConfig) -> RigidParams:
    rot = rng.uniform(-config.rot_range, config.rot_range)
    dx, dy = rng.uniform(-config.trans_range, config.trans_range, size=2)
    return RigidParams(float(rot), float(dx), float(dy))


def rigid_source_coords(shape, params: RigidParams):
    """Source (x, y) for every output pixel: inverse of rotate-about-centre then translate."""
    h, w = shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ox = xs - cx - params.dx
    oy = ys - cy - params.dy
    rinv = rotation_matrix(params.rotation).T
    sx = rinv[0, 0] * ox + rinv[0, 1] * oy + cx
    sy = rinv[1, 0] * ox + rinv[1, 1] * oy + cy
    return sx, sy


def apply_rigid(image: np.ndarray, params: RigidParams) -> np.ndarray:
    """Rotate about the image centre, then translate; zeros fill uncovered pixels."""
    img = np.asarray(image, dtype=np.float64)
    if params.is_identity:
        return img.copy()
    h, w = img.shape
    rinv = np.ascontiguousarray(rotation_matrix(params.rotation).T)
    return _kernels.rigid_warp(np.ascontiguousarray(img), rinv, (w - 1) / 2.0, (h - 1) / 2.0,
                               float(params.dx), float(params.dy))


def augment_conditioned(gm: np.ndarray, so: np.ndarray, config: AugmentConfig,
                        rng: np.random.Generator | None, phase: str = "eval"):
    """Rigid stage only, for (2, H, W) stacks that are already LCN-normalized."""
    if phase not in ("train", "eval"):
        raise InvalidArgument(f"unknown phase {phase!r}")
    out = []
    for stack in (gm, so):
        if phase == "train" and config.train_rigid:
            p = sample_rigid(rng, config)
            stack = [apply_rigid(im, p) for im in stack]
        out.append(np.asarray(np.stack(stack), dtype=np.float32))
    return out[0], out[1]


def augment_sample(sample: SamplePair, config: AugmentConfig, rng: np.random.Generator | None,
                   phase: str = "eval") -> SamplePair:
    """LCN on all four images; in the train phase one rigid draw per muscle."""
    if phase not in ("train", "eval"):
        raise InvalidArgument(f"unknown phase {phase!r}")
    gm = [lcn(im, config.lcn_window) for im in sample.gm]
    so = [lcn(im, config.lcn_window) for im in sample.so]
    gm, so = augment_conditioned(gm, so, config, rng, phase)
    return replace(sample, gm=gm, so=so)
