"""Active shape model: contour resampling, PCA shape model, profile-search
fitting, main-axis estimation and oriented region extraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument
from .imaging import sample_bilinear

N_POINTS = 80
REGION_SHAPE = (128, 256)


def resample_contour(points, n: int = N_POINTS) -> np.ndarray:
    """``n`` points equally spaced by arc length along the open polyline."""
    p = np.asarray(points, dtype=np.float64)
    if p.ndim != 2 or p.shape[1] != 2 or len(p) < 3:
        raise InvalidArgument("need at least 3 two-dimensional points")
    seg = np.hypot(*np.diff(p, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        raise InvalidArgument("polyline has zero length")
    keep = np.concatenate([[True], seg > 0])
    p, s = p[keep], s[keep]
    t = np.linspace(0.0, s[-1], n)
    return np.column_stack([np.interp(t, s, p[:, 0]), np.interp(t, s, p[:, 1])])


# ---------------------------------------------------------------- similarity algebra
# Shapes are handled as complex vectors z = x + iy; a similarity transform is
# z -> a z + b with complex a (scale and rotation).


def _cplx(c):
    c = np.asarray(c, dtype=np.float64)
    return c[:, 0] + 1j * c[:, 1]


def _real(z):
    return np.column_stack([z.real, z.imag])


def _fit_similarity(src, dst):
    """Least-squares a, b with a*src + b ~ dst."""
    ms, md = src.mean(), dst.mean()
    s0, d0 = src - ms, dst - md
    den = np.vdot(s0, s0).real
    a = np.vdot(s0, d0) / den if den > 0 else 1.0 + 0j
    return a, md - a * ms


@dataclass
class ShapeModel:
    """Mean shape (centred, unit norm) and orthonormal variation modes.

    Vectors are interleaved (x1, y1, x2, y2, ...). ``ref_scale`` and
    ``ref_center`` give the mean training pose as a complex scale/rotation
    and a complex centre.
    """

    mean: np.ndarray          # (80, 2)
    modes: np.ndarray         # (k, 160), rows orthonormal
    eigenvalues: np.ndarray   # (k,), descending
    explained: np.ndarray     # cumulative explained-variance fraction per mode count
    ref_scale: complex = 1.0 + 0j
    ref_center: complex = 0j
    alignment: str = "procrustes-tangent"

    @property
    def n_modes(self) -> int:
        return len(self.eigenvalues)

    def instance(self, b=None) -> np.ndarray:
        x = self.mean.reshape(-1).copy()
        if b is not None:
            x += self.modes.T @ b
        return x.reshape(-1, 2)

    def placed(self, center=None, a=None, b=None) -> np.ndarray:
        """Model instance in image coordinates at pose (a, center)."""
        z = _cplx(self.instance(b))
        a = self.ref_scale if a is None else a
        c = self.ref_center if center is None else complex(center[0], center[1])
        return _real(a * z + c)

    def to_frame(self, contour) -> np.ndarray:
        """Similarity-align an image-space contour to the mean and project it
        into the tangent space; returns the 160-vector."""
        a, c = _fit_similarity(_cplx(contour), _cplx(self.mean))
        yv = _real(a * _cplx(contour) + c).reshape(-1)
        dot = yv @ self.mean.reshape(-1)
        return yv / dot if dot > 0 else yv

    def project(self, target: np.ndarray, clip: float = 3.0):
        """Closest plausible model instance to an image-space contour.

        Returns (contour, b, a, centre). Mode coefficients are clipped to
        +-clip * sqrt(eigenvalue).
        """
        y = _cplx(target)
        b = np.zeros(self.n_modes)
        for _ in range(3):
            x = _cplx(self.instance(b))
            a, c = _fit_similarity(x, y)
            yz = (y - c) / a
            yv = _real(yz).reshape(-1)
            dot = yv @ self.mean.reshape(-1)
            if dot > 0:
                yv = yv / dot  # tangent-space projection
            b = self.modes @ (yv - self.mean.reshape(-1))
            lim = clip * np.sqrt(np.maximum(self.eigenvalues, 0.0))
            b = np.clip(b, -lim, lim)
        x = _cplx(self.instance(b))
        a, c = _fit_similarity(x, y)
        return _real(a * x + c), b, a, c


def align_shapes(contours, max_iter: int = 100, tol: float = 1e-12):
    """Generalized Procrustes alignment with tangent-space projection.

    Returns (aligned (N, 80, 2) in the mean frame, mean (80, 2), poses list of (a, b)
    that map each aligned shape back to its input).
    """
    zs = [_cplx(c) for c in contours]
    zc = [z - z.mean() for z in zs]
    ref = zc[0] / max(np.linalg.norm(zc[0]), 1e-300)
    mean = ref.copy()
    aligned = zc
    for _ in range(max_iter):
        aligned = []
        for z in zc:
            a, _ = _fit_similarity(z, mean)
            w = a * z
            dot = np.vdot(mean, w).real
            aligned.append(w / dot if dot > 0 else w)
        new = np.mean(aligned, axis=0)
        a, _ = _fit_similarity(new, ref)
        new = a * new
        new /= max(np.linalg.norm(new), 1e-300)
        done = np.linalg.norm(new - mean) < tol
        mean = new
        if done:
            break
    poses = [_fit_similarity(al, z) for al, z in zip(aligned, zs)]
    return np.array([_real(a) for a in aligned]), _real(mean), poses


def build_shape_model(contours, n_modes: int = 10) -> ShapeModel:
    contours = [np.asarray(c, dtype=np.float64) for c in contours]
    if len(contours) <= n_modes:
        raise InvalidArgument(f"need more than {n_modes} contours, got {len(contours)}")
    aligned, mean, poses = align_shapes(contours)
    X = aligned.reshape(len(aligned), -1)
    mu = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mu, full_matrices=True)
    ev = np.zeros(vt.shape[0])
    ev[:len(s)] = s ** 2 / (len(X) - 1)
    total = ev.sum()
    kept = ev[:n_modes]
    explained = np.cumsum(kept) / total if total > 0 else np.ones(n_modes)
    a = np.mean([p[0] for p in poses])
    c = np.mean([p[1] for p in poses])
    return ShapeModel(mu.reshape(-1, 2), vt[:n_modes].copy(), kept, explained, complex(a), complex(c))


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    contour: np.ndarray
    iterations: int
    converged: bool
    no_edge: bool = False
    max_step: float = 0.0   # largest single-iteration point movement


def _normals(p: np.ndarray) -> np.ndarray:
    t = np.empty_like(p)
    t[1:-1] = p[2:] - p[:-2]
    t[0] = p[1] - p[0]
    t[-1] = p[-1] - p[-2]
    n = np.column_stack([-t[:, 1], t[:, 0]])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


class EdgeImage:
    """Smoothed intensity gradients of one image, sampled along profiles."""

    def __init__(self, image, sigma: float = 2.0):
        img = np.asarray(image, dtype=np.float64)
        sm = ndimage.gaussian_filter(img, sigma) if sigma > 0 else img
        self.gy, self.gx = np.gradient(sm)
        self.flat = not np.any(np.abs(self.gx) > 1e-9) and not np.any(np.abs(self.gy) > 1e-9)

    def best_offsets(self, pts: np.ndarray, rng: int):
        """Offset along each normal (|offset| <= rng) with the strongest edge."""
        n = _normals(pts)
        k = np.arange(-rng, rng + 1, dtype=np.float64)
        xs = pts[:, 0, None] + k[None, :] * n[:, 0, None]
        ys = pts[:, 1, None] + k[None, :] * n[:, 1, None]
        g = np.abs(sample_bilinear(self.gx, xs, ys) * n[:, 0, None]
                   + sample_bilinear(self.gy, xs, ys) * n[:, 1, None])
        best = g.argmax(axis=1)
        off = k[best]
        # parabolic refinement of the peak
        rows = np.arange(len(pts))
        inner = (best > 0) & (best < len(k) - 1)
        lo = g[rows[inner], best[inner] - 1]
        mid = g[rows[inner], best[inner]]
        hi = g[rows[inner], best[inner] + 1]
        den = lo - 2 * mid + hi
        frac = np.where(den < 0, 0.5 * (lo - hi) / np.where(den < 0, den, -1.0), 0.0)
        off[inner] += np.clip(frac, -0.5, 0.5)
        off = np.clip(off, -rng, rng)
        off[g.max(axis=1) <= 1e-9] = 0.0
        return off, n


def fit_asm(image, model: ShapeModel, init="center", coarse_range: int = 30, fine_range: int = 10,
            max_iter: int = 50, tol: float = 0.5, sigma: float = 2.0,
            edges: EdgeImage | None = None) -> FitResult:
    """Two-pass profile search (coarse, then fine range) constrained by the model.

    ``init`` is an image-space contour, ``"center"`` (mean shape at the image
    centre, mean training scale) or ``"pose"`` (mean shape at the mean
    training pose).
    """
    img = np.asarray(image)
    if isinstance(init, str):
        if init == "center":
            h, w = img.shape
            cur = model.placed(center=((w - 1) / 2, (h - 1) / 2))
        elif init == "pose":
            cur = model.placed()
        else:
            raise InvalidArgument(f"unknown init {init!r}")
    else:
        cur = np.asarray(init, dtype=np.float64).copy()
        if cur.shape != model.mean.shape:
            raise InvalidArgument(f"init contour must have shape {model.mean.shape}")
    start = cur.copy()
    edges = edges or EdgeImage(img, sigma)
    if edges.flat:
        return FitResult(start, 0, False, no_edge=True)
    total = 0
    converged = False
    max_step = 0.0
    for rng_ in (coarse_range, fine_range):
        converged = False
        for _ in range(max_iter):
            off, n = edges.best_offsets(cur, rng_)
            target = cur + off[:, None] * n
            new, *_ = model.project(target)
            move = np.linalg.norm(new - cur, axis=1)
            if move.max() > rng_:
                new = cur + (new - cur) * (rng_ / move.max())
                move = move * (rng_ / move.max())
            cur = new
            total += 1
            max_step = max(max_step, float(move.max()))
            if move.max() < tol:
                converged = True
                break
    return FitResult(cur, total, converged, max_step=max_step)


# ---------------------------------------------------------------- axis and region


def main_axis(contours):
    """Total-least-squares line through the trial-averaged contour.

    Returns (unit axis with non-negative x, centroid).
    """
    cs = np.asarray(contours, dtype=np.float64)
    if cs.ndim == 2:
        cs = cs[None]
    if len(cs) < 1:
        raise InvalidArgument("need at least one contour")
    mean = cs.mean(axis=0)
    c = mean.mean(axis=0)
    d = mean - c
    if np.allclose(d, 0):
        raise InvalidArgument("contour points are degenerate (no spread)")
    _, _, vt = np.linalg.svd(d, full_matrices=False)
    axis = vt[0]
    if axis[0] < 0 or (axis[0] == 0 and axis[1] < 0):
        axis = -axis
    return axis / np.linalg.norm(axis), c


@dataclass(frozen=True)
class RegionSpec:
    center: tuple
    axis: tuple
    size: tuple = REGION_SHAPE  # (rows across the axis, columns along it)

    def __post_init__(self):
        if abs(np.hypot(*self.axis) - 1.0) > 1e-6:
            raise InvalidArgument("region axis must be a unit vector")

    def sample_coords(self):
        rows, cols = self.size
        ax = np.asarray(self.axis, dtype=np.float64)
        nm = np.array([-ax[1], ax[0]])
        i, j = np.mgrid[0:rows, 0:cols].astype(np.float64)
        i -= rows // 2
        j -= cols // 2
        xs = self.center[0] + j * ax[0] + i * nm[0]
        ys = self.center[1] + j * ax[1] + i * nm[1]
        return xs, ys


def extract_region(image, spec: RegionSpec) -> np.ndarray:
    """Bilinear 128 x 256 sample; rows run along the axis, zero outside the image."""
    xs, ys = spec.sample_coords()
    return sample_bilinear(image, xs, ys)
