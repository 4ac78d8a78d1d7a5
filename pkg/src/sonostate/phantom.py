"""Synthetic ultrasound-like forward model with known deformation.

Two pennate muscle bands (GM above SO) sit between three bright aponeuroses.
Scatterers are placed once per participant in a reference configuration.
A frame is rendered by pushing every scatterer through a smooth, invertible
deformation driven by per-muscle activity and joint angle, splatting the
result through an anisotropic Gaussian PSF, applying a fixed multiplicative
speckle field and log-compressing to 8-bit range.

Deformation, in band coordinates (u along the bands, v across, v downward):

* activity of a band shears it so that its fascicles steepen (pennation
  grows in magnitude), shortens it along u in its middle and thickens it,
  pushing deeper tissue down;
* joint angle lengthens everything uniformly along u (plantarflexion
  positive), leaving fascicle shear to activity alone.

Each term uses C1 smoothstep ramps across the band, so the field is C1 and,
because v' depends on v only and u' is affine in u with positive slope,
invertible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import InvalidArgument
from .protocol import LabelConfig

REF_HEIGHT, REF_WIDTH = 480, 640


@dataclass
class PhantomParams:
    seed: int
    height: int
    width: int
    tilt: float               # band direction, degrees
    apo: np.ndarray           # v of superficial, middle and deep aponeurosis (px)
    extent: tuple             # (u_min, u_max) of the annotated outline
    gains: dict
    points: np.ndarray        # (M, 2) reference scatterer positions (x, y)
    amps: np.ndarray          # (M,)
    speckle: np.ndarray       # (H, W) multiplicative field, mean ~1
    psf: tuple                # gaussian sigma (rows, cols)
    level: float              # compression reference intensity
    angle_range: tuple = (-20.0, 20.0)

    @property
    def center(self):
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])

    def to_band(self, xy):
        a = np.deg2rad(self.tilt)
        d = np.asarray(xy, dtype=np.float64) - self.center
        u = d[..., 0] * np.cos(a) + d[..., 1] * np.sin(a)
        v = -d[..., 0] * np.sin(a) + d[..., 1] * np.cos(a)
        return u, v

    def from_band(self, u, v):
        a = np.deg2rad(self.tilt)
        x = u * np.cos(a) - v * np.sin(a)
        y = u * np.sin(a) + v * np.cos(a)
        return np.stack([x, y], axis=-1) + self.center


def _smoothstep(z):
    z = np.clip(z, 0.0, 1.0)
    return z * z * (3 - 2 * z)


DEFAULT_GAINS = dict(
    stretch=0.008,     # per degree, along u
    shear_gm=0.30, shear_so=0.30,   # relative aponeurosis slide per unit activity (x thickness)
    short_gm=0.03, short_so=0.03,   # mid-band shortening per unit activity
    thick_gm=0.08, thick_so=0.08,   # thickening per unit activity
    pennation_gm=20.0, pennation_so=-24.0,
)


def make_phantom(seed: int, height: int = REF_HEIGHT, width: int = REF_WIDTH,
                 vary: bool = True) -> PhantomParams:
    """One participant's tissue: geometry, gains and scatterers, all from ``seed``."""
    rng = np.random.default_rng([seed, 0x5050])
    s = height / REF_HEIGHT
    jit = (lambda lo, hi: rng.uniform(lo, hi)) if vary else (lambda lo, hi: (lo + hi) / 2)
    tilt = jit(-4.0, 4.0)
    apo = np.array([-170.0 + jit(-10, 10), -5.0 + jit(-10, 10), 165.0 + jit(-10, 10)]) * s
    gains = {k: v * (jit(0.9, 1.1) if not k.startswith("pennation") else 1.0)
             for k, v in DEFAULT_GAINS.items()}
    gains["pennation_gm"] = DEFAULT_GAINS["pennation_gm"] + jit(-4, 4)
    gains["pennation_so"] = DEFAULT_GAINS["pennation_so"] + jit(-4, 4)

    half_w = 0.5 * width / np.cos(np.deg2rad(tilt)) + 80 * s
    half_h = 0.5 * height + 80 * s
    pts, amps = [], []

    def add(u, v, a):
        pts.append(np.stack([u, v], axis=-1))
        amps.append(a)

    # diffuse background
    n_bg = int(25_000 * s * s * width / REF_WIDTH)
    add(rng.uniform(-half_w, half_w, n_bg), rng.uniform(-half_h, half_h, n_bg),
        rng.rayleigh(0.35, n_bg))
    # fascicles: rows of scatterers crossing each band at its pennation angle
    for (top, bot), pen in ((apo[0:2], gains["pennation_gm"]), (apo[1:3], gains["pennation_so"])):
        t = np.deg2rad(pen)
        length = (bot - top) / abs(np.sin(t))
        reach = length * abs(np.cos(t))
        spacing = 8.0 * s / abs(np.sin(t))
        for u0 in np.arange(-half_w - reach, half_w + reach, spacing):
            u0 = u0 + rng.uniform(-0.2, 0.2) * spacing
            k = np.arange(0.0, length, 1.4 * s)
            v = top + k * abs(np.sin(t))
            u = u0 + k * np.cos(t) * np.sign(t)
            keep = rng.random(k.size) < 0.8
            a = rng.rayleigh(0.9, k.size) * rng.uniform(0.5, 1.3)
            add(u[keep], v[keep], a[keep])
    # aponeuroses: bright sheets a few pixels thick
    for v0 in apo:
        n = int(6 * 2 * half_w / s)
        add(rng.uniform(-half_w, half_w, n), v0 + rng.normal(0, 2.0 * s, n),
            rng.rayleigh(2.5, n))
    uv = np.concatenate(pts)
    amp = np.concatenate(amps)

    z = rng.standard_normal((height, width)) + 1j * rng.standard_normal((height, width))
    spk = np.abs(gaussian_filter(z.real, 1.0) + 1j * gaussian_filter(z.imag, 1.0))
    spk = 0.6 + 0.4 * spk / spk.mean()

    ph = PhantomParams(seed, height, width, float(tilt), apo, (-0.42 * width, 0.42 * width), gains,
                       np.zeros((0, 2)), amp, spk, (1.0 * s, 1.8 * s), 1.0)
    ph.points = ph.from_band(uv[:, 0], uv[:, 1])
    raw = _splat(ph, ph.points)
    ph.level = float(np.percentile(raw, 99.5))
    return ph


def _bands(ph: PhantomParams):
    return ((ph.apo[0], ph.apo[1], "gm"), (ph.apo[1], ph.apo[2], "so"))


def _activity_pair(activity):
    a = np.broadcast_to(np.asarray(activity, dtype=np.float64), (2,))
    return float(a[0]), float(a[1])


def check_inputs(ph: PhantomParams, activity, angle):
    gm, so = _activity_pair(activity)
    if not (0 <= gm <= 1 and 0 <= so <= 1):
        raise InvalidArgument(f"activity must lie in [0, 1], got {(gm, so)}")
    lo, hi = ph.angle_range
    if not lo <= angle <= hi:
        raise InvalidArgument(f"angle {angle} outside phantom range {ph.angle_range}")
    return gm, so


def deform(ph: PhantomParams, xy: np.ndarray, activity, angle: float) -> np.ndarray:
    """Map reference-configuration points to their positions at (activity, angle)."""
    gm, so = check_inputs(ph, activity, angle)
    if gm == 0 and so == 0 and angle == 0:
        return np.array(xy, dtype=np.float64)
    acts = {"gm": gm, "so": so}
    g = ph.gains
    u, v = ph.to_band(xy)
    v_new = v.copy()
    scale = 1.0 + g["stretch"] * angle
    shift = np.zeros_like(u)
    for top, bot, m in _bands(ph):
        thick = bot - top
        ramp = _smoothstep((v - top) / thick)
        bump = 4 * ramp * (1 - ramp)
        scale = scale - g[f"short_{m}"] * acts[m] * bump
        steepen = -np.sign(g[f"pennation_{m}"])
        shift += thick * steepen * g[f"shear_{m}"] * acts[m] * (ramp - 0.5)
        v_new += g[f"thick_{m}"] * acts[m] * thick * ramp
    u_new = u * scale + shift
    return ph.from_band(u_new, v_new)


def _splat(ph: PhantomParams, xy: np.ndarray) -> np.ndarray:
    h, w = ph.height, ph.width
    x, y = xy[:, 0], xy[:, 1]
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx, fy = x - x0, y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    acc = np.zeros(h * w)
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            acc += np.bincount((yi * w + xi)[ok], weights=(ph.amps * wx * wy)[ok], minlength=h * w)
    return gaussian_filter(acc.reshape(h, w), ph.psf)


def render_frame(ph: PhantomParams, activity, angle: float) -> np.ndarray:
    """Float image in [0, 255]; ``activity`` is a scalar or a (GM, SO) pair."""
    pts = deform(ph, ph.points, activity, angle)
    env = _splat(ph, pts) * ph.speckle
    img = 255.0 * np.log1p(8.0 * env / ph.level) / np.log1p(8.0)
    return np.clip(img, 0.0, 255.0).astype(np.float32)


def outline(ph: PhantomParams, muscle: str, activity=0.0, angle: float = 0.0, n: int = 80) -> np.ndarray:
    """Ground-truth outline of one muscle: upper boundary left to right, then
    lower boundary right to left, resampled to ``n`` points."""
    from .asm import resample_contour

    idx = {"gm": 0, "so": 1}[muscle]
    top, bot = ph.apo[idx], ph.apo[idx + 1]
    u = np.linspace(ph.extent[0], ph.extent[1], 200)
    upper = ph.from_band(u, np.full_like(u, top))
    lower = ph.from_band(u[::-1], np.full_like(u, bot))
    poly = np.concatenate([upper, lower])
    return resample_contour(deform(ph, poly, activity, angle), n)


def participant_labels(seed: int, vary: bool = True) -> LabelConfig:
    rng = np.random.default_rng([seed, 0x1AB])
    if not vary:
        return LabelConfig()
    base = LabelConfig()
    return LabelConfig(
        emg_max_gm=base.emg_max_gm * rng.uniform(0.9, 1.1),
        emg_max_so=base.emg_max_so * rng.uniform(0.9, 1.1),
        so_coupling=base.so_coupling * rng.uniform(0.9, 1.1),
        neutral_angle=rng.uniform(0.5, 2.5),
        moment_baseline=base.moment_baseline * rng.uniform(0.8, 1.2),
        k_act=base.k_act * rng.uniform(0.9, 1.1),
        k_ang=base.k_ang * rng.uniform(0.9, 1.1),
    )
