"""Excitation signals, task schedules and ground-truth label series.

A trial is 10 s of neutral standing followed by the schedule proper. The
activity schedule switches base every 10 s and uses ``c`` on segments that
start at a multiple of 30 s; the rotation schedule does the same with 20 s and
60 s. After every ``c`` segment the a/b alternation restarts at ``a``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .errors import InvalidArgument

NEUTRAL_S = 10.0
FRAME_RATE = 25.0
TRIAL_S = 190.0
TASKS = ("combined", "isometric", "passive")


def base_signal(name: str, t):
    """The three periodic bases, evaluated at trial-relative time ``t`` (s)."""
    t = np.asarray(t, dtype=np.float64)
    if name == "a":
        return np.sin(0.4 * t * np.pi - np.pi / 2)
    if name == "b":
        return np.sin(0.5 * t * np.pi - np.pi / 2)
    if name == "c":
        return np.sin(np.sin(t * np.pi / 30 - np.pi / 2) * 30 * np.pi - np.pi / 2)
    raise InvalidArgument(f"unknown base signal {name!r}")


@dataclass(frozen=True)
class SignalSchedule:
    """Piecewise base assignment over one trial.

    ``segments`` are (start, end, base) in trial-relative seconds (after the
    neutral lead-in); intervals are left-closed.
    """

    kind: str
    duration: float
    segments: tuple
    neutral: float = NEUTRAL_S

    def base_at(self, t: float) -> str:
        tau = t - self.neutral
        if tau < 0:
            return "neutral"
        for start, end, base in self.segments:
            if start <= tau < end:
                return base
        return self.segments[-1][2] if self.segments else "neutral"

    def value(self, t) -> np.ndarray:
        """Schedule value at absolute trial time(s); neutral portions read 0."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        tau = t - self.neutral
        out = np.zeros_like(t)
        for start, end, base in self.segments:
            sel = (tau >= start) & (tau < end)
            if base != "neutral" and sel.any():
                out[sel] = base_signal(base, tau[sel])
        return out

    def is_neutral(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        tau = t - self.neutral
        neutral = tau < 0
        for start, end, base in self.segments:
            if base == "neutral":
                neutral |= (tau >= start) & (tau < end)
        return neutral


def _segments(length: float, c_every: float, span: float) -> tuple:
    segs = []
    k = 0
    parity = 0
    while k * length < span:
        start = k * length
        end = min(start + length, span)
        if start > 0 and start % c_every == 0:
            base = "c"
            parity = 0
        else:
            base = "ab"[parity % 2]
            parity += 1
        segs.append((start, end, base))
        k += 1
    return tuple(segs)


def build_schedules(task: str, duration: float = TRIAL_S):
    """(activity, rotation) schedules for a task of ``duration`` seconds."""
    if task not in TASKS:
        raise InvalidArgument(f"unknown task {task!r}; expected one of {TASKS}")
    if duration < NEUTRAL_S:
        raise InvalidArgument("duration must cover the 10 s neutral lead-in")
    span = duration - NEUTRAL_S
    act = _segments(10.0, 30.0, span)
    rot = _segments(20.0, 60.0, span)
    if task == "passive":
        act = ((0.0, span, "neutral"),)
    if task == "isometric":
        rot = ((0.0, span, "neutral"),)
    return SignalSchedule("activity", duration, act), SignalSchedule("rotation", duration, rot)


@dataclass(frozen=True)
class LabelConfig:
    """Mapping from schedule values to physical labels (one participant)."""

    emg_max_gm: float = 15.0   # mV at full activity
    emg_max_so: float = 15.0
    activity_floor: float = 0.15  # lowest tracked activity while following the target
    so_coupling: float = 0.8
    so_noise: float = 0.05
    angle_min: float = -9.0
    angle_max: float = 11.0
    neutral_angle: float = 1.5
    moment_baseline: float = 12.0
    k_act: float = 60.0    # Nm per unit mean activity
    k_ang: float = 1.2     # Nm per degree of plantarflexion
    emg_noise: float = 0.2     # mV, band-limited
    emg_floor: float = 0.005   # mV, resting noise floor
    moment_noise: float = 0.5
    angle_noise: float = 0.1
    noise_smooth_s: float = 0.2


@dataclass
class TrialLabels:
    """Per-frame labels plus the latent state the phantom is rendered from."""

    task: str
    sample_rate: float
    times: np.ndarray
    labels: np.ndarray      # (N, 4): emg_gm, emg_so, moment, angle
    activity: np.ndarray    # (N, 2): true GM / SO activity in [0, 1]
    angle: np.ndarray       # (N,) true joint angle, degrees

    def __len__(self):
        return len(self.times)


def _band_noise(rng, n, std, smooth_frames):
    if std == 0:
        return np.zeros(n)
    x = gaussian_filter1d(rng.standard_normal(n), smooth_frames, mode="wrap") if smooth_frames > 0 \
        else rng.standard_normal(n)
    s = x.std()
    return x * (std / s) if s > 0 else x


def compose_trial(task: str, config: LabelConfig, rng: np.random.Generator,
                  duration: float = TRIAL_S, rate: float = FRAME_RATE) -> TrialLabels:
    act_s, rot_s = build_schedules(task, duration)
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    sm = config.noise_smooth_s * rate

    resting = act_s.is_neutral(t)
    lo = config.activity_floor
    gm = np.where(resting, 0.0, lo + (1 - lo) * (act_s.value(t) + 1) / 2)
    so = config.so_coupling * gm + _band_noise(rng, n, config.so_noise, sm) * (~resting)
    so = np.clip(np.where(resting, 0.0, so), 0.0, 1.0)

    still = rot_s.is_neutral(t)
    mid = (config.angle_max + config.angle_min) / 2
    half = (config.angle_max - config.angle_min) / 2
    angle = config.neutral_angle + np.where(still, 0.0, mid + half * rot_s.value(t))

    moment = config.moment_baseline + config.k_act * (gm + so) / 2 - config.k_ang * angle

    floor = config.emg_floor * np.abs(_band_noise(rng, n, 1.0, sm))
    emg_gm = gm * config.emg_max_gm + floor
    emg_so = so * config.emg_max_so + config.emg_floor * np.abs(_band_noise(rng, n, 1.0, sm))
    emg_gm = np.abs(emg_gm + (gm > 0) * _band_noise(rng, n, config.emg_noise, sm))
    emg_so = np.abs(emg_so + (so > 0) * _band_noise(rng, n, config.emg_noise, sm))
    labels = np.column_stack([
        emg_gm,
        emg_so,
        moment + _band_noise(rng, n, config.moment_noise, sm),
        angle + _band_noise(rng, n, config.angle_noise, sm),
    ])
    return TrialLabels(task, rate, t, labels, np.column_stack([gm, so]), angle)
