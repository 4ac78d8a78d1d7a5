"""Synthetic cohort: phantom participants, rendered trials, ASM-derived regions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .asm import EdgeImage, RegionSpec, build_shape_model, extract_region, fit_asm, main_axis
from .data import Dataset, Trial
from .errors import InvalidArgument
from .phantom import PhantomParams, make_phantom, outline, participant_labels, render_frame
from .protocol import FRAME_RATE, TASKS, TRIAL_S, TrialLabels, compose_trial

MUSCLES = ("gm", "so")
ANNOTATION_SEED = 10_000   # phantom seeds reserved for shape-model annotations


def participant_id(k: int) -> str:
    return f"p{k:02d}"


def participant_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def trial_rng(seed: int, k: int, task: str) -> np.random.Generator:
    return np.random.default_rng([seed, k, TASKS.index(task)])


def simulate_labels(seed: int, k: int, task: str, duration: float = TRIAL_S,
                    rate: float = FRAME_RATE) -> TrialLabels:
    cfg = participant_labels(participant_seed(seed, k))
    return compose_trial(task, cfg, trial_rng(seed, k, task), duration, rate)


def frame_image(ph: PhantomParams, lab: TrialLabels, i: int) -> np.ndarray:
    """8-bit frame ``i`` of a trial (what the scanner would store)."""
    return np.rint(render_frame(ph, lab.activity[i], float(lab.angle[i]))).astype(np.uint8)


def annotation_contours(n_phantoms: int = 6, states: int = 6, seed: int = ANNOTATION_SEED,
                        height: int = 480, width: int = 640) -> dict:
    """Ground-truth outlines (muscle -> list of contours) of phantoms outside any cohort."""
    rng = np.random.default_rng(seed)
    contours = {m: [] for m in MUSCLES}
    for j in range(n_phantoms):
        ph = make_phantom(seed + j, height, width)
        for _ in range(states):
            act = rng.uniform(0, 1, 2)
            ang = rng.uniform(-9, 13)
            for m in MUSCLES:
                contours[m].append(outline(ph, m, act, ang))
    return contours


def annotation_models(n_phantoms: int = 6, states: int = 6, seed: int = ANNOTATION_SEED,
                      height: int = 480, width: int = 640) -> dict:
    contours = annotation_contours(n_phantoms, states, seed, height, width)
    return {m: build_shape_model(c) for m, c in contours.items()}


def trial_regions(frames, models: dict, seg_every: int = 25) -> dict:
    """Region spec per muscle: ASM fits on every ``seg_every``-th frame,
    main axis and centroid of the trial-averaged contour."""
    specs = {}
    sel = list(range(0, len(frames), max(1, seg_every)))
    for m in MUSCLES:
        fits = []
        for i in sel:
            r = fit_asm(frames[i], models[m], init="pose", edges=EdgeImage(frames[i]))
            fits.append(r.contour)
        axis, c = main_axis(fits)
        specs[m] = RegionSpec((float(c[0]), float(c[1])), (float(axis[0]), float(axis[1])))
    return specs


def regions_to_uint8(region: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(region), 0, 255).astype(np.uint8)


@dataclass
class CohortConfig:
    participants: int = 8
    tasks: tuple = TASKS
    seed: int = 0
    duration: float = TRIAL_S
    frame_stride: int = 1       # keep every n-th frame
    seg_every: int = 25         # ASM-fit every n-th kept frame for the region axis
    height: int = 480
    width: int = 640


def regions_for_frames(frames, models: dict, seg_every: int = 25):
    """(gm, so) uint8 region stacks of a trial's frames."""
    specs = trial_regions(frames, models, seg_every)
    return tuple(np.stack([regions_to_uint8(extract_region(f, specs[m])) for f in frames]) for m in MUSCLES)


def build_trial(cfg: CohortConfig, k: int, task: str, models: dict, ph: PhantomParams | None = None) -> Trial:
    ph = ph or make_phantom(participant_seed(cfg.seed, k), cfg.height, cfg.width)
    lab = simulate_labels(cfg.seed, k, task, cfg.duration)
    idx = np.arange(0, len(lab), cfg.frame_stride)
    frames = [frame_image(ph, lab, i) for i in idx]
    gm, so = regions_for_frames(frames, models, cfg.seg_every)
    return Trial(participant_id(k), task, gm, so, lab.labels[idx].copy(), idx)


def build_cohort(cfg: CohortConfig, models: dict | None = None, progress=None) -> Dataset:
    if cfg.participants < 1:
        raise InvalidArgument("need at least one participant")
    for t in cfg.tasks:
        if t not in TASKS:
            raise InvalidArgument(f"unknown task {t!r}")
    models = models or annotation_models(height=cfg.height, width=cfg.width)
    ds = Dataset()
    for k in range(cfg.participants):
        ph = make_phantom(participant_seed(cfg.seed, k), cfg.height, cfg.width)
        for task in cfg.tasks:
            ds.add(build_trial(cfg, k, task, models, ph))
            if progress is not None:
                progress(k, task)
    return ds
