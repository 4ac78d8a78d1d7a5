"""In-memory containers passed between segmentation, augmentation and training."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np


@dataclass
class SamplePair:
    """One training/evaluation unit.

    ``gm`` and ``so`` are (2, 128, 256) stacks of (reference, test) regions;
    labels are 4-vectors (emg_gm mV, emg_so mV, moment Nm, angle deg) and the
    difference label is test minus reference.
    """

    participant: str
    trial: str
    ref_index: int
    test_index: int
    gm: np.ndarray
    so: np.ndarray
    ref_label: np.ndarray
    diff_label: np.ndarray

    def swapped(self) -> "SamplePair":
        return replace(
            self,
            ref_index=self.test_index,
            test_index=self.ref_index,
            gm=self.gm[::-1],
            so=self.so[::-1],
            ref_label=self.ref_label + self.diff_label,
            diff_label=-self.diff_label,
        )


@dataclass
class Trial:
    """Extracted regions and labels of one trial.

    ``gm`` / ``so`` are (N, 128, 256) region stacks (uint8 or float);
    ``labels`` is (N, 4); ``frames`` holds the original frame numbers.
    """

    participant: str
    name: str
    gm: np.ndarray
    so: np.ndarray
    labels: np.ndarray
    frames: np.ndarray | None = None

    def __post_init__(self):
        if self.frames is None:
            self.frames = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)


@dataclass
class Dataset:
    trials: dict = field(default_factory=dict)  # participant -> list[Trial]

    def add(self, trial: Trial):
        self.trials.setdefault(trial.participant, []).append(trial)

    @property
    def participants(self) -> list[str]:
        return sorted(self.trials)

    def of(self, participant: str) -> list[Trial]:
        return self.trials[participant]
