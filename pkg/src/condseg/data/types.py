from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PHASES = ("ED", "ES")
LABEL_VALUES = (0, 1, 2, 3)


class CorruptLabelsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class VolumeSample:
    """One annotated 3D frame. Arrays are ``(slices, H, W)``."""

    subject_id: str
    phase: str
    image: np.ndarray
    labels: np.ndarray
    in_plane_spacing: tuple[float, float]
    slice_spacing: float

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.image.ndim != 3 or self.image.shape != self.labels.shape:
            raise ValueError(f"image {self.image.shape} and labels {self.labels.shape} must be equal 3D shapes")
        if min(self.in_plane_spacing) <= 0 or self.slice_spacing <= 0:
            raise ValueError("spacings must be positive")
        check_labels(self.labels)

    @property
    def key(self) -> tuple[str, str]:
        return self.subject_id, self.phase


def check_labels(labels: np.ndarray):
    bad = np.setdiff1d(np.unique(labels), LABEL_VALUES)
    if bad.size:
        raise CorruptLabelsError(f"label values outside {{0,1,2,3}}: {bad.tolist()}")


@dataclass(frozen=True, eq=False)
class SliceSample:
    subject_id: str
    phase: str
    slice_index: int
    image: np.ndarray  # (224, 224) float32, standardized
    labels: np.ndarray  # (224, 224) uint8
    z: np.ndarray  # (3,) float64

    @property
    def key(self) -> tuple[str, str]:
        return self.subject_id, self.phase


@dataclass(frozen=True)
class SplitPlan:
    repeat_index: int
    train_subjects: tuple[str, ...]
    val_subjects: tuple[str, ...]
    test_subjects: tuple[str, ...]
    fraction: float = 1.0
    effective_train_subjects: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.effective_train_subjects:
            object.__setattr__(self, "effective_train_subjects", self.train_subjects)
