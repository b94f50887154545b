"""In-plane resampling, clipped z-score standardization and slice resizing."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..conditioning import compute_label_distribution
from .types import SliceSample, VolumeSample

TARGET_SPACING = 1.37
SLICE_SIZE = 224
CLIP = 3.0
EPS = 1e-8


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def _interpolate(stack: np.ndarray, size: tuple[int, int], labels: bool) -> np.ndarray:
    """Resize a ``(n, H, W)`` stack; bilinear for images, nearest for labels."""
    if tuple(stack.shape[-2:]) == tuple(size):
        return stack.copy()
    t = torch.from_numpy(np.ascontiguousarray(stack, dtype=np.float32))[:, None]
    if labels:
        out = F.interpolate(t, size=size, mode="nearest-exact")
        return out[:, 0].numpy().round().astype(stack.dtype)
    out = F.interpolate(t, size=size, mode="bilinear", align_corners=False)
    return out[:, 0].numpy()


def resample_volume(v: VolumeSample, target_spacing: float = TARGET_SPACING) -> VolumeSample:
    """Resample in-plane to ``target_spacing`` mm/pixel; slice spacing is kept."""
    if target_spacing <= 0:
        raise ValueError("target spacing must be positive")
    h, w = v.image.shape[1:]
    size = (
        max(1, _round_half_up(h * v.in_plane_spacing[0] / target_spacing)),
        max(1, _round_half_up(w * v.in_plane_spacing[1] / target_spacing)),
    )
    return VolumeSample(
        subject_id=v.subject_id,
        phase=v.phase,
        image=_interpolate(v.image, size, labels=False),
        labels=_interpolate(v.labels, size, labels=True),
        in_plane_spacing=(float(target_spacing), float(target_spacing)),
        slice_spacing=v.slice_spacing,
    )


def standardize_intensity(v: VolumeSample, clip: float = CLIP) -> VolumeSample:
    """Per-volume z-score (population std), clamped to ``[-clip, clip]``."""
    x = v.image.astype(np.float64)
    if x.size == 0:
        raise ValueError("empty volume")
    mu, sigma = x.mean(), x.std()
    out = np.clip((x - mu) / max(sigma, EPS), -clip, clip).astype(np.float32)
    return VolumeSample(v.subject_id, v.phase, out, v.labels, v.in_plane_spacing, v.slice_spacing)


def resize_slice(slice_, out_h: int = SLICE_SIZE, out_w: int = SLICE_SIZE, labels: bool = False) -> np.ndarray:
    slice_ = np.asarray(slice_)
    if slice_.ndim != 2 or slice_.size == 0:
        raise ValueError("expected a nonempty 2D array")
    return _interpolate(slice_[None], (out_h, out_w), labels=labels)[0]


def extract_slices(v: VolumeSample, size: int = SLICE_SIZE, z_scope: str = "slice") -> list[SliceSample]:
    """Cut a preprocessed volume into resized 2D samples with their ``z``.

    ``z_scope="volume"`` gives every slice the distribution of the whole
    resized volume instead of its own mask.
    """
    images = [resize_slice(s, size, size).astype(np.float32) for s in v.image]
    labels = [resize_slice(s, size, size, labels=True).astype(np.uint8) for s in v.labels]
    if z_scope == "volume":
        z_all = compute_label_distribution(np.stack(labels))
    elif z_scope != "slice":
        raise ValueError(f"unknown z scope {z_scope!r}")
    out = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        z = z_all if z_scope == "volume" else compute_label_distribution(lab)
        # bilinear output never leaves the input range, so the clip bound holds
        out.append(SliceSample(v.subject_id, v.phase, i, img, lab, z))
    return out


def preprocess_volume(v: VolumeSample, target_spacing=TARGET_SPACING, size=SLICE_SIZE, z_scope="slice"):
    return extract_slices(standardize_intensity(resample_volume(v, target_spacing)), size, z_scope)
