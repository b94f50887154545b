"""Concentric-disc cardiac phantoms in the ACDC schema.

Each subject has a random heart scale and a random myocardial wall thickness
that is independent of cavity size. The myocardium is rendered with nearly the
background intensity, so after blurring and noise its outer border cannot be
read off the image; the conditioning vector carries that information.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .acdc import write_acdc_subject
from .types import VolumeSample

SIZE = 224
SPACING = 1.37


@dataclass(frozen=True)
class PhantomConfig:
    n_slices: int = 8
    size: int = SIZE
    scale_range: tuple[float, float] = (0.6, 1.4)
    lv_radius: float = 24.0
    wall_range: tuple[float, float] = (4.0, 14.0)
    rv_radius_range: tuple[float, float] = (16.0, 26.0)
    es_contraction: float = 0.72
    wall_jitter: float = 0.3
    intensity_background: float = 0.30
    intensity_myocardium: float = 0.31
    intensity_blood: float = 1.0
    intensity_rv: float = 0.85
    blur_sigma: float = 2.0
    noise_sigma: float = 0.12


def _subject_params(rng, cfg: PhantomConfig) -> dict:
    scale = rng.uniform(*cfg.scale_range)
    return {
        "scale": scale,
        "center": rng.uniform(-12, 12, size=2),
        "wall": rng.uniform(*cfg.wall_range) * scale,
        "rv_radius": rng.uniform(*cfg.rv_radius_range) * scale,
        "rv_angle": rng.uniform(0.75, 1.25) * np.pi,
        "es_frame": int(rng.integers(8, 16)),
    }


def render_slice(rng, p: dict, taper: float, phase: str, cfg: PhantomConfig):
    """Return ``(image, labels)`` for one short-axis slice."""
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    cy, cx = n / 2 + p["center"][0], n / 2 + p["center"][1]
    contraction = cfg.es_contraction if phase == "ES" else 1.0
    r_lv = cfg.lv_radius * p["scale"] * taper * contraction
    wall = p["wall"] * rng.uniform(1 - cfg.wall_jitter, 1 + cfg.wall_jitter)
    # wall thickens at end-systole
    r_epi = r_lv + wall * taper * (1.0 / np.sqrt(contraction))
    r_rv = p["rv_radius"] * taper * (0.85 if phase == "ES" else 1.0)
    d_rv = r_epi + 0.55 * r_rv
    ry, rx = cy + d_rv * np.sin(p["rv_angle"]), cx + d_rv * np.cos(p["rv_angle"])

    dist_lv = np.hypot(yy - cy, xx - cx)
    labels = np.zeros((n, n), np.uint8)
    labels[np.hypot(yy - ry, xx - rx) <= r_rv] = 1
    labels[dist_lv <= r_epi] = 2
    labels[dist_lv <= r_lv] = 3

    intensity = np.array(
        [cfg.intensity_background, cfg.intensity_rv, cfg.intensity_myocardium, cfg.intensity_blood]
    )
    image = intensity[labels]
    # low-frequency background texture
    texture = gaussian_filter(rng.normal(0, 1, (n, n)), 12)
    image = image + 0.8 * texture / (np.abs(texture).max() + 1e-12) * cfg.noise_sigma
    image = gaussian_filter(image, cfg.blur_sigma) + rng.normal(0, cfg.noise_sigma, (n, n))
    return image.astype(np.float32), labels


def generate_subject(subject_id: str, rng, cfg: PhantomConfig = PhantomConfig()):
    p = _subject_params(rng, cfg)
    tapers = np.linspace(1.0, 0.55, cfg.n_slices)
    volumes = []
    for phase in ("ED", "ES"):
        slices = [render_slice(rng, p, t, phase, cfg) for t in tapers]
        volumes.append(
            VolumeSample(
                subject_id=subject_id,
                phase=phase,
                image=np.stack([s[0] for s in slices]),
                labels=np.stack([s[1] for s in slices]),
                in_plane_spacing=(SPACING, SPACING),
                slice_spacing=10.0,
            )
        )
    return volumes, {"ED": 1, "ES": p["es_frame"]}


def generate_synthetic_dataset(n_subjects: int, seed: int, cfg: PhantomConfig = PhantomConfig()) -> list[VolumeSample]:
    """Return ``2 * n_subjects`` volumes (ED and ES), deterministic in ``seed``."""
    return [v for vols, _ in _generate(n_subjects, seed, cfg) for v in vols]


def _generate(n_subjects, seed, cfg):
    if n_subjects < 3:
        raise ValueError("need at least 3 subjects")
    for i in range(n_subjects):
        rng = np.random.default_rng([seed, i])
        yield generate_subject(f"patient{i + 1:03d}", rng, cfg)


def write_synthetic_dataset(root, n_subjects: int, seed: int, cfg: PhantomConfig = PhantomConfig()):
    """Persist a synthetic dataset in ACDC layout under ``root``."""
    dirs = []
    for volumes, frames in _generate(n_subjects, seed, cfg):
        dirs.append(write_acdc_subject(root, volumes, frames))
    return dirs
