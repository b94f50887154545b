"""Reading and writing the ACDC directory layout.

    patientXXX/Info.cfg                    "ED: 1", "ES: 12", ...
    patientXXX/patientXXX_frameTT.nii.gz
    patientXXX/patientXXX_frameTT_gt.nii.gz

NIfTI arrays are ``(X, Y, Z)``; in memory volumes are ``(Z, X, Y)``.
"""

from __future__ import annotations

import logging
from pathlib import Path

import nibabel as nib
import numpy as np

from .types import CorruptLabelsError, VolumeSample, check_labels

log = logging.getLogger(__name__)


class AnnotationMissingError(FileNotFoundError):
    pass


def read_info(path) -> dict[str, str]:
    info = {}
    for line in Path(path).read_text().splitlines():
        key, sep, value = line.partition(":")
        if sep:
            info[key.strip()] = value.strip()
    return info


def _frame_path(subject_dir: Path, frame: int, gt=False) -> Path:
    suffix = "_gt" if gt else ""
    return subject_dir / f"{subject_dir.name}_frame{frame:02d}{suffix}.nii.gz"


def load_acdc_subject(dir_path) -> list[VolumeSample]:
    """Load the ED and ES frames of one patient directory with their labels."""
    subject_dir = Path(dir_path)
    info = read_info(subject_dir / "Info.cfg")
    samples = []
    for phase in ("ED", "ES"):
        if phase not in info:
            raise ValueError(f"{subject_dir}/Info.cfg has no {phase} entry")
        frame = int(info[phase])
        img_path, gt_path = _frame_path(subject_dir, frame), _frame_path(subject_dir, frame, gt=True)
        if not gt_path.exists():
            raise AnnotationMissingError(f"missing annotation {gt_path}")
        img = nib.load(str(img_path))
        gt = nib.load(str(gt_path))
        labels = np.asarray(gt.dataobj)
        if not np.all(labels == np.round(labels)):
            raise CorruptLabelsError(f"{gt_path}: non-integer label values")
        labels = labels.astype(np.int64)
        check_labels(labels)
        zooms = img.header.get_zooms()[:3]
        samples.append(
            VolumeSample(
                subject_id=subject_dir.name,
                phase=phase,
                image=np.transpose(np.asarray(img.dataobj, dtype=np.float32), (2, 0, 1)),
                labels=np.transpose(labels, (2, 0, 1)).astype(np.uint8),
                in_plane_spacing=(float(zooms[0]), float(zooms[1])),
                slice_spacing=float(zooms[2]),
            )
        )
    return samples


def list_subjects(root) -> list[Path]:
    return sorted(p for p in Path(root).iterdir() if p.is_dir() and (p / "Info.cfg").exists())


def _save_nifti(array_zxy, spacing, path):
    data = np.transpose(array_zxy, (1, 2, 0))
    img = nib.Nifti1Image(data, np.diag([*spacing, 1.0]))
    img.header.set_zooms(spacing)
    nib.save(img, str(path))


def write_acdc_subject(root, volumes: list[VolumeSample], frames: dict[str, int]):
    """Persist ED/ES volumes of one subject in ACDC layout."""
    by_phase = {v.phase: v for v in volumes}
    subject_id = volumes[0].subject_id
    subject_dir = Path(root) / subject_id
    subject_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"ED: {frames['ED']}", f"ES: {frames['ES']}", f"NbFrame: {max(frames.values())}"]
    (subject_dir / "Info.cfg").write_text("\n".join(lines) + "\n")
    for phase, v in by_phase.items():
        spacing = (*v.in_plane_spacing, v.slice_spacing)
        _save_nifti(v.image.astype(np.float32), spacing, _frame_path(subject_dir, frames[phase]))
        _save_nifti(v.labels.astype(np.uint8), spacing, _frame_path(subject_dir, frames[phase], gt=True))
    return subject_dir
