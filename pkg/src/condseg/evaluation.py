"""Volume Dice, aggregation and the paired t-test / Bonferroni protocol."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.special import betainc

from .networks import forward_volume

STRUCTURES = {"rv": 1, "myo": 2, "lv": 3}
NUM_COMPARISONS = 8
ALPHA = 0.05


@dataclass(frozen=True)
class DiceRecord:
    subject_id: str
    phase: str
    rv: float
    myo: float
    lv: float

    @property
    def mean_dice(self) -> float:
        return (self.rv + self.myo + self.lv) / 3.0


@dataclass(frozen=True)
class ComparisonResult:
    mechanism: str
    baseline: str
    t_statistic: float
    p_value: float
    num_comparisons: int
    corrected_alpha: float
    significant: bool


def dice_score(pred, gt, class_id: int) -> float:
    """``2|P & G| / (|P| + |G|)`` for one class; 1.0 when both are empty."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    p, g = pred == class_id, gt == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def dice_record(subject_id, phase, pred, gt) -> DiceRecord:
    return DiceRecord(subject_id, phase, **{k: dice_score(pred, gt, c) for k, c in STRUCTURES.items()})


def group_volumes(slices) -> dict[tuple[str, str], list]:
    volumes = defaultdict(list)
    for s in slices:
        volumes[s.key].append(s)
    return {k: sorted(v, key=lambda s: s.slice_index) for k, v in sorted(volumes.items())}


def evaluate_model(model, test_slices, batch_size=16) -> list[DiceRecord]:
    """One record per (subject, phase) volume found in ``test_slices``."""
    records = []
    for (subject, phase), slices in group_volumes(test_slices).items():
        pred = forward_volume(model, slices, batch_size)
        gt = np.stack([s.labels for s in slices])
        records.append(dice_record(subject, phase, pred, gt))
    return records


def aggregate(records) -> tuple[float, float]:
    """Mean and sample standard deviation of per-volume mean Dice."""
    values = np.array([r.mean_dice if isinstance(r, DiceRecord) else float(r) for r in records])
    if values.size == 0:
        raise ValueError("no records to aggregate")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return float(values.mean()), std


def student_t_sf2(t: float, df: int) -> float:
    """Two-sided tail probability ``P(|T| >= |t|)`` for Student's t."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_ttest(a, b) -> tuple[float, float]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length 1D, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("need at least two pairs")
    d = a - b
    mean, sd = d.mean(), d.std(ddof=1)
    if sd == 0:
        if mean == 0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    return float(t), student_t_sf2(t, n - 1)


def bonferroni_decide(p_value: float, family_size: int = NUM_COMPARISONS, alpha: float = ALPHA) -> dict:
    if not 0 <= p_value <= 1:
        raise ValueError("p-value must lie in [0, 1]")
    if family_size < 1:
        raise ValueError("family size must be >= 1")
    corrected = alpha / family_size
    return {
        "num_comparisons": family_size,
        "corrected_alpha": corrected,
        "significant": bool(p_value < corrected),
    }


def compare(mechanism, baseline, a, b, family_size=NUM_COMPARISONS, alpha=ALPHA) -> ComparisonResult:
    t, p = paired_ttest(a, b)
    return ComparisonResult(mechanism, baseline, t, p, **bonferroni_decide(p, family_size, alpha))


RECORD_FIELDS = ["subject_id", "phase", "rv", "myo", "lv", "mean_dice"]


def write_records(records, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(RECORD_FIELDS)
        for r in records:
            writer.writerow([r.subject_id, r.phase, repr(r.rv), repr(r.myo), repr(r.lv), repr(r.mean_dice)])


def read_records(path) -> list[DiceRecord]:
    with open(path, newline="") as f:
        return [
            DiceRecord(row["subject_id"], row["phase"], float(row["rv"]), float(row["myo"]), float(row["lv"]))
            for row in csv.DictReader(f)
        ]


def write_comparisons(results, path):
    results = list(results)
    fields = list(asdict(results[0])) if results else list(ComparisonResult.__dataclass_fields__)
    with open(Path(path), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for r in results:
            writer.writerow(asdict(r))
