"""Subject-level Monte-Carlo splits and nested training fractions."""

from __future__ import annotations

import numpy as np

from .types import SplitPlan

FRACTIONS = (1.0, 0.25, 0.06, 0.015)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_sizes(n: int, ratios=(0.70, 0.15, 0.15)) -> tuple[int, int, int]:
    n_val = max(1, _round_half_up(ratios[1] * n))
    n_test = max(1, _round_half_up(ratios[2] * n))
    return n - n_val - n_test, n_val, n_test


def make_splits(subject_ids, repeats: int = 3, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> list[SplitPlan]:
    """Independent seeded shuffles, each cut into train/val/test by subject."""
    ids = sorted(set(subject_ids))
    if len(ids) < 3:
        raise ValueError(f"need at least 3 subjects, got {len(ids)}")
    n_train, n_val, _ = split_sizes(len(ids), ratios)
    if n_train < 1:
        raise ValueError(f"{len(ids)} subjects leave no training subject")
    plans = []
    for r in range(repeats):
        rng = np.random.default_rng([seed, r])
        order = [ids[i] for i in rng.permutation(len(ids))]
        plans.append(
            SplitPlan(
                repeat_index=r,
                train_subjects=tuple(order[:n_train]),
                val_subjects=tuple(order[n_train:n_train + n_val]),
                test_subjects=tuple(order[n_train + n_val:]),
            )
        )
    return plans


def subsample_training(plan: SplitPlan, fraction: float, seed: int = 0) -> SplitPlan:
    """Keep the first ``max(1, round(fraction * n))`` of a seeded shuffle.

    The shuffle depends only on the seed and the plan, so smaller fractions are
    prefixes of larger ones.
    """
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    train = plan.train_subjects
    k = max(1, _round_half_up(fraction * len(train)))
    rng = np.random.default_rng([seed, plan.repeat_index, 1])
    order = [train[i] for i in rng.permutation(len(train))]
    return SplitPlan(
        plan.repeat_index, plan.train_subjects, plan.val_subjects, plan.test_subjects,
        fraction=fraction, effective_train_subjects=tuple(order[:k]),
    )
