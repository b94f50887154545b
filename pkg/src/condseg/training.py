"""Focal-loss training with Adam and early stopping on validation Dice."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .evaluation import aggregate, evaluate_model

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    focal_gamma: float = 0.5
    max_epochs: int = 500
    patience: int = 100
    batch_size: int = 16
    seed: int = 0
    monitor: str = "dice"  # "dice" (maximised) or "loss" (minimised)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 1 <= self.patience <= self.max_epochs:
            raise ValueError("patience must be in [1, max_epochs]")
        if self.monitor not in ("dice", "loss"):
            raise ValueError(f"unknown monitor {self.monitor!r}")


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    best_score: float = float("nan")

    def write(self, path):
        with open(path, "w") as f:
            for rec in self.epochs:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
            f.write(json.dumps(
                {"best_epoch": self.best_epoch, "stopped_epoch": self.stopped_epoch, "best_score": self.best_score},
                sort_keys=True,
            ) + "\n")

    @classmethod
    def read(cls, path) -> "TrainHistory":
        lines = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        summary = lines.pop()
        return cls(epochs=lines, **summary)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 0.5) -> torch.Tensor:
    """Mean over pixels of ``-(1 - p_t)^gamma * log(p_t)``.

    ``logits`` is ``(B, K, H, W)`` (or ``(B, K)``), ``targets`` the matching
    integer class map.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    targets = targets.long()
    k = logits.shape[1]
    if targets.numel() and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"targets must lie in [0, {k - 1}]")
    log_pt = F.log_softmax(logits, dim=1).gather(1, targets.unsqueeze(1)).squeeze(1)
    if gamma == 0:
        return -log_pt.mean()
    pt = log_pt.exp()
    # clamp keeps the gradient of (1-p)^gamma finite at p_t == 1 for gamma < 1
    weight = (1 - pt).clamp_min(1e-12) ** gamma
    return -(weight * log_pt).mean()


def _tensors(slices):
    images = torch.from_numpy(np.stack([s.image for s in slices])[:, None]).float()
    labels = torch.from_numpy(np.stack([s.labels for s in slices]).astype(np.int64))
    z = torch.from_numpy(np.stack([s.z for s in slices])).float()
    return images, labels, z


@torch.no_grad()
def _validation_loss(model, images, labels, z, gamma, batch_size):
    model.eval()
    total = 0.0
    for i in range(0, len(images), batch_size):
        out = model(images[i:i + batch_size], z[i:i + batch_size])
        total += focal_loss(out, labels[i:i + batch_size], gamma).item() * len(out)
    return total / len(images)


def train(model, train_slices, val_slices, cfg: TrainConfig = TrainConfig(), dump_dir: Optional[Path] = None,
          progress=print):
    """Train in place and return ``(best_state_dict, history)``.

    The model is left holding the best weights.
    """
    if not train_slices:
        raise ValueError("empty training set")
    if not val_slices:
        raise ValueError("empty validation set")
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    images, labels, z = _tensors(train_slices)
    v_images, v_labels, v_z = _tensors(val_slices)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)

    history = TrainHistory()
    best_state = copy.deepcopy(model.state_dict())
    sign = 1.0 if cfg.monitor == "dice" else -1.0
    best = -np.inf
    n = len(images)
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for i in range(0, n, cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            opt.zero_grad()
            loss = focal_loss(model(images[idx], z[idx]), labels[idx], cfg.focal_gamma)
            if not torch.isfinite(loss):
                state = {"epoch": epoch, "batch_start": i, "loss": loss.item(), "indices": idx.tolist()}
                if dump_dir is not None:
                    Path(dump_dir).mkdir(parents=True, exist_ok=True)
                    (Path(dump_dir) / "diverged.json").write_text(json.dumps(state, indent=2))
                    torch.save(model.state_dict(), Path(dump_dir) / "diverged_state.pt")
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", state)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)

        val_loss = _validation_loss(model, v_images, v_labels, v_z, cfg.focal_gamma, cfg.batch_size)
        val_dice, _ = aggregate(evaluate_model(model, val_slices, cfg.batch_size))
        rec = {"epoch": epoch, "train_loss": total / n, "val_loss": val_loss, "val_dice": val_dice}
        history.epochs.append(rec)
        if progress:
            progress(f"epoch {epoch:4d}  train_loss {rec['train_loss']:.5f}  val_loss {val_loss:.5f}  val_dice {val_dice:.4f}")

        score = sign * (val_dice if cfg.monitor == "dice" else val_loss)
        if score > best:
            best = score
            history.best_epoch = epoch
            history.best_score = val_dice if cfg.monitor == "dice" else val_loss
            best_state = copy.deepcopy(model.state_dict())
        history.stopped_epoch = epoch
        if epoch - history.best_epoch >= cfg.patience:
            break

    model.load_state_dict(best_state)
    return best_state, history


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
