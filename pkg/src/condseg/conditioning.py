"""Conditioning vectors and the two conditioning mechanisms.

A conditioning vector ``z`` holds the percentage of RV-cavity, myocardium and
LV-cavity pixels in a ground-truth mask. It is injected into a network either
by concatenation (optionally after a small embedding MLP) or through FiLM
layers that predict a per-channel scale and shift.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

STRUCTURE_LABELS = (1, 2, 3)  # RV cavity, myocardium, LV cavity
EMBEDDING_WIDTHS = (3, 6, 12, 6, 3)
FILM_HIDDEN = 64


class ConditioningConfigError(ValueError):
    pass


def compute_label_distribution(mask, labels=STRUCTURE_LABELS) -> np.ndarray:
    """Return ``100 * count(mask == k) / mask.size`` for each structure label.

    Background only enters the denominator.
    """
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("mask is empty")
    total = float(mask.size)
    return np.array([100.0 * np.count_nonzero(mask == k) / total for k in labels], dtype=np.float64)


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str = "identity"  # "identity" or "mlp"

    def __post_init__(self):
        if self.kind not in ("identity", "mlp"):
            raise ConditioningConfigError(f"unknown embedding kind {self.kind!r}")

    @property
    def widths(self):
        return EMBEDDING_WIDTHS if self.kind == "mlp" else (3, 3)


def _mlp(widths) -> nn.Sequential:
    # ReLU between hidden layers, linear output
    layers = []
    for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
        layers.append(nn.Linear(w_in, w_out))
        if i < len(widths) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class Embedding(nn.Module):
    """``z~ = f(z)`` with ``f`` either the identity or a 3-6-12-6-3 MLP."""

    def __init__(self, spec: EmbeddingSpec = EmbeddingSpec()):
        super().__init__()
        self.spec = spec
        self.mlp = _mlp(EMBEDDING_WIDTHS) if spec.kind == "mlp" else None

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if self.mlp is None:
            return z
        return self.mlp(z)


def embed(z, spec: EmbeddingSpec, params=None) -> torch.Tensor:
    """Functional form of :class:`Embedding`.

    ``params`` is a list of ``(weight, bias)`` pairs, one per linear layer, with
    weights shaped ``(out, in)`` as in ``nn.Linear``.
    """
    z = torch.as_tensor(z)
    if spec.kind == "identity":
        if params:
            raise ConditioningConfigError("identity embedding takes no parameters")
        return z
    if params is None or len(params) != len(EMBEDDING_WIDTHS) - 1:
        raise ConditioningConfigError("mlp embedding needs 4 (weight, bias) pairs")
    h = z
    for i, (w, b) in enumerate(params):
        expected = (EMBEDDING_WIDTHS[i + 1], EMBEDDING_WIDTHS[i])
        if tuple(w.shape) != expected or tuple(b.shape) != expected[:1]:
            raise ConditioningConfigError(
                f"layer {i}: expected weight {expected}, got {tuple(w.shape)} / bias {tuple(b.shape)}"
            )
        h = torch.nn.functional.linear(h, w, b)
        if i < len(params) - 1:
            h = torch.relu(h)
    return h


def spatial_replicate(z: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Broadcast ``(..., 3)`` to ``(..., 3, h, w)``.

    ``expand`` keeps the result a view, so autograd sums gradients over the
    replicated positions.
    """
    if h < 1 or w < 1:
        raise ValueError("spatial size must be positive")
    return z[..., :, None, None].expand(*z.shape, h, w)


def concat_fuse(features: torch.Tensor, z_map: torch.Tensor) -> torch.Tensor:
    """Append the replicated conditioning channels after the feature channels."""
    if features.shape[-2:] != z_map.shape[-2:]:
        raise ValueError(f"spatial mismatch: {tuple(features.shape)} vs {tuple(z_map.shape)}")
    return torch.cat([features, z_map], dim=-3)


@dataclass
class FilmParams:
    gamma: torch.Tensor
    beta: torch.Tensor


class FilmGenerator(nn.Module):
    """MLP 3 -> 64 -> 2C producing ``gamma = 1 + dgamma`` and ``beta``.

    The output layer is zero-initialised so a fresh FiLM layer is the identity.
    """

    def __init__(self, channels: int, hidden: int = FILM_HIDDEN, cond_dim: int = 3):
        super().__init__()
        if channels < 1:
            raise ValueError("channels must be >= 1")
        self.channels = channels
        self.hidden = nn.Linear(cond_dim, hidden)
        self.out = nn.Linear(hidden, 2 * channels)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, z: torch.Tensor) -> FilmParams:
        dgamma, beta = self.out(torch.relu(self.hidden(z))).chunk(2, dim=-1)
        return FilmParams(gamma=1 + dgamma, beta=beta)


def film_generate(z, c: int, params) -> FilmParams:
    """Functional FiLM generator; ``params`` = ``((w1, b1), (w2, b2))``."""
    (w1, b1), (w2, b2) = params
    if w2.shape[0] != 2 * c:
        raise ValueError(f"output layer must have {2 * c} rows, got {w2.shape[0]}")
    h = torch.relu(torch.nn.functional.linear(torch.as_tensor(z), w1, b1))
    dgamma, beta = torch.nn.functional.linear(h, w2, b2).chunk(2, dim=-1)
    return FilmParams(gamma=1 + dgamma, beta=beta)


def film_apply(features: torch.Tensor, p: FilmParams) -> torch.Tensor:
    """``gamma[c] * F[c] + beta[c]`` on a ``(..., C, h, w)`` map."""
    c = features.shape[-3]
    if p.gamma.shape[-1] != c or p.beta.shape[-1] != c:
        raise ValueError(
            f"FiLM params have {p.gamma.shape[-1]}/{p.beta.shape[-1]} channels, features have {c}"
        )
    return p.gamma[..., None, None] * features + p.beta[..., None, None]


class FiLM(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.generator = FilmGenerator(channels)

    def forward(self, features: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return film_apply(features, self.generator(z))
