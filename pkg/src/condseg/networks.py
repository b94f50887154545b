"""U-Net and skip-free encoder-decoder with a single conditioning site."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .conditioning import FiLM, Embedding, EmbeddingSpec, concat_fuse, spatial_replicate

ARCHITECTURES = ("unet", "encoder_decoder")
MECHANISMS = ("none", "concat_raw", "concat_mlp", "film")
VALID_SITES = {
    "none": (None,),
    "concat_raw": ("early", "middle", "late"),
    "concat_mlp": ("early", "middle", "late"),
    "film": ("decoder", "late"),
}


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FusionSpec:
    architecture: str = "unet"
    mechanism: str = "none"
    site: Optional[str] = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ModelConfigError(f"unknown architecture {self.architecture!r}")
        if self.mechanism not in MECHANISMS:
            raise ModelConfigError(f"unknown mechanism {self.mechanism!r}")
        if self.site not in VALID_SITES[self.mechanism]:
            raise ModelConfigError(f"site {self.site!r} is invalid for mechanism {self.mechanism!r}")

    @property
    def variant(self) -> str:
        return "baseline" if self.mechanism == "none" else f"{self.mechanism}-{self.site}"

    @classmethod
    def from_variant(cls, architecture: str, variant: str) -> "FusionSpec":
        if variant == "baseline":
            return cls(architecture)
        mechanism, _, site = variant.partition("-")
        return cls(architecture, mechanism, site or None)


# Column order of the results tables.
VARIANTS = (
    "baseline",
    "concat_raw-early", "concat_raw-middle", "concat_raw-late",
    "concat_mlp-early", "concat_mlp-middle", "concat_mlp-late",
    "film-decoder", "film-late",
)


def all_fusion_specs(architecture: str) -> list[FusionSpec]:
    return [FusionSpec.from_variant(architecture, v) for v in VARIANTS]


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int = 1
    num_classes: int = 4
    depth: int = 4
    base_channels: int = 32
    # multiplies z before the learned conditioning networks (MLP embedding, FiLM generators);
    # raw concatenation always sees the unscaled percentages
    cond_scale: float = 1.0

    def widths(self) -> list[int]:
        return [self.base_channels * 2 ** i for i in range(self.depth)]

    @property
    def bottleneck_channels(self) -> int:
        return self.widths()[-1]


def _conv_bn(c_in, c_out):
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
    )


class EncoderStage(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = _conv_bn(c_in, c_out)
        self.conv2 = _conv_bn(c_out, c_out)

    def forward(self, x):
        return torch.relu(self.conv2(torch.relu(self.conv1(x))))


class DecoderStage(nn.Module):
    """Upsample, conv, optional skip concatenation, two convs.

    With ``film`` set, the stage's last conv runs conv -> BN -> FiLM -> ReLU.
    """

    def __init__(self, c_in, c_out, skip: bool, film: bool = False):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False)
        self.up_conv = _conv_bn(c_in, c_out)
        self.skip = skip
        self.conv1 = _conv_bn(2 * c_out if skip else c_out, c_out)
        self.conv2 = _conv_bn(c_out, c_out)
        self.film = FiLM(c_out) if film else None

    def forward(self, x, skip=None, z=None):
        x = torch.relu(self.up_conv(self.up(x)))
        if self.skip:
            x = torch.cat([skip, x], dim=1)
        x = self.conv2(torch.relu(self.conv1(x)))
        if self.film is not None:
            x = self.film(x, z)
        return torch.relu(x)


class SegmentationModel(nn.Module):
    """Forward signature ``(image [B,1,H,W], z [B,3]) -> logits [B,4,H,W]``."""

    def __init__(self, cfg: BackboneConfig = BackboneConfig(), fusion: FusionSpec = FusionSpec()):
        super().__init__()
        self.cfg = cfg
        self.fusion = fusion
        mech, site = fusion.mechanism, fusion.site
        concat = mech in ("concat_raw", "concat_mlp")
        extra = lambda where: 3 if concat and site == where else 0  # noqa: E731

        widths = cfg.widths()
        self.embedding = Embedding(EmbeddingSpec("mlp")) if mech == "concat_mlp" else None

        self.encoder = nn.ModuleList()
        c_prev = cfg.in_channels + extra("early")
        for w in widths:
            self.encoder.append(EncoderStage(c_prev, w))
            c_prev = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = EncoderStage(c_prev, cfg.bottleneck_channels)

        skip = fusion.architecture == "unet"
        film_decoder = mech == "film" and site == "decoder"
        self.decoder = nn.ModuleList()
        c_prev = cfg.bottleneck_channels + extra("middle")
        for w in reversed(widths):
            self.decoder.append(DecoderStage(c_prev, w, skip=skip, film=film_decoder))
            c_prev = w

        self.late_film = FiLM(c_prev) if mech == "film" and site == "late" else None
        self.classifier = nn.Conv2d(c_prev + extra("late"), cfg.num_classes, 1)

    def _fuse(self, x, z_emb, where):
        if z_emb is None or self.fusion.site != where:
            return x
        return concat_fuse(x, spatial_replicate(z_emb, *x.shape[-2:]))

    def forward(self, image: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        factor = 2 ** self.cfg.depth
        if image.shape[-1] % factor or image.shape[-2] % factor:
            raise ValueError(f"input size {tuple(image.shape[-2:])} not divisible by {factor}")
        mech = self.fusion.mechanism
        z = z.to(image.dtype)
        z_emb = None
        if mech == "concat_raw":
            z_emb = z
        elif mech == "concat_mlp":
            z_emb = self.embedding(z * self.cfg.cond_scale)
        z = z * self.cfg.cond_scale

        x = self._fuse(image, z_emb, "early")
        skips = []
        for stage in self.encoder:
            x = stage(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        x = self._fuse(x, z_emb, "middle")
        for stage, skip in zip(self.decoder, reversed(skips)):
            x = stage(x, skip, z)
        if self.late_film is not None:
            x = self.late_film(x, z)
        x = self._fuse(x, z_emb, "late")
        return self.classifier(x)


def build_model(cfg: BackboneConfig = BackboneConfig(), fusion: FusionSpec = FusionSpec()) -> SegmentationModel:
    return SegmentationModel(cfg, fusion)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@torch.no_grad()
def predict_logits(model, images, z, batch_size=16) -> torch.Tensor:
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        out.append(model(images[i:i + batch_size], z[i:i + batch_size]))
    return torch.cat(out)


def forward_volume(model, slices, batch_size=16):
    """Segment one (subject, phase) volume slice by slice.

    Returns an integer array ``(n_slices, H, W)``. Argmax ties resolve to the
    lowest class index.
    """
    if not slices:
        raise ValueError("no slices given")
    keys = {(s.subject_id, s.phase) for s in slices}
    if len(keys) != 1:
        raise ValueError(f"slices come from several volumes: {sorted(keys)}")
    slices = sorted(slices, key=lambda s: s.slice_index)
    images = torch.from_numpy(np.stack([s.image for s in slices])[:, None]).float()
    z = torch.from_numpy(np.stack([s.z for s in slices])).float()
    logits = predict_logits(model, images, z, batch_size)
    probs = torch.softmax(logits, dim=1)
    return torch.argmax(probs, dim=1).numpy().astype(np.uint8)


def save_checkpoint(model: SegmentationModel, path, **meta):
    """Write ``<path>`` (state dict) and ``<path>.json`` (metadata)."""
    path = Path(path)
    torch.save(model.state_dict(), path)
    record = {"fusion": asdict(model.fusion), "backbone": asdict(model.cfg), **meta}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(record, indent=2, sort_keys=True))


def load_checkpoint(path) -> tuple[SegmentationModel, dict]:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    model = build_model(BackboneConfig(**meta["backbone"]), FusionSpec(**meta["fusion"]))
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    model.eval()
    return model, meta
