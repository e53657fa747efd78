"""Shared pyramidal encoder producing six resolution levels from an RGB image.

The stem is split into two stride-2 convolutions (kernel 3 then kernel 4) so
the finest feature level sits at half resolution and the pyramid doubles in
resolution between consecutive levels. Levels are ordered coarsest-first
(level 1 = lowest resolution, where flow estimation starts).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CheckpointError, ShapeError, StabilityError
from .flow import ChannelNorm

# Channel widths per level, coarsest first. The coarsest width feeds the expander.
CONVNEXT_DIMS = (768, 768, 384, 192, 96, 48)
SMALL_CNN_DIMS = (128, 96, 64, 48, 32, 16)
_CONVNEXT_DEPTHS = (3, 3, 9, 3, 2)  # block counts per stage, finest-to-coarsest after the stem

LEVELS = 6


@dataclass(frozen=True)
class EncoderConfig:
    backbone_kind: str = "convnext_tiny_modified"
    width_multiplier: float = 1.0
    drop_path_rate: float = 0.1
    norm_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    norm_std: tuple[float, float, float] = (0.229, 0.224, 0.225)

    def __post_init__(self):
        if self.backbone_kind not in ("convnext_tiny_modified", "small_cnn"):
            raise ShapeError(f"unknown backbone_kind {self.backbone_kind!r}")
        if self.width_multiplier <= 0:
            raise ShapeError("width_multiplier must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ShapeError("drop_path_rate must be in [0, 1)")


def pyramid_feature_dims(cfg: EncoderConfig) -> list[int]:
    """The 6 channel widths d^(l), coarsest first; multiplier floors, minimum 8."""
    base = CONVNEXT_DIMS if cfg.backbone_kind == "convnext_tiny_modified" else SMALL_CNN_DIMS
    return [max(8, int(w * cfg.width_multiplier)) for w in base]


def validate_image(image: torch.Tensor) -> None:
    """Reject inputs that violate the image contract (3 channels, H/W divisible by 64)."""
    if image.dim() not in (3, 4):
        raise ShapeError(f"image must be [3,H,W] or [B,3,H,W], got {image.dim()}D")
    c, h, w = image.shape[-3:]
    if c != 3:
        raise ShapeError(f"image must have exactly 3 channels, got {c}")
    if h % 64 or w % 64:
        raise ShapeError(f"image H and W must be divisible by 64, got {h}x{w}")
    if not torch.isfinite(image).all():
        raise ShapeError("image contains non-finite values")


class DropPath(nn.Module):
    """Per-sample stochastic depth (active in train mode only)."""

    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x):
        if self.p == 0.0 or not self.training:
            return x
        keep = 1.0 - self.p
        mask = x.new_empty(x.shape[0], *([1] * (x.dim() - 1))).bernoulli_(keep)
        return x * mask / keep


class ConvNeXtBlock(nn.Module):
    def __init__(self, dim: int, drop_path: float = 0.0):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, 7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.pwconv2 = nn.Linear(4 * dim, dim)
        # layer scale disabled (init value 0.0 in the training recipe)
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        res = x
        x = self.dwconv(x)
        x = x.permute(0, 2, 3, 1)
        x = self.pwconv2(F.gelu(self.pwconv1(self.norm(x))))
        x = x.permute(0, 3, 1, 2)
        return res + self.drop_path(x)


class ModifiedConvNeXt(nn.Module):
    """ConvNeXt-style trunk with a split stem and an extra /64 stage.

    The single wide-kernel stride-4 stem is replaced by two convolutions
    (kernel 3 stride 2 padding 1, then kernel 4 stride 2 padding 1) so the
    pyramid gains a half-resolution level close to pixel space.
    """

    def __init__(self, dims: list[int], drop_path_rate: float = 0.0):
        super().__init__()
        fine = list(reversed(dims))  # finest-first: [/2, /4, /8, /16, /32, /64]
        self.stem1 = nn.Conv2d(3, fine[0], 3, stride=2, padding=1)
        self.norm1 = ChannelNorm(fine[0])
        self.stem2 = nn.Conv2d(fine[0], fine[1], 4, stride=2, padding=1)
        self.norm2 = ChannelNorm(fine[1])
        total_blocks = sum(_CONVNEXT_DEPTHS)
        rates = torch.linspace(0, drop_path_rate, total_blocks).tolist()
        self.stages = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        used = 0
        for i, depth in enumerate(_CONVNEXT_DEPTHS):
            dim = fine[i + 1]
            self.stages.append(
                nn.Sequential(*[ConvNeXtBlock(dim, rates[used + j]) for j in range(depth)])
            )
            used += depth
            if i + 1 < len(_CONVNEXT_DEPTHS):
                self.downsamples.append(
                    nn.Sequential(ChannelNorm(dim), nn.Conv2d(dim, fine[i + 2], 2, stride=2))
                )

    def forward(self, x) -> list[torch.Tensor]:
        levels = []
        x = self.norm1(self.stem1(x))
        levels.append(x)
        x = self.norm2(self.stem2(x))
        x = self.stages[0](x)
        levels.append(x)
        for down, stage in zip(self.downsamples, self.stages[1:]):
            x = stage(down(x))
            levels.append(x)
        return levels[::-1]  # coarsest first


class SmallCnn(nn.Module):
    """Purely convolutional 6-stage trunk (stride 2 per stage, no normalization).

    The reduced-width variant for desk-scale runs; the absence of any
    normalization keeps it exactly translation-equivariant.
    """

    def __init__(self, dims: list[int]):
        super().__init__()
        fine = list(reversed(dims))
        chans = [3] + fine
        self.stages = nn.ModuleList(
            nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1),
                nn.GELU(),
                nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1),
                nn.GELU(),
            )
            for i in range(LEVELS)
        )

    def forward(self, x) -> list[torch.Tensor]:
        levels = []
        for stage in self.stages:
            x = stage(x)
            levels.append(x)
        return levels[::-1]


class Encoder(nn.Module):
    """Shared encoder: normalizes the input and emits the 6-level feature pyramid."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        dims = pyramid_feature_dims(cfg)
        if cfg.backbone_kind == "convnext_tiny_modified":
            self.backbone = ModifiedConvNeXt(dims, cfg.drop_path_rate)
        else:
            self.backbone = SmallCnn(dims)
        self.register_buffer("mean", torch.tensor(cfg.norm_mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(cfg.norm_std).view(1, 3, 1, 1))

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        validate_image(image)
        squeeze = image.dim() == 3
        if squeeze:
            image = image.unsqueeze(0)
        x = (image - self.mean.to(image.dtype)) / self.std.to(image.dtype)
        levels = self.backbone(x)
        for lvl, feat in enumerate(levels):
            if not torch.isfinite(feat).all():
                raise StabilityError(f"encoder_level_{lvl + 1}", detail="non-finite features")
        if squeeze:
            levels = [f.squeeze(0) for f in levels]
        return levels


def save_encoder(encoder: Encoder, path: str | Path) -> None:
    """Write weights plus a JSON sidecar recording the EncoderConfig."""
    path = Path(path)
    torch.save(encoder.state_dict(), path)
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps(asdict(encoder.cfg), indent=2))


def load_encoder(path: str | Path) -> Encoder:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if not sidecar.exists():
        raise CheckpointError(f"missing config sidecar {sidecar}")
    raw = json.loads(sidecar.read_text())
    for key in ("norm_mean", "norm_std"):
        raw[key] = tuple(raw[key])
    encoder = Encoder(EncoderConfig(**raw))
    try:
        encoder.load_state_dict(torch.load(path, weights_only=True))
    except RuntimeError as exc:
        raise CheckpointError(f"weights do not match architecture: {exc}") from exc
    return encoder
