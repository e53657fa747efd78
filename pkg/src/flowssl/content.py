"""Content-feature branch: two augmented views -> shared encoder -> expander ->
invariance + variance + covariance objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torch import nn

from .errors import ShapeError
from .losses import LayerCoeffTable, vc_loss


@dataclass(frozen=True)
class AugmentConfig:
    """View-generation protocol: random resized crop plus photometric jitter.

    Strengths follow the covariance-regularized pretraining convention this
    branch builds on; desk-scale presets shrink out_size to 64.
    """

    out_size: int = 224
    crop_scale: tuple[float, float] = (0.08, 1.0)
    crop_ratio: tuple[float, float] = (0.75, 4.0 / 3.0)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.2
    hue: float = 0.1
    grayscale_p: float = 0.2
    blur_p: tuple[float, float] = (1.0, 0.1)
    solarize_p: tuple[float, float] = (0.0, 0.2)


@dataclass
class ViewPair:
    view_a: torch.Tensor
    view_b: torch.Tensor
    augmentation_record: dict = field(default_factory=dict)


def _rand(g: torch.Generator, lo: float = 0.0, hi: float = 1.0) -> float:
    return float(torch.rand((), generator=g)) * (hi - lo) + lo


def _sample_crop(g: torch.Generator, h: int, w: int, cfg: AugmentConfig):
    area = h * w
    for _ in range(10):
        scale = _rand(g, *cfg.crop_scale)
        log_ratio = _rand(g, math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
        ratio = math.exp(log_ratio)
        cw = int(round(math.sqrt(area * scale * ratio)))
        ch = int(round(math.sqrt(area * scale / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(torch.randint(0, h - ch + 1, (), generator=g))
            left = int(torch.randint(0, w - cw + 1, (), generator=g))
            return top, left, ch, cw
    return 0, 0, h, w  # fallback: full image


def _gaussian_blur(img: torch.Tensor, sigma: float, kernel: int) -> torch.Tensor:
    coords = torch.arange(kernel, dtype=img.dtype) - (kernel - 1) / 2
    g1 = torch.exp(-(coords**2) / (2 * sigma**2))
    g1 = (g1 / g1.sum()).to(img.dtype)
    c = img.shape[0]
    x = img.unsqueeze(0)
    pad = kernel // 2
    x = F.conv2d(F.pad(x, (pad, pad, 0, 0), mode="reflect"), g1.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    x = F.conv2d(F.pad(x, (0, 0, pad, pad), mode="reflect"), g1.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    return x.squeeze(0)


def _augment_one(image: torch.Tensor, g: torch.Generator, cfg: AugmentConfig, asymmetric_idx: int):
    record: dict = {}
    top, left, ch, cw = _sample_crop(g, image.shape[-2], image.shape[-1], cfg)
    record["crop"] = (top, left, ch, cw)
    view = image[..., top : top + ch, left : left + cw]
    view = F.interpolate(
        view.unsqueeze(0), size=(cfg.out_size, cfg.out_size), mode="bilinear", align_corners=False
    ).squeeze(0)
    if _rand(g) < cfg.flip_p:
        view = torch.flip(view, dims=[-1])
        record["flip"] = True
    if _rand(g) < cfg.jitter_p:
        factors = {
            "brightness": _rand(g, 1 - cfg.brightness, 1 + cfg.brightness),
            "contrast": _rand(g, 1 - cfg.contrast, 1 + cfg.contrast),
            "saturation": _rand(g, 1 - cfg.saturation, 1 + cfg.saturation),
            "hue": _rand(g, -cfg.hue, cfg.hue),
        }
        record["jitter"] = factors
        view = TF.adjust_brightness(view, factors["brightness"])
        view = TF.adjust_contrast(view, factors["contrast"])
        view = TF.adjust_saturation(view, factors["saturation"])
        view = TF.adjust_hue(view, factors["hue"])
    if _rand(g) < cfg.grayscale_p:
        view = TF.rgb_to_grayscale(view, num_output_channels=3)
        record["grayscale"] = True
    if _rand(g) < cfg.blur_p[asymmetric_idx]:
        sigma = _rand(g, 0.1, 2.0)
        kernel = max(3, (cfg.out_size // 20) * 2 + 1)
        view = _gaussian_blur(view, sigma, kernel)
        record["blur_sigma"] = sigma
    if _rand(g) < cfg.solarize_p[asymmetric_idx]:
        view = torch.where(view >= 0.5, 1.0 - view, view)
        record["solarize"] = True
    return view.clamp(0.0, 1.0), record


def augment(seed_image: torch.Tensor, rng_seed: int, cfg: AugmentConfig) -> ViewPair:
    """Generate two views of one seed image; deterministic given rng_seed."""
    if seed_image.dim() != 3 or seed_image.shape[0] != 3:
        raise ShapeError("seed image must be [3,H,W]")
    if min(seed_image.shape[-2:]) < cfg.out_size:
        raise ShapeError("seed image smaller than the crop resolution")
    g = torch.Generator().manual_seed(int(rng_seed) & 0x7FFFFFFFFFFFFFFF)
    view_a, rec_a = _augment_one(seed_image, g, cfg, asymmetric_idx=0)
    view_b, rec_b = _augment_one(seed_image, g, cfg, asymmetric_idx=1)
    return ViewPair(view_a, view_b, {"view_a": rec_a, "view_b": rec_b})


@dataclass(frozen=True)
class ExpanderConfig:
    dims: tuple[int, ...] = (768, 8192, 8192, 8192)

    def __post_init__(self):
        if len(self.dims) < 2:
            raise ShapeError("expander needs at least input and output dims")


class Expander(nn.Module):
    """Fully-connected projector; LayerNorm + ReLU between layers, linear output.

    LayerNorm (rather than batch statistics) keeps the map strictly per-row.
    """

    def __init__(self, cfg: ExpanderConfig):
        super().__init__()
        self.cfg = cfg
        dims = cfg.dims
        layers: list[nn.Module] = []
        for i in range(len(dims) - 2):
            layers += [nn.Linear(dims[i], dims[i + 1]), nn.LayerNorm(dims[i + 1]), nn.ReLU()]
        layers.append(nn.Linear(dims[-2], dims[-1]))
        self.net = nn.Sequential(*layers)

    def forward(self, embedding: torch.Tensor) -> torch.Tensor:
        if embedding.dim() != 2 or embedding.shape[1] != self.cfg.dims[0]:
            raise ShapeError(
                f"expander expects [n, {self.cfg.dims[0]}], got {tuple(embedding.shape)}"
            )
        return self.net(embedding)


def ssl_loss(
    za: torch.Tensor, zb: torch.Tensor, coeffs: LayerCoeffTable | None = None
) -> torch.Tensor:
    """Invariance + variance + covariance objective on expander outputs:
    inv * mean|za - zb|^2 + var * (v(za) + v(zb)) + cov * (c(za) + c(zb)).
    """
    if za.shape != zb.shape:
        raise ShapeError("ssl_loss inputs must match")
    coeffs = coeffs or LayerCoeffTable()
    inv = F.mse_loss(za, zb)
    va, ca = vc_loss(za)
    vb, cb = vc_loss(zb)
    return (
        coeffs.expander_inv * inv
        + coeffs.expander_var * (va + vb)
        + coeffs.expander_cov * (ca + cb)
    )


def pooled_embedding(pyramid: list[torch.Tensor]) -> torch.Tensor:
    """Spatial mean of the coarsest pyramid level: [b, d] expander input."""
    coarsest = pyramid[0]
    if coarsest.dim() == 3:
        coarsest = coarsest.unsqueeze(0)
    return coarsest.mean(dim=(-2, -1))
