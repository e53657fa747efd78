"""Coarse-to-fine flow estimation: warping, local correlation, residual predictors.

Flow fields are tensors of shape [2, h, w] (or [b, 2, h, w]) holding (dx, dy)
pixel displacements at their own resolution. A field f is the backward-sampling
map: warp(source, f) reconstructs the target frame.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError, StabilityError


def _as_batched(*tensors):
    if tensors[0].dim() == 3:
        return True, [t.unsqueeze(0) for t in tensors]
    return False, list(tensors)


def warp(features: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    """Backward-warp `features` by `flow`: out(p) = features(p + flow(p)).

    Bilinear sampling; samples falling outside the frame contribute zero, so a
    fully out-of-frame sample yields an exact zero. Zero flow is an exact
    identity (no resampling error). Differentiable in both arguments.

    Accepts [d,h,w]/[2,h,w] or the batched 4D equivalents.
    """
    squeeze, (features, flow) = _as_batched(features, flow)
    if features.dim() != 4 or flow.dim() != 4:
        raise ShapeError(f"warp expects 3D/4D inputs, got {features.dim()}D features")
    if flow.shape[1] != 2:
        raise ShapeError(f"flow must have 2 channels, got {flow.shape[1]}")
    if features.shape[0] != flow.shape[0] or features.shape[-2:] != flow.shape[-2:]:
        raise ShapeError(
            f"feature/flow shape mismatch: {tuple(features.shape)} vs {tuple(flow.shape)}"
        )
    b, d, h, w = features.shape
    dtype, device = features.dtype, features.device
    ys, xs = torch.meshgrid(
        torch.arange(h, device=device, dtype=dtype),
        torch.arange(w, device=device, dtype=dtype),
        indexing="ij",
    )
    px = xs.unsqueeze(0) + flow[:, 0]
    py = ys.unsqueeze(0) + flow[:, 1]
    x0 = torch.floor(px.detach())
    y0 = torch.floor(py.detach())
    wx = px - x0
    wy = py - y0
    flat = features.reshape(b, d, h * w)

    def corner(ix, iy):
        inside = (ix >= 0) & (ix <= w - 1) & (iy >= 0) & (iy <= h - 1)
        idx = (iy.clamp(0, h - 1) * w + ix.clamp(0, w - 1)).long()
        vals = flat.gather(2, idx.view(b, 1, h * w).expand(b, d, h * w))
        return vals.view(b, d, h, w) * inside.to(dtype).unsqueeze(1)

    out = (
        corner(x0, y0) * ((1 - wx) * (1 - wy)).unsqueeze(1)
        + corner(x0 + 1, y0) * (wx * (1 - wy)).unsqueeze(1)
        + corner(x0, y0 + 1) * ((1 - wx) * wy).unsqueeze(1)
        + corner(x0 + 1, y0 + 1) * (wx * wy).unsqueeze(1)
    )
    return out.squeeze(0) if squeeze else out


def correlation(warped: torch.Tensor, target: torch.Tensor, radius: int) -> torch.Tensor:
    """Local matching-cost volume between a warped source and the target.

    Entry (k, p) with k = (dy+r)*(2r+1) + (dx+r) is <warped(p), target(p+d)> / d
    for the displacement d = (dx, dy); displacements reaching outside the frame
    contribute zero. Costs are normalized by the channel count.
    """
    squeeze, (warped, target) = _as_batched(warped, target)
    if warped.shape != target.shape:
        raise ShapeError(
            f"correlation input shapes differ: {tuple(warped.shape)} vs {tuple(target.shape)}"
        )
    b, d, h, w = warped.shape
    if radius < 0:
        raise ShapeError("search radius must be >= 0")
    if radius >= min(h, w):
        raise ShapeError(f"search radius {radius} >= min spatial size {min(h, w)}")
    padded = F.pad(target, (radius,) * 4)
    slices = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[:, :, radius + dy : radius + dy + h, radius + dx : radius + dx + w]
            slices.append((warped * shifted).sum(1))
    vol = torch.stack(slices, 1) / d
    return vol.squeeze(0) if squeeze else vol


def occlusion_mask(
    flow_fwd: torch.Tensor,
    flow_bwd: torch.Tensor,
    alpha1: float = 0.01,
    alpha2: float = 0.5,
) -> torch.Tensor:
    """Forward-backward compatibility check. True where a mutual correspondence exists.

    Pixel p is non-occluded iff
        |f(p) + b(p + f(p))|^2 < alpha1 * (|f(p)|^2 + |b(p + f(p))|^2) + alpha2.
    """
    squeeze, (flow_fwd, flow_bwd) = _as_batched(flow_fwd, flow_bwd)
    if flow_fwd.shape != flow_bwd.shape:
        raise ShapeError("forward/backward flow shapes differ")
    bwd_at = warp(flow_bwd, flow_fwd)
    lhs = ((flow_fwd + bwd_at) ** 2).sum(1)
    rhs = alpha1 * ((flow_fwd**2).sum(1) + (bwd_at**2).sum(1)) + alpha2
    mask = lhs < rhs
    return mask.squeeze(0) if squeeze else mask


def upsample_flow(flow: torch.Tensor) -> torch.Tensor:
    """Bilinear x2 upsample with displacement values doubled to match the new scale."""
    squeeze, (flow,) = _as_batched(flow)
    up = F.interpolate(flow, scale_factor=2, mode="bilinear", align_corners=False) * 2
    return up.squeeze(0) if squeeze else up


@dataclass(frozen=True)
class EstimatorConfig:
    """Residual flow predictor settings.

    size_factor multiplies every hidden width (factor 2 is the full-size model);
    flow values are clipped to +-flow_clip_value after every refinement.
    """

    size_factor: int = 2
    use_layernorm: bool = True
    use_l2norm_last: bool = False
    flow_clip_value: float = 128.0
    search_radius: int = 4
    base_widths: tuple[int, ...] = (32, 128, 128, 64)

    def __post_init__(self):
        if self.size_factor not in (1, 2):
            raise ShapeError(f"size_factor must be 1 or 2, got {self.size_factor}")
        if self.flow_clip_value <= 0:
            raise ShapeError("flow_clip_value must be positive")
        if self.search_radius < 1:
            raise ShapeError("search_radius must be >= 1")
        if len(self.base_widths) != 4:
            raise ShapeError("base_widths must list the 4 hidden conv widths")


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a [b,c,h,w] map, per spatial position."""

    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.dim = dim
        self.eps = eps

    def forward(self, x):
        x = x.permute(0, 2, 3, 1)
        x = F.layer_norm(x, (self.dim,), self.weight, self.bias, self.eps)
        return x.permute(0, 3, 1, 2)


class ResidualEstimator(nn.Module):
    """5-layer conv head predicting residual flow from (volume, source, warped, prior).

    Hidden widths scale with cfg.size_factor; channelwise LayerNorm follows every
    conv except the output one (normalizing the output would bias it away from
    the valid displacement range). The output conv is zero-initialized so an
    untrained head predicts exactly zero residual.
    """

    def __init__(self, in_channels: int, cfg: EstimatorConfig):
        super().__init__()
        widths = [w * cfg.size_factor for w in cfg.base_widths]
        chans = [in_channels] + widths
        self.convs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, padding=1) for i in range(4)
        )
        self.norms = nn.ModuleList(
            ChannelNorm(c) if cfg.use_layernorm else nn.Identity() for c in widths
        )
        self.out = nn.Conv2d(widths[-1], 2, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        self.use_l2norm_last = cfg.use_l2norm_last
        self.last_layer_rms: list[float] = []

    def forward(self, x):
        rms = []
        for conv, norm in zip(self.convs, self.norms):
            x = conv(x)
            rms.append(float(x.detach().pow(2).mean().sqrt()))
            x = F.gelu(norm(x))
        if self.use_l2norm_last:
            x = x / (x.pow(2).sum(1, keepdim=True).sqrt() + 1e-8)
        x = self.out(x)
        rms.append(float(x.detach().pow(2).mean().sqrt()))
        self.last_layer_rms = rms
        return x


class PyramidFlowNet(nn.Module):
    """Coarse-to-fine residual flow over a 6-level pyramid (coarsest first).

    Construction binds the per-level search radii (clamped so the correlation
    window fits the level) and estimator input widths to a declared training
    resolution. forward returns the flows for levels 2..7: entry i matches the
    resolution of feature level i+2, the last entry being at image resolution
    for the reconstruction loss.
    """

    def __init__(
        self,
        feature_dims: list[int],
        level_sizes: list[tuple[int, int]],
        cfg: EstimatorConfig,
    ):
        super().__init__()
        if len(feature_dims) != len(level_sizes):
            raise ShapeError("feature_dims and level_sizes must align")
        self.cfg = cfg
        self.level_sizes = [tuple(s) for s in level_sizes]
        self.radii = [max(0, min(cfg.search_radius, min(h, w) - 1)) for h, w in level_sizes]
        self.estimators = nn.ModuleList(
            ResidualEstimator((2 * r + 1) ** 2 + 2 * d + 2, cfg)
            for r, d in zip(self.radii, feature_dims)
        )

    def forward(self, pyr_t: list[torch.Tensor], pyr_t1: list[torch.Tensor]) -> list[torch.Tensor]:
        if len(pyr_t) != len(self.estimators):
            raise ShapeError(
                f"pyramid has {len(pyr_t)} levels, network built for {len(self.estimators)}"
            )
        for lvl, (xt, expected) in enumerate(zip(pyr_t, self.level_sizes)):
            if tuple(xt.shape[-2:]) != expected:
                raise ShapeError(
                    f"level {lvl + 1} spatial size {tuple(xt.shape[-2:])} != "
                    f"construction size {expected}"
                )
        clip = self.cfg.flow_clip_value
        b = pyr_t[0].shape[0]
        h1, w1 = self.level_sizes[0]
        prior = pyr_t[0].new_zeros(b, 2, h1, w1)
        flows = []
        for lvl, (xt, xt1, est, radius) in enumerate(
            zip(pyr_t, pyr_t1, self.estimators, self.radii)
        ):
            warped = warp(xt, prior)
            vol = correlation(warped, xt1, radius)
            delta = est(torch.cat([vol, xt, warped, prior], dim=1))
            refined = torch.clamp(prior + delta, -clip, clip)
            out = torch.clamp(upsample_flow(refined), -clip, clip)
            if not torch.isfinite(out).all():
                raise StabilityError(f"flow_level_{lvl + 2}", detail="non-finite flow values")
            flows.append(out)
            prior = out
        return flows

    def max_activation_rms(self) -> float:
        """Largest per-layer conv-output RMS recorded during the last forward."""
        vals = [r for est in self.estimators for r in est.last_layer_rms]
        return max(vals) if vals else 0.0


def pyramid_level_sizes(height: int, width: int, levels: int = 6) -> list[tuple[int, int]]:
    """Spatial sizes per level, coarsest first: level l is (H, W) / 2^(levels+1-l)."""
    return [(height >> (levels + 1 - l), width >> (levels + 1 - l)) for l in range(1, levels + 1)]
