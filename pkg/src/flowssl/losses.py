"""Training objectives: feature regression, photometric reconstruction, smoothness,
cycle consistency, variance-covariance regularization, and their combination.

Per-level terms use means over pixels (not sums) so coefficients transfer
across resolutions. Every loss is >= 0 and exactly 0 at its fixed point.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields

import torch
import torch.nn.functional as F

from .errors import ShapeError, StabilityError
from .flow import warp


@dataclass(frozen=True)
class LayerCoeffTable:
    """Per-layer coefficients for the variance/covariance/invariance/flow terms.

    Level vectors are indexed coarsest-first (index 0 = encoder output feeding
    the expander, index 5 = half-resolution level).
    """

    expander_var: float = 25.0
    expander_cov: float = 1.0
    expander_inv: float = 1.0
    var: tuple[float, ...] = (0.01, 0.01, 0.01, 0.01, 0.001, 0.0001)
    cov: tuple[float, ...] = (0.04, 0.04, 0.001, 0.0, 0.0, 0.0)
    flow: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 0.1, 0.01)

    def __post_init__(self):
        for name in ("var", "cov", "flow"):
            if len(getattr(self, name)) != 6:
                raise ShapeError(f"LayerCoeffTable.{name} must list 6 per-level values")


@dataclass
class LossBundle:
    """Named scalar loss terms plus the combined total.

    During training the fields hold 0-dim tensors attached to the graph;
    to_record() detaches them into a flat JSON-ready dict.
    """

    rec: torch.Tensor | float = 0.0
    reg: torch.Tensor | float = 0.0
    smooth: torch.Tensor | float = 0.0
    cycle: torch.Tensor | float = 0.0
    vc: torch.Tensor | float = 0.0
    ssl: torch.Tensor | float = 0.0
    total: torch.Tensor | float = 0.0

    def term_names(self) -> list[str]:
        return [f.name for f in fields(self)]

    def check_finite(self, step: int | None = None) -> None:
        for name in self.term_names():
            value = getattr(self, name)
            value = float(value.detach()) if torch.is_tensor(value) else float(value)
            if value != value or value in (float("inf"), float("-inf")):
                raise StabilityError(name, step=step, detail=f"value {value}")

    def to_record(self) -> dict[str, float]:
        return {
            name: float(v.detach()) if torch.is_tensor(v := getattr(self, name)) else float(v)
            for name in self.term_names()
        }

    def to_json(self) -> str:
        return json.dumps(self.to_record())


def _masked_mean(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Mean of `values` over True entries of `mask`; 0 when the mask is empty."""
    if mask is None:
        return values.mean()
    if mask.shape != values.shape:
        mask = mask.expand_as(values)
    count = mask.sum()
    if count == 0:
        return values.sum() * 0.0
    return (values * mask.to(values.dtype)).sum() / count.to(values.dtype)


def regression_loss(
    pyr_t1: list[torch.Tensor],
    warped_pyrs: list[torch.Tensor],
    masks: list[torch.Tensor | None],
    level_weights: list[float] | None = None,
) -> torch.Tensor:
    """Multi-scale feature regression: sum over levels of the masked mean
    per-pixel squared distance between target and warped-source features.

    Levels with empty masks contribute 0. `level_weights` (optional) applies
    the per-layer flow coefficients.
    """
    if not len(pyr_t1) == len(warped_pyrs) == len(masks):
        raise ShapeError("one warped map and one mask per level required")
    weights = level_weights if level_weights is not None else [1.0] * len(pyr_t1)
    total = None
    for target, warped, mask, wgt in zip(pyr_t1, warped_pyrs, masks, weights):
        if target.shape != warped.shape:
            raise ShapeError("warped features must match target shape")
        sq = ((target - warped) ** 2).sum(-3)
        term = wgt * _masked_mean(sq, mask)
        total = term if total is None else total + term
    return total


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    kernel = torch.outer(g, g)
    return kernel / kernel.sum()


def ssim_map(
    x: torch.Tensor,
    y: torch.Tensor,
    window: int = 11,
    sigma: float = 1.5,
    c1: float = 0.01**2,
    c2: float = 0.03**2,
) -> torch.Tensor:
    """Per-pixel SSIM over a Gaussian window, valid region only (no padding)."""
    squeeze = x.dim() == 3
    if squeeze:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    if x.shape != y.shape:
        raise ShapeError("ssim inputs must match")
    if min(x.shape[-2:]) < window:
        raise ShapeError(f"image smaller than the {window}x{window} ssim window")
    c = x.shape[1]
    kernel = _gaussian_window(window, sigma, x.dtype, x.device).expand(c, 1, window, window)

    def smooth(t):
        return F.conv2d(t, kernel, groups=c)

    mu_x, mu_y = smooth(x), smooth(y)
    sx = smooth(x * x) - mu_x * mu_x
    sy = smooth(y * y) - mu_y * mu_y
    sxy = smooth(x * y) - mu_x * mu_y
    out = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sx + sy + c2))
    return out.squeeze(0) if squeeze else out


def reconstruction_loss(
    target: torch.Tensor,
    warped: torch.Tensor,
    mask: torch.Tensor | None = None,
    weights: tuple[float, float, float] = (0.25, 0.25, 0.5),
    window: int = 11,
    sigma: float = 1.5,
) -> torch.Tensor:
    """Photometric distance w2*MSE + w1*MAE + ws*(1 - SSIM)/2, each masked.

    `weights` is (w2, w1, ws). The SSIM term is evaluated on the valid
    (unpadded) region with the mask center-cropped to match.
    """
    if target.shape != warped.shape:
        raise ShapeError("reconstruction inputs must match")
    w2, w1, ws = weights
    diff = warped - target
    mse = _masked_mean((diff**2), None if mask is None else mask.unsqueeze(-3))
    mae = _masked_mean(diff.abs(), None if mask is None else mask.unsqueeze(-3))
    smap = ssim_map(target, warped, window=window, sigma=sigma)
    half = window // 2
    smask = None
    if mask is not None:
        smask = mask[..., half:-half, half:-half].unsqueeze(-3)
    ssim_term = _masked_mean((1 - smap) / 2, smask)
    return w2 * mse + w1 * mae + ws * ssim_term


def smoothness_loss(flow: torch.Tensor, image: torch.Tensor, edge_weight: float = 75.0) -> torch.Tensor:
    """Edge-aware first-order smoothness: for each direction, the mean over
    pixels of exp(-edge_weight * |grad image|) * |grad flow| with forward
    differences; image gradients are averaged over channels, flow gradients
    summed over the two components.
    """
    if flow.shape[-2:] != image.shape[-2:]:
        raise ShapeError("flow must be at image resolution (downsample the image otherwise)")
    total = None
    for dim in (-1, -2):
        gi = image.diff(dim=dim).abs().mean(-3)
        gf = flow.diff(dim=dim).abs().sum(-3)
        term = (torch.exp(-edge_weight * gi) * gf).mean()
        total = term if total is None else total + term
    return total


def cycle_loss(
    pyr_t: list[torch.Tensor],
    pyr_t1: list[torch.Tensor],
    flows_fwd: list[torch.Tensor],
    flows_bwd: list[torch.Tensor],
    level_weights: list[float] | None = None,
    interior_margin: int = 0,
) -> torch.Tensor:
    """Round-trip feature consistency, symmetrized over the two frames and halved:
    per level, mean |X_t - warp(warp(X_t, f_fwd), f_bwd)|^2 plus the t+1
    counterpart with the flows swapped. `interior_margin` crops a boundary band
    from the mean (boundary pixels legitimately leave the frame).
    """
    if not len(pyr_t) == len(pyr_t1) == len(flows_fwd) == len(flows_bwd):
        raise ShapeError("one forward and one backward flow per level required")
    weights = level_weights if level_weights is not None else [1.0] * len(pyr_t)
    m = interior_margin
    total = None
    for xt, xt1, ff, fb, wgt in zip(pyr_t, pyr_t1, flows_fwd, flows_bwd, weights):
        rt_t = warp(warp(xt, ff), fb)
        rt_t1 = warp(warp(xt1, fb), ff)
        sq_t = ((xt - rt_t) ** 2).sum(-3)
        sq_t1 = ((xt1 - rt_t1) ** 2).sum(-3)
        if m:
            sq_t = sq_t[..., m:-m, m:-m]
            sq_t1 = sq_t1[..., m:-m, m:-m]
        term = wgt * (sq_t.mean() + sq_t1.mean()) / 2
        total = term if total is None else total + term
    return total


def vc_loss(
    features: torch.Tensor, gamma: float = 1.0, eps: float = 1e-4
) -> tuple[torch.Tensor, torch.Tensor]:
    """Variance hinge and covariance penalty over a [n, d] sample matrix.

    variance term: (1/d) sum_j max(0, gamma - sqrt(Var(x_j) + eps));
    covariance term: (1/d) sum_{i != j} C_ij^2 with C the empirical covariance
    of the centered features (unbiased, n-1).
    """
    if features.dim() != 2:
        raise ShapeError(f"vc_loss expects [n, d], got {tuple(features.shape)}")
    n, d = features.shape
    if n < 2:
        raise ShapeError("vc_loss needs at least 2 samples")
    var = features.var(dim=0, unbiased=True)
    var_term = F.relu(gamma - torch.sqrt(var + eps)).mean()
    centered = features - features.mean(dim=0)
    cov = centered.T @ centered / (n - 1)
    cov_term = (cov.pow(2).sum() - cov.diagonal().pow(2).sum()) / d
    return var_term, cov_term


def flatten_spatial(features: torch.Tensor) -> torch.Tensor:
    """[d,h,w] or [b,d,h,w] -> [n, d] with spatial positions (and batch) as samples."""
    if features.dim() == 3:
        features = features.unsqueeze(0)
    b, d, h, w = features.shape
    return features.permute(0, 2, 3, 1).reshape(b * h * w, d)


def pyramid_vc_loss(
    pyramid: list[torch.Tensor], coeffs: LayerCoeffTable, gamma: float = 1.0
) -> torch.Tensor:
    """Table-of-coefficients weighted VC regularization across pyramid levels."""
    total = None
    for feat, wv, wc in zip(pyramid, coeffs.var, coeffs.cov):
        if wv == 0.0 and wc == 0.0:
            continue
        v, c = vc_loss(flatten_spatial(feat), gamma=gamma)
        term = wv * v + wc * c
        total = term if total is None else total + term
    if total is None:
        total = pyramid[0].sum() * 0.0
    return total


def total_loss(
    parts: LossBundle,
    multitask_coeff: float = 1.0,
    cycle_coeff: float = 0.2,
    flow_alpha: float = 1.0,
) -> torch.Tensor:
    """Combined objective: the flow-side terms scaled by the multi-task balancing
    coefficient (and the global flow scale), plus the content SSL term.

    Raises the named stability fault on any non-finite input term.
    """
    parts.check_finite()
    flow_side = parts.rec + parts.reg + parts.smooth + cycle_coeff * parts.cycle + parts.vc
    return multitask_coeff * flow_alpha * flow_side + parts.ssl
