"""Metrics and visualization: endpoint error with occlusion splits, outlier rate,
flow colorization, and a linear segmentation probe on frozen features.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError


@dataclass
class FlowMetrics:
    """Endpoint-error summary. Split fields are None when their pixel set is empty."""

    epe_all: float | None
    epe_noc: float | None
    epe_occ: float | None
    f1: float | None
    valid_pixels: int = 0

    @classmethod
    def empty(cls) -> "FlowMetrics":
        return cls(None, None, None, None, 0)

    def to_record(self) -> dict:
        return {
            "epe_all": self.epe_all,
            "epe_noc": self.epe_noc,
            "epe_occ": self.epe_occ,
            "f1": self.f1,
            "valid_pixels": self.valid_pixels,
        }


def endpoint_error(
    pred: torch.Tensor,
    gt: torch.Tensor,
    valid: torch.Tensor | None = None,
    occ_mask: torch.Tensor | None = None,
) -> FlowMetrics:
    """EPE over valid pixels, split by occlusion, plus the two-threshold outlier rate.

    F1 counts valid pixels whose error exceeds both 3 px and 5% of |gt|;
    the occlusion mask plays no role in it.
    """
    if pred.shape != gt.shape or pred.shape[-3] != 2:
        raise ShapeError(f"pred/gt must be matching [2,h,w], got {tuple(pred.shape)}")
    err = torch.sqrt(((pred - gt) ** 2).sum(-3))
    mag = torch.sqrt((gt**2).sum(-3))
    if valid is None:
        valid = torch.ones_like(err, dtype=torch.bool)
    valid = valid.bool()
    n_valid = int(valid.sum())
    if n_valid == 0:
        return FlowMetrics.empty()

    def mean_over(mask):
        count = int(mask.sum())
        if count == 0:
            return None
        return float(err[mask].mean())

    epe_all = mean_over(valid)
    if occ_mask is None:
        epe_noc, epe_occ = epe_all, None
    else:
        occ = occ_mask.bool()
        epe_noc = mean_over(valid & ~occ)
        epe_occ = mean_over(valid & occ)
    outlier = (err > 3.0) & (err > 0.05 * mag)
    f1 = float(outlier[valid].float().mean()) * 100.0
    return FlowMetrics(epe_all, epe_noc, epe_occ, f1, n_valid)


def zero_flow_baseline(samples) -> float:
    """Mean EPE of an all-zero prediction over an iterable of FlowSamples."""
    total, count = 0.0, 0
    for sample in samples:
        mag = torch.sqrt((sample.gt_flow**2).sum(0))
        valid = sample.gt_valid if sample.gt_valid is not None else torch.ones_like(mag, dtype=torch.bool)
        total += float(mag[valid].sum())
        count += int(valid.sum())
    return total / max(count, 1)


# --------------------------------------------------------------------------
# Flow colorization (standard color-wheel rendering)
# --------------------------------------------------------------------------


def _make_color_wheel() -> torch.Tensor:
    segments = [  # (count, saturated channel, ramping channel, ramp direction)
        (15, 0, 1, +1),  # red -> yellow
        (6, 1, 0, -1),  # yellow -> green
        (4, 1, 2, +1),  # green -> cyan
        (11, 2, 1, -1),  # cyan -> blue
        (13, 2, 0, +1),  # blue -> magenta
        (6, 0, 2, -1),  # magenta -> red
    ]
    cols = []
    for count, keep, ramp, direction in segments:
        for i in range(count):
            col = [0.0, 0.0, 0.0]
            col[keep] = 1.0
            col[ramp] = i / count if direction > 0 else 1.0 - i / count
            cols.append(col)
    return torch.tensor(cols)


_WHEEL = _make_color_wheel()


def wheel_color(angle: torch.Tensor, radius: torch.Tensor) -> torch.Tensor:
    """Map direction angle (radians) and normalized magnitude in [0,1] to RGB.

    Zero radius is white; radius 1 is the fully saturated wheel color.
    angle/radius may be arbitrary broadcastable tensors; returns [..., 3].
    """
    ncols = _WHEEL.shape[0]
    a = angle / math.pi  # [-1, 1]
    fk = (a + 1) / 2 * (ncols - 1)
    k0 = torch.floor(fk).long() % ncols
    k1 = (k0 + 1) % ncols
    f = (fk - torch.floor(fk)).unsqueeze(-1)
    wheel = _WHEEL.to(angle.dtype)
    col = (1 - f) * wheel[k0] + f * wheel[k1]
    return 1 - radius.unsqueeze(-1) * (1 - col)


def flow_to_color(flow: torch.Tensor, max_magnitude: float | None = None) -> torch.Tensor:
    """Direction-as-hue, magnitude-as-saturation rendering; zero flow is white."""
    if flow.dim() != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be [2,h,w], got {tuple(flow.shape)}")
    if not torch.isfinite(flow).all():
        raise ShapeError("flow contains non-finite values")
    u, v = flow[0], flow[1]
    mag = torch.sqrt(u**2 + v**2)
    if max_magnitude is None:
        max_magnitude = float(mag.max())
    rad = mag / max_magnitude if max_magnitude > 0 else torch.zeros_like(mag)
    rad = rad.clamp(0.0, 1.0)
    angle = torch.atan2(-v, -u)
    return wheel_color(angle, rad).permute(2, 0, 1)


def save_image_png(image: torch.Tensor, path: str | Path) -> None:
    arr = (image.clamp(0, 1).detach().cpu().numpy().transpose(1, 2, 0) * 255).round()
    cv2.imwrite(str(path), arr.astype(np.uint8)[..., ::-1])


def write_compare_report(
    out_dir: str | Path,
    samples,
    predictions: list[torch.Tensor],
    max_magnitude: float | None = None,
) -> dict:
    """Side-by-side prediction / ground-truth / error renderings plus a metrics JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (sample, pred) in enumerate(zip(samples, predictions)):
        metrics = endpoint_error(pred, sample.gt_flow, sample.gt_valid, sample.gt_occlusion)
        mmax = max_magnitude or max(float(sample.gt_flow.abs().max()), 1e-6)
        err = torch.sqrt(((pred - sample.gt_flow) ** 2).sum(0))
        err_img = (err / max(float(err.max()), 1e-6)).unsqueeze(0).repeat(3, 1, 1)
        panel = torch.cat(
            [sample.frame_t1, flow_to_color(pred, mmax), flow_to_color(sample.gt_flow, mmax), err_img],
            dim=2,
        )
        save_image_png(panel, out_dir / f"compare_{i:04d}.png")
        rows.append(metrics.to_record())
    report = {"samples": rows}
    (out_dir / "compare.json").write_text(json.dumps(report, indent=2))
    return report


# --------------------------------------------------------------------------
# Linear segmentation probe
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    lr: float = 0.05
    weight_decay: float = 0.0
    train_fraction: float = 0.75
    seed: int = 0


def mean_iou(pred: torch.Tensor, target: torch.Tensor, num_classes: int) -> float:
    """Mean over classes (with nonempty union) of intersection-over-union."""
    ious = []
    for c in range(num_classes):
        p, t = pred == c, target == c
        union = int((p | t).sum())
        if union == 0:
            continue
        ious.append(int((p & t).sum()) / union)
    return sum(ious) / len(ious) if ious else 0.0


def linear_probe_segmentation(
    feature_fn,
    dataset,
    num_classes: int,
    cfg: ProbeConfig = ProbeConfig(),
) -> float:
    """Train a linear head on frozen features and report held-out mIoU.

    feature_fn maps an image [3,h,w] to a feature map [d,h/2,w/2] (finest
    pyramid stride). Labels are nearest-downsampled to the feature stride; the
    probe trains and evaluates at that resolution.
    """
    feats, labels = [], []
    with torch.no_grad():
        for i in range(len(dataset)):
            image, label = dataset[i]
            fmap = feature_fn(image)
            feats.append(fmap)
            stride_hw = fmap.shape[-2:]
            lab = (
                F.interpolate(label[None, None].float(), size=stride_hw, mode="nearest")
                .long()
                .squeeze()
            )
            labels.append(lab)
    feats_t = torch.stack(feats)
    labels_t = torch.stack(labels)
    n_train = max(1, int(len(dataset) * cfg.train_fraction))
    torch.manual_seed(cfg.seed)
    head = nn.Conv2d(feats_t.shape[1], num_classes, 1)
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    for _ in range(cfg.epochs):
        opt.zero_grad()
        logits = head(feats_t[:n_train])
        loss = F.cross_entropy(logits, labels_t[:n_train])
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = head(feats_t[n_train:]).argmax(1)
    return mean_iou(pred, labels_t[n_train:], num_classes)


def finest_feature_fn(encoder):
    """Adapter: image -> finest-level feature map of the shared encoder."""

    def run(image: torch.Tensor) -> torch.Tensor:
        was_training = encoder.training
        encoder.eval()
        try:
            with torch.no_grad():
                return encoder(image.unsqueeze(0))[-1].squeeze(0)
        finally:
            encoder.train(was_training)

    return run
