"""Multi-task optimization loop: per-network optimizer groups, warmup + cosine
schedule, delayed flow start, variance-covariance warmup, the data-sampling
strategies, and non-finite sentinels.

All randomness is a pure function of (seed, epoch, step), so checkpoint resume
is bitwise identical to an uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import torch
from torch import nn

from .config import RunConfig, SamplingStrategy, from_yaml, to_yaml, validate_config
from .content import Expander, augment, pooled_embedding, ssl_loss
from .data import (
    DatasetMixSpec,
    MixEntry,
    MixSampler,
    derive_seed,
)
from .encoder import Encoder, pyramid_feature_dims
from .errors import CheckpointError, StabilityError
from .evaluation import FlowMetrics, endpoint_error
from .flow import PyramidFlowNet, occlusion_mask, pyramid_level_sizes, warp
from .losses import (
    LossBundle,
    cycle_loss,
    pyramid_vc_loss,
    reconstruction_loss,
    regression_loss,
    smoothness_loss,
    total_loss,
)


@dataclass
class RunState:
    """Resumable run bookkeeping."""

    epoch: int = 0
    step: int = 0
    weights_checksum: str = ""
    metrics_path: str = ""
    last_losses: dict | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "step": self.step,
                "weights_checksum": self.weights_checksum,
                "metrics_path": self.metrics_path,
                "last_losses": self.last_losses,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "RunState":
        return cls(**json.loads(text))


def lr_schedule(step: int, total_steps: int, cfg) -> tuple[float, float]:
    """Linear warmup from 0 over the warmup epochs, cosine decay to end_lr.

    Returns (encoder rate, flow-estimator rate); the flow rate shares the
    shape with its own base value.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup_steps = round(total_steps * cfg.warmup_epochs / cfg.epochs)

    def rate(base: float) -> float:
        if warmup_steps > 0 and step < warmup_steps:
            return base * step / warmup_steps
        if total_steps == warmup_steps:
            return base
        progress = (step - warmup_steps) / (total_steps - warmup_steps)
        end = cfg.end_lr * (base / cfg.lr_encoder)
        return end + 0.5 * (base - end) * (1 + math.cos(math.pi * progress))

    return rate(cfg.lr_encoder), rate(cfg.lr_flow)


class MultiTaskModel(nn.Module):
    """Shared encoder + pyramid flow network + expander."""

    def __init__(self, cfg: RunConfig):
        super().__init__()
        self.encoder = Encoder(cfg.encoder)
        dims = pyramid_feature_dims(cfg.encoder)
        sizes = pyramid_level_sizes(cfg.data.image_height, cfg.data.image_width)
        self.flow_net = PyramidFlowNet(dims, sizes, cfg.estimator)
        self.expander = Expander(cfg.expander)


def plan_epoch(cfg, epoch: int, content_steps: int, flow_steps: int) -> list[str]:
    """Objective sequence for one epoch: entries are 'both', 'content' or 'flow'."""
    train = cfg.train
    flow_active = epoch >= train.flow_start_epoch
    if train.flow_only:
        return ["flow"] * flow_steps
    strategy = train.strategy
    if strategy == SamplingStrategy.COMBINED_LOSS.value:
        return ["both" if flow_active else "content"] * content_steps
    if strategy == SamplingStrategy.BATCH_ALTERNATION.value:
        if not flow_active:
            return ["content"] * content_steps
        plan = []
        for _ in range(content_steps):
            plan += ["content", "flow"]
        return plan
    if strategy == SamplingStrategy.EPOCH_ALTERNATION.value:
        flow_epoch = (epoch % 2 == 1) and flow_active
        return ["flow"] * flow_steps if flow_epoch else ["content"] * content_steps
    # two-phase strategies: content pretraining, then flow-only training
    if flow_active:
        return ["flow"] * flow_steps
    return ["content"] * content_steps


class Trainer:
    def __init__(self, cfg: RunConfig, datasets: dict, out_dir: str | Path, eval_hooks=()):
        validate_config(cfg)
        self.cfg = cfg
        self.datasets = datasets
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.eval_hooks = list(eval_hooks)
        torch.manual_seed(cfg.train.seed)
        self.model = MultiTaskModel(cfg)
        train = cfg.train
        self.optimizer = torch.optim.AdamW(
            [
                {
                    "params": list(self.model.encoder.parameters())
                    + list(self.model.expander.parameters()),
                    "lr": train.lr_encoder,
                    "weight_decay": train.weight_decay,
                    "name": "encoder",
                },
                {
                    "params": list(self.model.flow_net.parameters()),
                    "lr": train.lr_flow,
                    "weight_decay": train.flow_weight_decay,
                    "name": "flow",
                },
            ],
            betas=train.betas,
        )
        flow_train = datasets["flow_train"]
        self.flow_mix = MixSampler(
            DatasetMixSpec(entries=(MixEntry("flow_train", len(flow_train), 1),)),
            seed=derive_seed(train.seed, "mix"),
        )
        self.state = RunState(metrics_path=str(self.out_dir / "metrics.jsonl"))
        self._metrics_file = None
        self._plans = self._build_plans()
        self.total_steps = sum(len(p) for p in self._plans)

    # ------------------------------------------------------------------
    # Planning and bookkeeping
    # ------------------------------------------------------------------

    def _build_plans(self) -> list[list[str]]:
        train = self.cfg.train
        flow_steps = len(self.datasets["flow_train"]) // train.flow_batch_size
        if train.flow_only:
            content_steps = 0
        else:
            content_steps = len(self.datasets["content"]) // train.batch_size
        return [
            plan_epoch(self.cfg, epoch, content_steps, flow_steps)
            for epoch in range(train.epochs)
        ]

    def param_group_audit(self) -> dict[str, set[str]]:
        """Parameter-name membership per optimizer group (for the separation check)."""
        by_id = {}
        for name, p in self.model.named_parameters():
            by_id[id(p)] = name
        audit = {}
        for group in self.optimizer.param_groups:
            audit[group["name"]] = {by_id[id(p)] for p in group["params"]}
        return audit

    def weights_checksum(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(tensor.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def _log(self, record: dict) -> None:
        if self._metrics_file is None:
            self._metrics_file = open(self.state.metrics_path, "a")
        self._metrics_file.write(json.dumps(record) + "\n")
        self._metrics_file.flush()

    # ------------------------------------------------------------------
    # Batch assembly (pure functions of seed/epoch/step)
    # ------------------------------------------------------------------

    def _flow_batch(self, epoch: int, step: int):
        picks = self.flow_mix.draw_batch_at(
            derive_seed(self.cfg.train.seed, "flow", epoch, step), self.cfg.train.flow_batch_size
        )
        ds = self.datasets["flow_train"]
        samples = [ds[idx] for _, idx in picks]
        frames_t = torch.stack([s.frame_t for s in samples])
        frames_t1 = torch.stack([s.frame_t1 for s in samples])
        return frames_t, frames_t1

    def _content_batch(self, epoch: int, content_step: int):
        train = self.cfg.train
        ds = self.datasets["content"]
        g = torch.Generator().manual_seed(derive_seed(train.seed, "content_perm", epoch))
        perm = torch.randperm(len(ds), generator=g)
        lo = content_step * train.batch_size
        idxs = perm[lo : lo + train.batch_size].tolist()
        views_a, views_b = [], []
        for i, idx in enumerate(idxs):
            pair = augment(
                ds[idx],
                derive_seed(train.seed, "aug", epoch, content_step, i),
                self.cfg.augment,
            )
            views_a.append(pair.view_a)
            views_b.append(pair.view_b)
        return torch.stack(views_a), torch.stack(views_b)

    # ------------------------------------------------------------------
    # Loss computation
    # ------------------------------------------------------------------

    def _flow_parts(self, frames_t, frames_t1, parts: LossBundle) -> LossBundle:
        cfg = self.cfg
        b = frames_t.shape[0]
        pyr = self.model.encoder(torch.cat([frames_t, frames_t1]))
        pyr_t = [f[:b] for f in pyr]
        pyr_t1 = [f[b:] for f in pyr]
        # both directions in one pass through the shared estimator
        flows = self.model.flow_net(
            [torch.cat([a, b_]) for a, b_ in zip(pyr_t, pyr_t1)],
            [torch.cat([b_, a]) for a, b_ in zip(pyr_t, pyr_t1)],
        )
        fwd = [f[:b] for f in flows]
        bwd = [f[b:] for f in flows]
        masks = [torch.ones(pyr_t[0].shape[0], *pyr_t[0].shape[-2:], dtype=torch.bool)]
        warped = [pyr_t[0]]
        with torch.no_grad():  # masks are hard gates, no gradient flows through them
            for lvl in range(1, 6):
                masks.append(occlusion_mask(fwd[lvl - 1].detach(), bwd[lvl - 1].detach()))
            image_mask = occlusion_mask(fwd[5].detach(), bwd[5].detach())
        for lvl in range(1, 6):
            warped.append(warp(pyr_t[lvl], fwd[lvl - 1]))
        parts.reg = regression_loss(pyr_t1, warped, masks, level_weights=list(cfg.coeffs.flow))
        parts.rec = reconstruction_loss(frames_t1, warp(frames_t, fwd[5]), image_mask)
        parts.smooth = smoothness_loss(fwd[5], frames_t1, cfg.train.smooth_factor)
        parts.cycle = cycle_loss(
            pyr_t[1:], pyr_t1[1:], fwd[:5], bwd[:5], level_weights=list(cfg.coeffs.flow[1:])
        )
        parts.vc = pyramid_vc_loss(pyr_t, cfg.coeffs)
        return parts

    def _content_loss(self, views_a, views_b, vc_only: bool) -> torch.Tensor:
        cfg = self.cfg
        n = views_a.shape[0]
        pyr = self.model.encoder(torch.cat([views_a, views_b]))
        pyr_a = [f[:n] for f in pyr]
        pyr_b = [f[n:] for f in pyr]
        vc_levels = pyramid_vc_loss(pyr_a, cfg.coeffs) + pyramid_vc_loss(pyr_b, cfg.coeffs)
        za = self.model.expander(pooled_embedding(pyr_a))
        zb = self.model.expander(pooled_embedding(pyr_b))
        coeffs = replace(cfg.coeffs, expander_inv=0.0) if vc_only else cfg.coeffs
        return ssl_loss(za, zb, coeffs) + vc_levels

    # ------------------------------------------------------------------
    # Steps
    # ------------------------------------------------------------------

    def _apply_lr(self):
        lr_enc, lr_flow = lr_schedule(self.state.step, self.total_steps, self.cfg.train)
        for group in self.optimizer.param_groups:
            group["lr"] = lr_enc if group["name"] == "encoder" else lr_flow
        return lr_enc, lr_flow

    def _finish_step(self, parts: LossBundle, objective: str, lrs) -> LossBundle:
        train = self.cfg.train
        parts.check_finite(self.state.step)
        parts.total.backward()
        if train.rms_fault_threshold is not None and objective in ("both", "flow"):
            rms = self.model.flow_net.max_activation_rms()
            if rms > train.rms_fault_threshold:
                raise StabilityError(
                    "estimator_activation_rms", self.state.step, detail=f"rms {rms:.3e}"
                )
        self.optimizer.step()
        record = {
            "event": "step",
            "epoch": self.state.epoch,
            "step": self.state.step,
            "objective": objective,
            "lr_encoder": lrs[0],
            "lr_flow": lrs[1],
            **parts.to_record(),
        }
        self._log(record)
        self.state.step += 1
        self.state.last_losses = parts.to_record()
        return parts

    def _vc_warmup_active(self, epoch: int) -> bool:
        return epoch < self.cfg.train.vc_warmup_epochs

    def train_step_combined(self, video_batch, image_batch) -> LossBundle:
        """One optimizer step on the summed objective (or its warmup/pre-start subsets)."""
        train = self.cfg.train
        epoch = self.state.epoch
        torch.manual_seed(derive_seed(train.seed, "step", epoch, self.state.step))
        lrs = self._apply_lr()
        self.optimizer.zero_grad(set_to_none=True)
        parts = LossBundle()
        warmup = self._vc_warmup_active(epoch)
        flow_active = (
            epoch >= train.flow_start_epoch and not warmup and train.flow_coeff != 0.0
        )
        if train.flow_only:
            if video_batch is None:
                raise ValueError("flow_only step needs a video batch")
            parts = self._flow_parts(*video_batch, parts)
            if warmup:
                parts = LossBundle(vc=parts.vc)
            parts.total = total_loss(
                parts, multitask_coeff=1.0, cycle_coeff=train.cycle_coeff, flow_alpha=train.flow_alpha
            )
            return self._finish_step(parts, "flow", lrs)
        if flow_active and video_batch is not None:
            parts = self._flow_parts(*video_batch, parts)
        parts.ssl = self._content_loss(*image_batch, vc_only=warmup)
        parts.total = total_loss(
            parts,
            multitask_coeff=train.flow_coeff,
            cycle_coeff=train.cycle_coeff,
            flow_alpha=train.flow_alpha,
        )
        return self._finish_step(parts, "both" if flow_active else "content", lrs)

    def train_step_alternating(self, batch, which: str) -> LossBundle:
        """One optimizer step on exactly one objective."""
        train = self.cfg.train
        epoch = self.state.epoch
        torch.manual_seed(derive_seed(train.seed, "step", epoch, self.state.step))
        lrs = self._apply_lr()
        self.optimizer.zero_grad(set_to_none=True)
        warmup = self._vc_warmup_active(epoch)
        frozen = (
            which == "flow"
            and train.strategy == SamplingStrategy.FLOW_ESTIMATOR_FROZEN.value
        )
        saved = []
        if frozen:
            for p in self.model.encoder.parameters():
                saved.append(p.requires_grad)
                p.requires_grad_(False)
        try:
            parts = LossBundle()
            if which == "flow":
                parts = self._flow_parts(*batch, parts)
                if warmup:
                    parts = LossBundle(vc=parts.vc)
                parts.total = total_loss(
                    parts,
                    multitask_coeff=train.flow_coeff,
                    cycle_coeff=train.cycle_coeff,
                    flow_alpha=train.flow_alpha,
                )
            else:
                parts.ssl = self._content_loss(*batch, vc_only=warmup)
                parts.total = parts.ssl
            return self._finish_step(parts, which, lrs)
        finally:
            if frozen:
                for p, flag in zip(self.model.encoder.parameters(), saved):
                    p.requires_grad_(flag)

    # ------------------------------------------------------------------
    # Fit loop
    # ------------------------------------------------------------------

    def fit(self) -> RunState:
        (self.out_dir / "config.yaml").write_text(to_yaml(self.cfg))
        train = self.cfg.train
        try:
            for epoch in range(self.state.epoch, train.epochs):
                self.state.epoch = epoch
                plan = self._plans[epoch]
                content_step = 0
                for objective in plan:
                    if objective == "both":
                        video = self._flow_batch(epoch, self.state.step)
                        image = self._content_batch(epoch, content_step)
                        content_step += 1
                        self.train_step_combined(video, image)
                    elif objective == "flow":
                        video = self._flow_batch(epoch, self.state.step)
                        if train.flow_only:
                            self.train_step_combined(video, None)
                        else:
                            self.train_step_alternating(video, "flow")
                    else:
                        image = self._content_batch(epoch, content_step)
                        content_step += 1
                        self.train_step_alternating(image, "content")
                if (epoch + 1) % train.eval_every == 0 or epoch + 1 == train.epochs:
                    self._run_eval(epoch)
                self.save_checkpoint(self.out_dir / "last.pt")
        except StabilityError as fault:
            (self.out_dir / "fault.json").write_text(
                json.dumps({"term": fault.term, "step": fault.step, "message": str(fault)})
            )
            raise
        finally:
            if self._metrics_file is not None:
                self._metrics_file.close()
                self._metrics_file = None
        self.state.weights_checksum = self.weights_checksum()
        (self.out_dir / "state.json").write_text(self.state.to_json())
        return self.state

    def _run_eval(self, epoch: int) -> dict:
        record = {"event": "eval", "epoch": epoch}
        if "flow_val" in self.datasets:
            metrics = self.evaluate_epe(self.datasets["flow_val"])
            record.update(metrics.to_record())
        for hook in self.eval_hooks:
            record.update(hook(self, epoch))
        self._log(record)
        return record

    # ------------------------------------------------------------------
    # Inference / evaluation
    # ------------------------------------------------------------------

    def predict_flow(self, frames_t: torch.Tensor, frames_t1: torch.Tensor) -> torch.Tensor:
        """Image-resolution flow warping frames_t toward frames_t1 (eval mode, no grad)."""
        squeeze = frames_t.dim() == 3
        if squeeze:
            frames_t, frames_t1 = frames_t.unsqueeze(0), frames_t1.unsqueeze(0)
        was_training = self.model.training
        self.model.eval()
        try:
            with torch.no_grad():
                b = frames_t.shape[0]
                pyr = self.model.encoder(torch.cat([frames_t, frames_t1]))
                flows = self.model.flow_net([f[:b] for f in pyr], [f[b:] for f in pyr])
        finally:
            self.model.train(was_training)
        out = flows[-1]
        return out.squeeze(0) if squeeze else out

    def evaluate_epe(self, dataset) -> FlowMetrics:
        """Pixel-weighted EPE aggregation over a FlowSample dataset."""
        err_sum = noc_sum = occ_sum = 0.0
        n_valid = n_noc = n_occ = n_out = 0
        bs = self.cfg.train.flow_batch_size
        for lo in range(0, len(dataset), bs):
            samples = [dataset[i] for i in range(lo, min(lo + bs, len(dataset)))]
            pred = self.predict_flow(
                torch.stack([s.frame_t for s in samples]),
                torch.stack([s.frame_t1 for s in samples]),
            )
            for sample, p in zip(samples, pred):
                err = torch.sqrt(((p - sample.gt_flow) ** 2).sum(0))
                valid = (
                    sample.gt_valid
                    if sample.gt_valid is not None
                    else torch.ones_like(err, dtype=torch.bool)
                )
                occ = (
                    sample.gt_occlusion
                    if sample.gt_occlusion is not None
                    else torch.zeros_like(err, dtype=torch.bool)
                )
                mag = torch.sqrt((sample.gt_flow**2).sum(0))
                err_sum += float(err[valid].sum())
                n_valid += int(valid.sum())
                noc = valid & ~occ
                occm = valid & occ
                noc_sum += float(err[noc].sum())
                n_noc += int(noc.sum())
                occ_sum += float(err[occm].sum())
                n_occ += int(occm.sum())
                n_out += int((((err > 3.0) & (err > 0.05 * mag)) & valid).sum())
        if n_valid == 0:
            return FlowMetrics.empty()
        return FlowMetrics(
            epe_all=err_sum / n_valid,
            epe_noc=noc_sum / n_noc if n_noc else None,
            epe_occ=occ_sum / n_occ if n_occ else None,
            f1=100.0 * n_out / n_valid,
            valid_pixels=n_valid,
        )

    # ------------------------------------------------------------------
    # Checkpointing
    # ------------------------------------------------------------------

    def save_checkpoint(self, path: str | Path) -> None:
        torch.save(
            {
                "model": self.model.state_dict(),
                "optimizer": self.optimizer.state_dict(),
                "epoch": self.state.epoch,
                "step": self.state.step,
                "config_yaml": to_yaml(self.cfg),
            },
            path,
        )

    def load_checkpoint(self, path: str | Path) -> None:
        payload = torch.load(path, weights_only=False)
        try:
            self.model.load_state_dict(payload["model"])
            self.optimizer.load_state_dict(payload["optimizer"])
        except (RuntimeError, ValueError) as exc:
            raise CheckpointError(f"checkpoint does not match architecture: {exc}") from exc
        self.state.epoch = payload["epoch"] + 1  # checkpoints are written at epoch end
        self.state.step = payload["step"]

    @classmethod
    def restore(cls, path: str | Path, datasets: dict, out_dir: str | Path, eval_hooks=()):
        payload = torch.load(path, weights_only=False)
        cfg = from_yaml(payload["config_yaml"])
        trainer = cls(cfg, datasets, out_dir, eval_hooks)
        trainer.load_checkpoint(path)
        return trainer


def load_run_config(path: str | Path) -> RunConfig:
    payload = torch.load(path, weights_only=False)
    return from_yaml(payload["config_yaml"])
