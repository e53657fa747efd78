"""Synthetic video/flow data with exact ground truth, on-disk flow formats,
and repetition-based dataset mixing.

Scene model: textured sprites over a static textured background. A sprite's
`velocity` is the backward-sampling displacement: the sprite sits at its
anchor in frame_t1 and at anchor + velocity in frame_t, so the ground-truth
field satisfies warp(frame_t, gt_flow) == frame_t1 away from occlusions.
Textures are analytic functions of sprite-local coordinates, which makes
translated renders exact rather than resampled.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np
import torch

from .errors import FormatError, ShapeError, TruncatedFileError

FLO_MAGIC = 202021.25
KITTI_FLOW_OFFSET = 2**15
KITTI_FLOW_SCALE = 64.0

TEXTURE_CLASSES = ("hstripes", "vstripes", "checker")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (independent of hash randomization)."""
    blob = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little") & 0x7FFFFFFFFFFFFFFF


@dataclass(frozen=True)
class SceneSpec:
    """Parameters of the random scene distribution."""

    height: int = 64
    width: int = 64
    sprite_count: tuple[int, int] = (1, 4)
    velocity_range: float = 8.0
    sprite_half_size: tuple[float, float] = (5.0, 12.0)
    # periods below ~8 px make the bilinear warp check fail its rendering tolerance
    texture_period: tuple[float, float] = (8.0, 12.0)
    texture_amp: float = 0.4
    background_amp: float = 0.05
    num_classes: int = len(TEXTURE_CLASSES) + 1  # background is class 0


@dataclass(frozen=True)
class Sprite:
    class_id: int  # 1-based index into TEXTURE_CLASSES
    shape: str  # "ellipse" | "rect"
    center: tuple[float, float]  # (cx, cy) at frame_t1
    half: tuple[float, float]  # (a, b)
    velocity: tuple[float, float]  # (vx, vy), backward-sampling displacement
    period: float
    phases: tuple[float, float]
    tint: tuple[float, float, float]
    amp: float = 0.45


@dataclass(frozen=True)
class SceneDescription:
    spec: SceneSpec
    sprites: tuple[Sprite, ...]
    background: dict = field(default_factory=dict)


@dataclass
class FlowSample:
    frame_t: torch.Tensor  # [3,h,w] in [0,1]
    frame_t1: torch.Tensor
    gt_flow: torch.Tensor | None = None  # [2,h,w]
    gt_valid: torch.Tensor | None = None  # [h,w] bool
    gt_occlusion: torch.Tensor | None = None  # [h,w] bool, True = no correspondence


def _rand(g: torch.Generator, lo: float, hi: float) -> float:
    return float(torch.rand((), generator=g)) * (hi - lo) + lo


def sample_scene(spec: SceneSpec, rng_seed: int) -> SceneDescription:
    g = torch.Generator().manual_seed(int(rng_seed) & 0x7FFFFFFFFFFFFFFF)
    n = int(torch.randint(spec.sprite_count[0], spec.sprite_count[1] + 1, (), generator=g))
    sprites = []
    for _ in range(n):
        cls = int(torch.randint(1, len(TEXTURE_CLASSES) + 1, (), generator=g))
        shape = "ellipse" if _rand(g, 0, 1) < 0.5 else "rect"
        cx = _rand(g, 0.15 * spec.width, 0.85 * spec.width)
        cy = _rand(g, 0.15 * spec.height, 0.85 * spec.height)
        a = _rand(g, *spec.sprite_half_size)
        b = _rand(g, *spec.sprite_half_size)
        vx = _rand(g, -spec.velocity_range, spec.velocity_range)
        vy = _rand(g, -spec.velocity_range, spec.velocity_range)
        sprites.append(
            Sprite(
                class_id=cls,
                shape=shape,
                center=(cx, cy),
                half=(a, b),
                velocity=(vx, vy),
                period=_rand(g, *spec.texture_period),
                phases=(_rand(g, 0, 2 * math.pi), _rand(g, 0, 2 * math.pi)),
                tint=(_rand(g, 0.4, 1.0), _rand(g, 0.4, 1.0), _rand(g, 0.4, 1.0)),
                amp=spec.texture_amp,
            )
        )
    background = {
        "base": (_rand(g, 0.35, 0.6), _rand(g, 0.35, 0.6), _rand(g, 0.35, 0.6)),
        "angle": _rand(g, 0, math.pi),
        "period": _rand(g, 12.0, 28.0),
        "phase": _rand(g, 0, 2 * math.pi),
        "amp": spec.background_amp,
    }
    return SceneDescription(spec=spec, sprites=tuple(sprites), background=background)


def _sprite_texture(sprite: Sprite, lx: torch.Tensor, ly: torch.Tensor) -> torch.Tensor:
    kind = TEXTURE_CLASSES[sprite.class_id - 1]
    two_pi = 2 * math.pi
    if kind == "hstripes":
        t = 0.5 + sprite.amp * torch.sin(two_pi * ly / sprite.period + sprite.phases[0])
    elif kind == "vstripes":
        t = 0.5 + sprite.amp * torch.sin(two_pi * lx / sprite.period + sprite.phases[0])
    else:  # checker
        t = 0.5 + sprite.amp * (
            torch.sin(two_pi * lx / sprite.period + sprite.phases[0])
            * torch.sin(two_pi * ly / sprite.period + sprite.phases[1])
        )
    tint = torch.tensor(sprite.tint, dtype=lx.dtype).view(3, 1, 1)
    return (t.unsqueeze(0) * tint).clamp(0.0, 1.0)


def _sprite_alpha(sprite: Sprite, lx: torch.Tensor, ly: torch.Tensor) -> torch.Tensor:
    a, b = sprite.half
    if sprite.shape == "ellipse":
        r = torch.sqrt((lx / a) ** 2 + (ly / b) ** 2 + 1e-12)
        dist = (1.0 - r) * min(a, b)  # approx signed pixel distance to the boundary
    else:
        dist = torch.minimum(a - lx.abs(), b - ly.abs())
    return (dist + 0.5).clamp(0.0, 1.0)


def _render_frame(scene: SceneDescription, shift_velocity: bool):
    """Composite the scene; returns (rgb [3,h,w], owner [h,w] int, class_map [h,w] int).

    shift_velocity renders sprites at anchor + velocity (frame_t positions).
    """
    spec = scene.spec
    ys, xs = torch.meshgrid(
        torch.arange(spec.height, dtype=torch.float32),
        torch.arange(spec.width, dtype=torch.float32),
        indexing="ij",
    )
    bg = scene.background
    base = torch.tensor(bg["base"], dtype=torch.float32).view(3, 1, 1)
    proj = xs * math.cos(bg["angle"]) + ys * math.sin(bg["angle"])
    wave = torch.sin(2 * math.pi * proj / bg["period"] + bg["phase"])
    rgb = (base + bg["amp"] * wave.unsqueeze(0)).clamp(0.0, 1.0)
    owner = torch.full((spec.height, spec.width), -1, dtype=torch.long)
    class_map = torch.zeros((spec.height, spec.width), dtype=torch.long)
    for idx, sprite in enumerate(scene.sprites):
        cx, cy = sprite.center
        if shift_velocity:
            cx, cy = cx + sprite.velocity[0], cy + sprite.velocity[1]
        lx, ly = xs - cx, ys - cy
        alpha = _sprite_alpha(sprite, lx, ly)
        color = _sprite_texture(sprite, lx, ly)
        rgb = alpha.unsqueeze(0) * color + (1 - alpha.unsqueeze(0)) * rgb
        hard = alpha > 0.5
        owner[hard] = idx
        class_map[hard] = sprite.class_id
    return rgb, owner, class_map


def render_scene(scene: SceneDescription) -> FlowSample:
    """Render the frame pair with exact per-pixel flow and occlusion ground truth."""
    spec = scene.spec
    frame_t, owner_t, _ = _render_frame(scene, shift_velocity=True)
    frame_t1, owner_t1, _ = _render_frame(scene, shift_velocity=False)
    gt_flow = torch.zeros(2, spec.height, spec.width)
    for idx, sprite in enumerate(scene.sprites):
        sel = owner_t1 == idx
        gt_flow[0][sel] = sprite.velocity[0]
        gt_flow[1][sel] = sprite.velocity[1]
    ys, xs = torch.meshgrid(
        torch.arange(spec.height, dtype=torch.float32),
        torch.arange(spec.width, dtype=torch.float32),
        indexing="ij",
    )
    qx = xs + gt_flow[0]
    qy = ys + gt_flow[1]
    outside = (qx < 0) | (qx > spec.width - 1) | (qy < 0) | (qy > spec.height - 1)
    qxi = qx.round().clamp(0, spec.width - 1).long()
    qyi = qy.round().clamp(0, spec.height - 1).long()
    source_owner = owner_t[qyi, qxi]
    occluded = outside | (source_owner != owner_t1)
    return FlowSample(
        frame_t=frame_t,
        frame_t1=frame_t1,
        gt_flow=gt_flow,
        gt_valid=torch.ones(spec.height, spec.width, dtype=torch.bool),
        gt_occlusion=occluded,
    )


def generate_synthetic_sequence(spec: SceneSpec, rng_seed: int) -> FlowSample:
    """Random frame pair under known per-sprite motion with exact gt flow/occlusion."""
    return render_scene(sample_scene(spec, rng_seed))


def generate_labeled_scene(spec: SceneSpec, rng_seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Single frame plus per-pixel sprite-class labels (0 = background)."""
    scene = sample_scene(spec, rng_seed)
    rgb, _, class_map = _render_frame(scene, shift_velocity=False)
    return rgb, class_map


class SyntheticFlowDataset:
    """Deterministic index -> FlowSample map; samples regenerate from (seed, index)."""

    def __init__(self, spec: SceneSpec, length: int, seed: int, cache: bool = True):
        self.spec = spec
        self.length = length
        self.seed = seed
        self._cache: dict[int, FlowSample] | None = {} if cache else None

    def __len__(self):
        return self.length

    def __getitem__(self, index: int) -> FlowSample:
        if not 0 <= index < self.length:
            raise IndexError(index)
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        sample = generate_synthetic_sequence(self.spec, derive_seed(self.seed, "flow", index))
        if self._cache is not None:
            self._cache[index] = sample
        return sample


class SyntheticContentDataset:
    """Single procedural frames (richer sprite counts) for the content branch."""

    def __init__(self, spec: SceneSpec, length: int, seed: int, cache: bool = True):
        self.spec = replace(spec, sprite_count=(2, 6))
        self.length = length
        self.seed = seed
        self._cache: dict[int, torch.Tensor] | None = {} if cache else None

    def __len__(self):
        return self.length

    def __getitem__(self, index: int) -> torch.Tensor:
        if not 0 <= index < self.length:
            raise IndexError(index)
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        scene = sample_scene(self.spec, derive_seed(self.seed, "content", index))
        rgb, _, _ = _render_frame(scene, shift_velocity=False)
        if self._cache is not None:
            self._cache[index] = rgb
        return rgb


class SyntheticSegDataset:
    """Labeled scenes for the linear segmentation probe."""

    def __init__(self, spec: SceneSpec, length: int, seed: int, cache: bool = True):
        self.spec = spec
        self.length = length
        self.seed = seed
        self._cache: dict[int, tuple] | None = {} if cache else None

    def __len__(self):
        return self.length

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        if not 0 <= index < self.length:
            raise IndexError(index)
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        item = generate_labeled_scene(self.spec, derive_seed(self.seed, "seg", index))
        if self._cache is not None:
            self._cache[index] = item
        return item


# --------------------------------------------------------------------------
# On-disk flow formats
# --------------------------------------------------------------------------


def save_flo(flow: torch.Tensor, path: str | Path) -> None:
    """Write a [2,h,w] flow in the float32 .flo layout (magic, int32 w/h, interleaved u,v)."""
    if flow.dim() != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be [2,h,w], got {tuple(flow.shape)}")
    arr = flow.detach().cpu().numpy().astype("<f4")
    _, h, w = arr.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<fii", FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes())


def load_flo(path: str | Path) -> torch.Tensor:
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) < 12:
            raise TruncatedFileError(f"{path}: header truncated")
        magic, w, h = struct.unpack("<fii", header)
        if magic != np.float32(FLO_MAGIC):
            raise FormatError(f"{path}: bad magic {magic!r}")
        if w <= 0 or h <= 0 or w > 10**5 or h > 10**5:
            raise FormatError(f"{path}: implausible dimensions {w}x{h}")
        payload = f.read(4 * 2 * h * w)
    if len(payload) < 4 * 2 * h * w:
        raise TruncatedFileError(f"{path}: payload truncated")
    arr = np.frombuffer(payload, dtype="<f4").reshape(h, w, 2)
    return torch.from_numpy(arr.transpose(2, 0, 1).copy())


def save_kitti_flow_png(
    flow: torch.Tensor, path: str | Path, valid: torch.Tensor | None = None
) -> None:
    """Write flow as a 3-channel 16-bit PNG: u,v encoded as value*64 + 2^15, third channel validity."""
    if flow.dim() != 3 or flow.shape[0] != 2:
        raise ShapeError(f"flow must be [2,h,w], got {tuple(flow.shape)}")
    arr = flow.detach().cpu().numpy()
    h, w = arr.shape[1:]
    enc = np.zeros((h, w, 3), dtype=np.uint16)
    enc[..., 0] = np.clip(np.rint(arr[0] * KITTI_FLOW_SCALE + KITTI_FLOW_OFFSET), 0, 65535)
    enc[..., 1] = np.clip(np.rint(arr[1] * KITTI_FLOW_SCALE + KITTI_FLOW_OFFSET), 0, 65535)
    if valid is None:
        enc[..., 2] = 1
    else:
        enc[..., 2] = valid.detach().cpu().numpy().astype(np.uint16)
    if not cv2.imwrite(str(path), enc[..., ::-1]):  # cv2 writes BGR-ordered channels
        raise OSError(f"could not write {path}")


def load_kitti_flow_png(path: str | Path) -> tuple[torch.Tensor, torch.Tensor]:
    """Decode a 16-bit KITTI-style flow PNG into ([2,h,w] flow, [h,w] bool validity)."""
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise FormatError(f"{path}: not a readable image")
    if raw.dtype != np.uint16:
        raise FormatError(f"{path}: expected 16-bit channels, got {raw.dtype}")
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise FormatError(f"{path}: expected 3 channels")
    rgb = raw[..., ::-1].astype(np.float32)
    u = (rgb[..., 0] - KITTI_FLOW_OFFSET) / KITTI_FLOW_SCALE
    v = (rgb[..., 1] - KITTI_FLOW_OFFSET) / KITTI_FLOW_SCALE
    valid = torch.from_numpy((rgb[..., 2] > 0).copy())
    return torch.from_numpy(np.stack([u, v]).copy()), valid


# --------------------------------------------------------------------------
# Dataset mixing
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MixEntry:
    name: str
    size: int
    repetition: int = 1

    def __post_init__(self):
        if self.size < 1 or self.repetition < 1:
            raise ShapeError(f"mix entry {self.name}: size and repetition must be >= 1")


@dataclass(frozen=True)
class DatasetMixSpec:
    entries: tuple[MixEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise ShapeError("dataset mix must be nonempty")

    @property
    def effective_length(self) -> int:
        return sum(e.size * e.repetition for e in self.entries)


# Training-mix defaults for the real corpora (sizes x repetitions).
DEFAULT_FLOW_MIX = DatasetMixSpec(
    entries=(
        MixEntry("flyingthings", 40302, 1),
        MixEntry("flyingchairs", 22232, 1),
        MixEntry("kitti_raw", 42382, 1),
        MixEntry("kitti2012_train", 200, 100),
        MixEntry("kitti2012_multiview_train", 3800, 5),
        MixEntry("kitti2012_val", 198, 100),
        MixEntry("kitti2012_multiview_val", 3762, 5),
        MixEntry("kitti2015_train", 200, 100),
        MixEntry("kitti2015_multiview_train", 3800, 5),
        MixEntry("kitti2015_val", 198, 100),
        MixEntry("kitti2015_multiview_val", 3762, 5),
        MixEntry("sintel_raw", 27858, 1),
        MixEntry("sintel_clean", 1041, 5),
        MixEntry("sintel_final", 1041, 5),
        MixEntry("hd1k", 1047, 5),
    )
)


class MixSampler:
    """Uniform sampling over the repetition-expanded index; deterministic under seed."""

    def __init__(self, spec: DatasetMixSpec, seed: int):
        self.spec = spec
        self._gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        self._bounds = []
        offset = 0
        for e in spec.entries:
            self._bounds.append((offset, offset + e.size * e.repetition, e))
            offset += e.size * e.repetition

    def _locate(self, r: int) -> tuple[str, int]:
        for lo, hi, e in self._bounds:
            if lo <= r < hi:
                return e.name, (r - lo) % e.size
        raise IndexError(r)

    def draw(self) -> tuple[str, int]:
        r = int(torch.randint(0, self.spec.effective_length, (), generator=self._gen))
        return self._locate(r)

    def draw_batch(self, k: int) -> list[tuple[str, int]]:
        return [self.draw() for _ in range(k)]

    def draw_batch_at(self, seed: int, k: int) -> list[tuple[str, int]]:
        """Stateless batch draw: a pure function of the given seed (resume-safe)."""
        g = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
        rs = torch.randint(0, self.spec.effective_length, (k,), generator=g)
        return [self._locate(int(r)) for r in rs]

    def epoch(self) -> list[tuple[str, int]]:
        """One shuffled pass over the expanded index (each pair visited `repetition` times)."""
        perm = torch.randperm(self.spec.effective_length, generator=self._gen)
        return [self._locate(int(r)) for r in perm]


def build_mixed_dataset(spec: DatasetMixSpec, rng_seed: int) -> MixSampler:
    return MixSampler(spec, rng_seed)


# --------------------------------------------------------------------------
# Content corpus on disk (manifest + image files)
# --------------------------------------------------------------------------


def write_content_corpus(directory: str | Path, dataset, count: int | None = None) -> Path:
    """Write dataset images as PNGs plus a manifest listing them; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    count = len(dataset) if count is None else min(count, len(dataset))
    names = []
    for i in range(count):
        img = dataset[i]
        arr = (img.clamp(0, 1).numpy().transpose(1, 2, 0) * 255).round().astype(np.uint8)
        name = f"sample_{i:06d}.png"
        cv2.imwrite(str(directory / name), arr[..., ::-1])
        names.append(name)
    manifest = directory / "manifest.json"
    manifest.write_text(json.dumps({"samples": names}, indent=2))
    return manifest


class DirectoryContentDataset:
    """Content corpus read from a directory of PNG/JPEG files listed in manifest.json."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        manifest = self.directory / "manifest.json"
        if not manifest.exists():
            raise FormatError(f"missing manifest {manifest}")
        names = json.loads(manifest.read_text()).get("samples")
        if not isinstance(names, list) or not names:
            raise FormatError(f"{manifest}: manifest must list samples")
        self.names = names

    def __len__(self):
        return len(self.names)

    def __getitem__(self, index: int) -> torch.Tensor:
        path = self.directory / self.names[index]
        raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if raw is None:
            raise FormatError(f"{path}: not a readable image")
        rgb = raw[..., ::-1].astype(np.float32) / 255.0
        return torch.from_numpy(rgb.transpose(2, 0, 1).copy())
