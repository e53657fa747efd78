import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowssl.data import (
    DEFAULT_FLOW_MIX,
    DatasetMixSpec,
    DirectoryContentDataset,
    FlowSample,
    MixEntry,
    SceneSpec,
    Sprite,
    SceneDescription,
    SyntheticContentDataset,
    SyntheticFlowDataset,
    SyntheticSegDataset,
    build_mixed_dataset,
    generate_labeled_scene,
    generate_synthetic_sequence,
    load_flo,
    load_kitti_flow_png,
    render_scene,
    save_flo,
    save_kitti_flow_png,
    write_content_corpus,
)
from flowssl.errors import FormatError, TruncatedFileError
from flowssl.evaluation import endpoint_error
from flowssl.flow import warp


def single_sprite_scene(velocity=(3.0, 0.0)):
    spec = SceneSpec(height=64, width=64)
    sprite = Sprite(
        class_id=3,
        shape="rect",
        center=(32.0, 32.0),
        half=(9.0, 7.0),
        velocity=velocity,
        period=4.0,
        phases=(0.3, 1.1),
        tint=(0.9, 0.7, 0.5),
    )
    return SceneDescription(spec=spec, sprites=(sprite,), background={
        "base": (0.5, 0.45, 0.55), "angle": 0.7, "period": 20.0, "phase": 0.2, "amp": 0.08,
    })


class TestSyntheticScenes:
    def test_single_sprite_flow_values(self):
        sample = render_scene(single_sprite_scene(velocity=(3.0, 0.0)))
        # sprite interior at the anchor position in frame_t1
        assert float(sample.gt_flow[0, 32, 32]) == 3.0
        assert float(sample.gt_flow[1, 32, 32]) == 0.0
        assert float(sample.gt_flow[0, 2, 2]) == 0.0  # background
        assert float(sample.gt_flow[1, 2, 2]) == 0.0

    def test_zero_velocity_frames_identical(self):
        sample = render_scene(single_sprite_scene(velocity=(0.0, 0.0)))
        assert torch.equal(sample.frame_t, sample.frame_t1)
        assert torch.equal(sample.gt_flow, torch.zeros_like(sample.gt_flow))

    def test_gt_flow_self_epe_zero(self):
        sample = generate_synthetic_sequence(SceneSpec(), rng_seed=9)
        metrics = endpoint_error(sample.gt_flow, sample.gt_flow, sample.gt_valid, sample.gt_occlusion)
        assert metrics.epe_all == 0.0

    def test_warp_check_on_non_occluded_pixels(self):
        for seed in range(4):
            sample = generate_synthetic_sequence(SceneSpec(), rng_seed=seed)
            recon = warp(sample.frame_t, sample.gt_flow)
            keep = ~sample.gt_occlusion
            err = (recon - sample.frame_t1).abs().mean(0)[keep]
            assert float(err.mean()) < 2.0 / 255.0

    def test_determinism(self):
        a = generate_synthetic_sequence(SceneSpec(), rng_seed=77)
        b = generate_synthetic_sequence(SceneSpec(), rng_seed=77)
        assert torch.equal(a.frame_t, b.frame_t)
        assert torch.equal(a.gt_flow, b.gt_flow)
        assert torch.equal(a.gt_occlusion, b.gt_occlusion)

    def test_occlusion_marks_exited_pixels(self):
        # sprite whose source position is far outside the frame
        sample = render_scene(single_sprite_scene(velocity=(60.0, 0.0)))
        sprite_px = (sample.gt_flow[0] == 60.0)
        assert bool(sample.gt_occlusion[sprite_px].all())

    def test_labeled_scene_classes(self):
        img, labels = generate_labeled_scene(SceneSpec(), rng_seed=3)
        assert img.shape == (3, 64, 64)
        assert labels.shape == (64, 64)
        assert int(labels.max()) <= 3 and int(labels.min()) >= 0

    def test_datasets_index_and_length(self):
        spec = SceneSpec()
        flow_ds = SyntheticFlowDataset(spec, 5, seed=1)
        content_ds = SyntheticContentDataset(spec, 4, seed=2)
        seg_ds = SyntheticSegDataset(spec, 3, seed=3)
        assert len(flow_ds) == 5 and len(content_ds) == 4 and len(seg_ds) == 3
        assert isinstance(flow_ds[0], FlowSample)
        assert content_ds[1].shape == (3, 64, 64)
        with pytest.raises(IndexError):
            flow_ds[5]


class TestFloFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        flow = torch.randn(2, 4, 6)
        path = tmp_path / "a.flo"
        save_flo(flow, path)
        assert torch.equal(load_flo(path), flow)

    def test_known_byte_layout(self, tmp_path):
        flow = torch.tensor([[[1.5]], [[-2.25]]])
        path = tmp_path / "b.flo"
        save_flo(flow, path)
        raw = path.read_bytes()
        assert len(raw) == 20
        expected = struct.pack("<fii", 202021.25, 1, 1) + struct.pack("<ff", 1.5, -2.25)
        assert raw == expected

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.flo"
        path.write_bytes(struct.pack("<fii", 123.0, 1, 1) + b"\x00" * 8)
        with pytest.raises(FormatError):
            load_flo(path)

    def test_truncated_rejected(self, tmp_path):
        path = tmp_path / "short.flo"
        path.write_bytes(struct.pack("<fii", 202021.25, 4, 4) + b"\x00" * 10)
        with pytest.raises(TruncatedFileError):
            load_flo(path)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_roundtrip_property(self, seed):
        import tempfile

        g = torch.Generator().manual_seed(seed)
        flow = torch.randn(2, 3, 5, generator=g)
        with tempfile.TemporaryDirectory() as d:
            path = f"{d}/{seed}.flo"
            save_flo(flow, path)
            assert torch.equal(load_flo(path), flow)


class TestKittiPng:
    def test_zero_encoding(self, tmp_path):
        flow = torch.zeros(2, 2, 2)
        path = tmp_path / "k.png"
        save_kitti_flow_png(flow, path)
        loaded, valid = load_kitti_flow_png(path)
        assert torch.equal(loaded, flow)
        assert valid.all()

    def test_format_arithmetic(self, tmp_path):
        import cv2

        enc = np.zeros((1, 1, 3), dtype=np.uint16)
        enc[0, 0] = (32768 + 64, 32768, 1)  # RGB order
        cv2.imwrite(str(tmp_path / "px.png"), enc[..., ::-1])
        flow, valid = load_kitti_flow_png(tmp_path / "px.png")
        assert float(flow[0, 0, 0]) == 1.0
        assert float(flow[1, 0, 0]) == 0.0
        assert bool(valid[0, 0])

    def test_roundtrip_bit_exact(self, tmp_path):
        g = torch.Generator().manual_seed(5)
        flow = torch.round(torch.randn(2, 6, 7, generator=g) * 640) / 64  # quantized values
        valid = torch.rand(6, 7, generator=g) > 0.3
        path = tmp_path / "rt.png"
        save_kitti_flow_png(flow, path, valid)
        loaded, lvalid = load_kitti_flow_png(path)
        assert torch.equal(loaded, flow)
        assert torch.equal(lvalid, valid)

    def test_8bit_rejected(self, tmp_path):
        import cv2

        cv2.imwrite(str(tmp_path / "8bit.png"), np.zeros((2, 2, 3), dtype=np.uint8))
        with pytest.raises(FormatError):
            load_kitti_flow_png(tmp_path / "8bit.png")

    def test_validity_zero_masks_epe(self, tmp_path):
        flow = torch.ones(2, 2, 2)
        valid = torch.tensor([[True, False], [True, True]])
        path = tmp_path / "v.png"
        save_kitti_flow_png(flow, path, valid)
        loaded, lvalid = load_kitti_flow_png(path)
        bad_pred = loaded.clone()
        bad_pred[:, 0, 1] = 999.0  # error only on the invalid pixel
        metrics = endpoint_error(bad_pred, loaded, lvalid)
        assert metrics.epe_all == 0.0


class TestMixing:
    def test_default_mix_effective_entries(self):
        k15 = next(e for e in DEFAULT_FLOW_MIX.entries if e.name == "kitti2015_train")
        assert k15.size * k15.repetition == 20000
        assert DEFAULT_FLOW_MIX.effective_length == sum(
            e.size * e.repetition for e in DEFAULT_FLOW_MIX.entries
        )

    def test_single_dataset_epoch_visits_all(self):
        spec = DatasetMixSpec(entries=(MixEntry("only", 10, 1),))
        sampler = build_mixed_dataset(spec, rng_seed=0)
        visited = sorted(idx for _, idx in sampler.epoch())
        assert visited == list(range(10))

    def test_repetition_ratio_concentration(self):
        spec = DatasetMixSpec(entries=(MixEntry("a", 10, 9), MixEntry("b", 10, 1)))
        sampler = build_mixed_dataset(spec, rng_seed=1)
        draws = sampler.draw_batch(100_000)
        frac_a = sum(1 for name, _ in draws if name == "a") / len(draws)
        assert abs(frac_a - 0.9) < 0.02

    def test_seeded_determinism(self):
        spec = DatasetMixSpec(entries=(MixEntry("a", 7, 2), MixEntry("b", 3, 5)))
        d1 = build_mixed_dataset(spec, rng_seed=42).draw_batch(50)
        d2 = build_mixed_dataset(spec, rng_seed=42).draw_batch(50)
        assert d1 == d2


class TestContentCorpusIO:
    def test_write_and_read_directory_corpus(self, tmp_path):
        ds = SyntheticContentDataset(SceneSpec(), 3, seed=11)
        write_content_corpus(tmp_path / "corpus", ds)
        loaded = DirectoryContentDataset(tmp_path / "corpus")
        assert len(loaded) == 3
        img = loaded[0]
        assert img.shape == (3, 64, 64)
        # 8-bit quantization bound
        assert float((img - ds[0]).abs().max()) <= 1.0 / 255.0 + 1e-6

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(FormatError):
            DirectoryContentDataset(tmp_path)
