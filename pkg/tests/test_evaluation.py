import json
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from flowssl.data import SceneSpec, SyntheticSegDataset
from flowssl.evaluation import (
    FlowMetrics,
    ProbeConfig,
    endpoint_error,
    flow_to_color,
    linear_probe_segmentation,
    mean_iou,
    wheel_color,
    write_compare_report,
    zero_flow_baseline,
)


class TestEndpointError:
    def test_exact_prediction(self):
        gt = torch.randn(2, 8, 8)
        m = endpoint_error(gt.clone(), gt)
        assert m.epe_all == 0.0 and m.f1 == 0.0

    def test_three_four_five(self):
        gt = torch.randn(2, 6, 6)
        pred = gt.clone()
        pred[0] += 3.0
        pred[1] += 4.0
        m = endpoint_error(pred, gt)
        assert m.epe_all == 5.0

    def test_f1_two_threshold_rule(self):
        gt = torch.zeros(2, 1, 2)
        gt[0, 0, 0] = 100.0  # large-magnitude gt: 4px error is not an outlier
        gt[0, 0, 1] = 10.0  # small-magnitude gt: 4px error is an outlier
        pred = gt.clone()
        pred[1, 0, 0] = 4.0
        pred[1, 0, 1] = 4.0
        m = endpoint_error(pred, gt)
        assert m.f1 == pytest.approx(50.0)

    def test_occlusion_split_and_bounds(self):
        gt = torch.zeros(2, 4, 4)
        pred = torch.zeros(2, 4, 4)
        pred[0, :2] = 1.0  # 1px error on the top half
        occ = torch.zeros(4, 4, dtype=torch.bool)
        occ[:2] = True
        m = endpoint_error(pred, gt, occ_mask=occ)
        assert m.epe_occ == pytest.approx(1.0)
        assert m.epe_noc == pytest.approx(0.0)
        assert min(m.epe_noc, m.epe_occ) <= m.epe_all <= max(m.epe_noc, m.epe_occ)

    def test_empty_valid_mask_yields_empty_metrics(self):
        gt = torch.zeros(2, 3, 3)
        m = endpoint_error(gt, gt, valid=torch.zeros(3, 3, dtype=torch.bool))
        assert m == FlowMetrics.empty()
        assert m.epe_all is None

    def test_f1_ignores_occlusion_mask(self):
        g = torch.Generator().manual_seed(3)
        gt = torch.randn(2, 5, 5, generator=g) * 10
        pred = gt + torch.randn(2, 5, 5, generator=g) * 4
        occ_a = torch.zeros(5, 5, dtype=torch.bool)
        occ_b = torch.ones(5, 5, dtype=torch.bool)
        assert endpoint_error(pred, gt, occ_mask=occ_a).f1 == endpoint_error(
            pred, gt, occ_mask=occ_b
        ).f1

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0.25, 4.0))
    def test_epe_homogeneity(self, seed, k):
        g = torch.Generator().manual_seed(seed)
        gt = torch.randn(2, 4, 4, generator=g)
        pred = gt + torch.randn(2, 4, 4, generator=g)
        base = endpoint_error(pred, gt).epe_all
        scaled = endpoint_error(pred * k, gt * k).epe_all
        assert scaled == pytest.approx(k * base, rel=1e-5)


class TestFlowColor:
    def test_zero_flow_is_white(self):
        img = flow_to_color(torch.zeros(2, 4, 4), max_magnitude=1.0)
        assert torch.equal(img, torch.ones(3, 4, 4))

    def test_max_magnitude_direction_color(self):
        m = 7.0
        flow = torch.zeros(2, 2, 2)
        flow[0] = m
        img = flow_to_color(flow, max_magnitude=m)
        # direction (m, 0): atan2(-0, -m) = -pi -> wheel origin at full saturation
        expected = wheel_color(torch.tensor(-math.pi), torch.tensor(1.0))
        assert torch.allclose(img[:, 0, 0], expected, atol=1e-6)
        # independently derived wheel origin: pure red
        assert torch.allclose(expected, torch.tensor([1.0, 0.0, 0.0]), atol=1e-6)

    def test_rotational_equivariance_against_wheel_oracle(self):
        h = w = 9
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=torch.float32) - 4,
            torch.arange(w, dtype=torch.float32) - 4,
            indexing="ij",
        )
        vortex = torch.stack([-ys, xs])  # 90-degree rotation of the radial field
        mmax = float(torch.sqrt((vortex**2).sum(0)).max())
        img = flow_to_color(vortex, max_magnitude=mmax)
        u, v = vortex[0], vortex[1]
        angle = torch.atan2(-v, -u)
        rad = torch.sqrt(u**2 + v**2) / mmax
        oracle = wheel_color(angle, rad).permute(2, 0, 1)
        assert torch.allclose(img, oracle, atol=1e-6)
        # rotating the field spatially and in vector space shifts every hue by 90 degrees
        rot_field = torch.stack([-v.rot90(1, (0, 1)), u.rot90(1, (0, 1))])
        rot_img = flow_to_color(rot_field, max_magnitude=mmax)
        shifted = wheel_color(
            torch.atan2(-rot_field[1], -rot_field[0]),
            torch.sqrt((rot_field**2).sum(0)) / mmax,
        ).permute(2, 0, 1)
        assert torch.allclose(rot_img, shifted, atol=1e-6)

    def test_injective_for_distinct_directions(self):
        angles = torch.linspace(0, 2 * math.pi * 53 / 54, 54)
        colors = wheel_color(angles, torch.ones(54))
        flat = {tuple(round(float(c), 4) for c in colors[i]) for i in range(54)}
        assert len(flat) == 54


class TestCompareReport:
    def test_writes_panels_and_json(self, tmp_path):
        from flowssl.data import generate_synthetic_sequence

        samples = [generate_synthetic_sequence(SceneSpec(), s) for s in range(2)]
        preds = [s.gt_flow.clone() for s in samples]
        report = write_compare_report(tmp_path, samples, preds)
        assert (tmp_path / "compare_0000.png").exists()
        data = json.loads((tmp_path / "compare.json").read_text())
        assert data["samples"][0]["epe_all"] == 0.0
        assert report["samples"][1]["epe_all"] == 0.0


class TestLinearProbe:
    def test_one_hot_oracle_reaches_perfect_miou(self):
        spec = SceneSpec()
        ds = SyntheticSegDataset(spec, 8, seed=5)

        def one_hot_features(image):
            # oracle features built from the ground-truth labels at stride 2
            idx = [i for i in range(len(ds)) if torch.equal(ds[i][0], image)]
            label = ds[idx[0]][1]
            lab2 = label[::2, ::2]
            return torch.nn.functional.one_hot(lab2, spec.num_classes).permute(2, 0, 1).float()

        miou = linear_probe_segmentation(one_hot_features, ds, spec.num_classes)
        assert miou == 1.0

    def test_probe_deterministic(self):
        spec = SceneSpec()
        ds = SyntheticSegDataset(spec, 6, seed=7)

        def raw_features(image):
            return image[:, ::2, ::2]

        cfg = ProbeConfig(epochs=20, seed=3)
        a = linear_probe_segmentation(raw_features, ds, spec.num_classes, cfg)
        b = linear_probe_segmentation(raw_features, ds, spec.num_classes, cfg)
        assert a == b

    def test_mean_iou_ignores_absent_classes(self):
        pred = torch.zeros(4, 4, dtype=torch.long)
        target = torch.zeros(4, 4, dtype=torch.long)
        assert mean_iou(pred, target, num_classes=4) == 1.0


def test_zero_flow_baseline_matches_direct_mean():
    from flowssl.data import generate_synthetic_sequence

    samples = [generate_synthetic_sequence(SceneSpec(), s) for s in range(3)]
    base = zero_flow_baseline(samples)
    direct = torch.cat([torch.sqrt((s.gt_flow**2).sum(0)).reshape(-1) for s in samples])
    assert base == pytest.approx(float(direct.mean()), rel=1e-6)
