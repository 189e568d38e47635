import math

import numpy as np
import pytest

from stereobev.boxes import BevBox, decode_boxes
from stereobev.errors import ShapeMismatchError
from stereobev.losses import (
    DetectionTargets,
    LossReport,
    bev_cell_centers,
    detection_loss,
    encode_detection_targets,
    focal,
    focal_map,
    occupancy_bce,
    smooth_l1,
    smooth_l1_map,
)
from stereobev.tensor import Tensor
from stereobev.voxelgrid import OccupancyGrid, VoxelGridSpec

GRID = VoxelGridSpec((-6.4, 6.4), (-1.0, 0.6), (2.0, 14.8), 0.2)  # 64 x 8 x 64


def make_grid(values, mask=None, spec=None):
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        mask = np.ones(values.shape, dtype=bool)
    if spec is None:
        spec = VoxelGridSpec((0, values.shape[0]), (0, values.shape[1]), (0, values.shape[2]), 1.0)
    return OccupancyGrid(values=values, fov_mask=mask, spec=spec)


class TestOccupancyBce:
    def test_uniform_half_prediction_gives_ln2(self):
        rng = np.random.default_rng(0)
        labels = (rng.uniform(size=(4, 3, 5)) > 0.5).astype(float)
        pred = make_grid(np.full((4, 3, 5), 0.5))
        label = make_grid(labels)
        assert occupancy_bce(pred, label).item() == pytest.approx(math.log(2.0), abs=1e-12)

    def test_single_voxel_hand_value(self):
        pred = make_grid(np.full((1, 1, 1), 0.9))
        label = make_grid(np.ones((1, 1, 1)))
        assert occupancy_bce(pred, label).item() == pytest.approx(-math.log(0.9), abs=1e-12)
        assert occupancy_bce(pred, label).item() == pytest.approx(0.105361, abs=1e-6)

    def test_all_masked_zero_loss_zero_grad(self):
        mask = np.zeros((2, 2, 2), dtype=bool)
        values = Tensor(np.full((2, 2, 2), 0.3), requires_grad=True)
        pred = OccupancyGrid(values=values, fov_mask=mask, spec=make_grid(np.zeros((2, 2, 2))).spec)
        label = make_grid(np.ones((2, 2, 2)), mask=mask)
        loss = occupancy_bce(pred, label)
        assert loss.item() == 0.0
        loss.backward()
        assert np.array_equal(values.grad, np.zeros((2, 2, 2)))

    def test_gradient_at_half_for_positive_label(self):
        values = Tensor(np.full((1, 1, 1), 0.5), requires_grad=True)
        pred = OccupancyGrid(values=values, fov_mask=np.ones((1, 1, 1), bool), spec=make_grid(np.zeros((1, 1, 1))).spec)
        label = make_grid(np.ones((1, 1, 1)))
        occupancy_bce(pred, label).backward()
        assert values.grad[0, 0, 0] == pytest.approx(-2.0, abs=1e-9)

    def test_masked_voxels_excluded_from_mean(self):
        mask = np.zeros((1, 1, 2), dtype=bool)
        mask[0, 0, 0] = True
        pred = make_grid(np.array([[[0.9, 0.01]]]), mask=mask)
        label = make_grid(np.array([[[1.0, 1.0]]]), mask=mask)
        assert occupancy_bce(pred, label).item() == pytest.approx(-math.log(0.9), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            occupancy_bce(make_grid(np.zeros((2, 2, 2))), make_grid(np.zeros((2, 2, 3))))

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        pred = make_grid(rng.uniform(size=(3, 3, 3)))
        label = make_grid((rng.uniform(size=(3, 3, 3)) > 0.7).astype(float))
        assert occupancy_bce(pred, label).item() >= 0.0


class TestFocal:
    def test_reduces_to_half_bce(self):
        rng = np.random.default_rng(2)
        for p, c in zip(rng.uniform(0.01, 0.99, 10_000), rng.integers(0, 2, 10_000)):
            bce = -math.log(p) if c == 1 else -math.log(1.0 - p)
            assert abs(focal(p, int(c), alpha=0.5, gamma=0.0) - 0.5 * bce) < 1e-12

    def test_hand_value(self):
        # 0.25 * 0.25 * ln 2
        expected = 0.25 * 0.25 * math.log(2.0)
        assert focal(0.5, 1, alpha=0.25, gamma=2.0) == pytest.approx(expected, abs=1e-12)
        assert focal(0.5, 1) == pytest.approx(0.043322, abs=1e-6)

    def test_perfect_positive_vanishes(self):
        assert focal(1.0 - 1e-9, 1) < 1e-13

    def test_map_matches_scalar(self):
        rng = np.random.default_rng(3)
        probs = rng.uniform(0.01, 0.99, size=(4, 5))
        targets = rng.integers(0, 2, size=(4, 5)).astype(float)
        got = focal_map(Tensor(probs), targets).data
        for i in range(4):
            for j in range(5):
                assert got[i, j] == pytest.approx(focal(probs[i, j], int(targets[i, j])), abs=1e-12)


class TestSmoothL1:
    def test_zero(self):
        assert smooth_l1(0.0, "paper_literal") == 0.0
        assert smooth_l1(0.0, "huber_beta_0_5") == 0.0

    def test_paper_branch_values(self):
        assert smooth_l1(0.4, "paper_literal") == pytest.approx(0.2, abs=0)
        assert smooth_l1(2.0, "paper_literal") == pytest.approx(1.5, abs=0)

    def test_paper_discontinuity_at_half(self):
        below = smooth_l1(0.5 - 1e-12, "paper_literal")
        at = smooth_l1(0.5, "paper_literal")
        assert below == pytest.approx(0.25, abs=1e-9)
        assert at == 0.0

    def test_huber_continuous_with_matched_slopes(self):
        assert smooth_l1(0.5, "huber_beta_0_5") == pytest.approx(0.25, abs=0)
        assert smooth_l1(0.5 - 1e-9, "huber_beta_0_5") == pytest.approx(0.25, abs=1e-8)
        h = 1e-7
        left = (smooth_l1(0.5, "huber_beta_0_5") - smooth_l1(0.5 - h, "huber_beta_0_5")) / h
        right = (smooth_l1(0.5 + h, "huber_beta_0_5") - smooth_l1(0.5, "huber_beta_0_5")) / h
        assert left == pytest.approx(1.0, abs=1e-5)
        assert right == pytest.approx(1.0, abs=1e-5)

    def test_map_matches_scalar(self):
        xs = np.array([-2.0, -0.7, -0.3, 0.0, 0.2, 0.49, 0.51, 1.5])
        for mode in ("paper_literal", "huber_beta_0_5"):
            got = smooth_l1_map(Tensor(xs), mode).data
            assert np.allclose(got, [smooth_l1(x, mode) for x in xs], atol=1e-15)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            smooth_l1(1.0, "l2")


class TestTargetCodec:
    def test_box_on_cell_center_has_zero_offset(self):
        cell_u, cell_v = bev_cell_centers(GRID, 4)
        box = BevBox(u=cell_u[8, 12], v=cell_v[8, 12], w=1.0, h=2.0, theta=0.0)
        targets = encode_detection_targets([box], GRID, stride=4)
        assert targets.positive[8, 12]
        assert targets.regression[0, 8, 12] == 0.0
        assert targets.regression[1, 8, 12] == 0.0
        assert targets.regression[4, 8, 12] == 0.0  # sin
        assert targets.regression[5, 8, 12] == 1.0  # cos

    def test_encode_decode_round_trip(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            boxes = [
                BevBox(
                    u=rng.uniform(-4, 4),
                    v=rng.uniform(4, 12),
                    w=rng.uniform(1.5, 3.0),
                    h=rng.uniform(2.0, 4.0),
                    theta=rng.uniform(-math.pi, math.pi),
                )
                for _ in range(3)
            ]
            targets = encode_detection_targets(boxes, GRID, stride=4)
            logits = np.where(targets.class_map > 0, 60.0, -60.0)
            decoded = decode_boxes(logits, targets.regression, GRID, stride=4, score_threshold=0.5)
            assert decoded, "every box should cover at least one cell center"
            recovered = set()
            for det in decoded:
                best = min(range(len(boxes)), key=lambda i: (boxes[i].u - det.u) ** 2 + (boxes[i].v - det.v) ** 2)
                gt = boxes[best]
                assert det.u == pytest.approx(gt.u, abs=1e-9)
                assert det.v == pytest.approx(gt.v, abs=1e-9)
                assert det.w == pytest.approx(gt.w, abs=1e-9)
                assert det.h == pytest.approx(gt.h, abs=1e-9)
                assert abs(math.remainder(det.theta - gt.theta, 2 * math.pi)) < 1e-9
                recovered.add(best)
            assert recovered == set(range(len(boxes)))


class TestDetectionLoss:
    def _random_inputs(self, seed, boxes):
        rng = np.random.default_rng(seed)
        targets = encode_detection_targets(boxes, GRID, stride=4)
        xs, zs = targets.class_map.shape
        cls = Tensor(rng.normal(size=(1, xs, zs)))
        reg = Tensor(rng.normal(size=(6, xs, zs)))
        return cls, reg, targets

    def test_no_ground_truth_regression_is_zero(self):
        cls, reg, targets = self._random_inputs(5, [])
        total, report = detection_loss(cls, reg, targets)
        assert report.regression_loss == 0.0
        assert report.focal_loss > 0.0
        assert report.n_positive == 0

    def test_perfect_predictions_near_zero(self):
        boxes = [BevBox(0.0, 8.0, 2.0, 3.0, 0.4)]
        targets = encode_detection_targets(boxes, GRID, stride=4)
        logits = Tensor(np.where(targets.class_map > 0, 40.0, -40.0)[None])
        reg = Tensor(targets.regression.copy())
        total, report = detection_loss(logits, reg, targets)
        assert total.item() < 1e-3
        assert report.regression_loss == 0.0

    def test_report_additivity(self):
        boxes = [BevBox(1.0, 7.0, 2.0, 3.0, 0.2), BevBox(-2.0, 10.0, 1.5, 2.5, -1.0)]
        cls, reg, targets = self._random_inputs(6, boxes)
        total, report = detection_loss(cls, reg, targets)
        assert report.detection_loss == pytest.approx(report.focal_loss + report.regression_loss, abs=0)
        assert total.item() == pytest.approx(report.detection_loss, abs=1e-12)

    def test_invariant_to_box_order(self):
        boxes = [
            BevBox(1.0, 7.0, 2.0, 3.0, 0.2),
            BevBox(-2.0, 10.0, 1.5, 2.5, -1.0),
            BevBox(3.0, 12.0, 2.0, 2.0, 1.2),
        ]
        cls, reg, _ = self._random_inputs(7, boxes)
        t1 = encode_detection_targets(boxes, GRID, 4)
        t2 = encode_detection_targets(boxes[::-1], GRID, 4)
        l1, _ = detection_loss(cls, reg, t1)
        l2, _ = detection_loss(cls, reg, t2)
        assert l1.item() == l2.item()

    def test_report_defaults(self):
        report = LossReport()
        assert report.detection_loss == 0.0
