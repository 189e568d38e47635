import math

import numpy as np
import pytest

from stereobev.boxes import BevBox, rotated_iou
from stereobev.errors import NoGroundTruthError
from stereobev.evaluation import (
    GroundTruthBox,
    ap_table,
    assign_difficulty,
    average_precision,
    match_detections,
)


def gt_at(u, v, w=2.0, h=4.0, theta=0.0, difficulty=""):
    return GroundTruthBox(box=BevBox(u, v, w, h, theta), difficulty=difficulty)


def brute_force_ap(frames, iou_threshold, difficulty, points):
    """Independent AP: explicit greedy matching loops and stepwise interpolation."""
    rank = {"easy": 0, "moderate": 1, "hard": 2, "ignored": 3}
    target = rank[difficulty]
    pooled = []
    total_gt = 0
    for dets, gts in frames:
        eligible = [g for g in gts if rank[g.difficulty] <= target]
        ignored = [g for g in gts if rank[g.difficulty] > target]
        total_gt += len(eligible)
        taken = [False] * len(eligible)
        for det in sorted(dets, key=lambda d: (-d.score, d.u, d.v)):
            ious = [
                rotated_iou(det, g.box) if not taken[j] else -1.0 for j, g in enumerate(eligible)
            ]
            best = max(range(len(ious)), key=lambda j: ious[j]) if ious else -1
            if best >= 0 and ious[best] >= iou_threshold:
                taken[best] = True
                pooled.append((det.score, 1))
            elif any(rotated_iou(det, g.box) >= iou_threshold for g in ignored):
                continue
            else:
                pooled.append((det.score, 0))
    assert total_gt > 0
    pooled.sort(key=lambda t: -t[0])
    tp = fp = 0
    curve = []  # (recall, precision) after each detection
    for _, hit in pooled:
        tp += hit
        fp += 1 - hit
        curve.append((tp / total_gt, tp / (tp + fp)))
    ap = 0.0
    for r in points:
        best = 0.0
        for recall, precision in curve:
            if recall >= r - 1e-12 and precision > best:
                best = precision
        ap += best
    return ap / len(points)


class TestDifficulty:
    def test_easy(self):
        assert assign_difficulty(50, 0, 0.0) == "easy"

    def test_moderate(self):
        assert assign_difficulty(30, 1, 0.2) == "moderate"

    def test_hard(self):
        assert assign_difficulty(26, 2, 0.45) == "hard"

    def test_ignored(self):
        assert assign_difficulty(10, 0, 0.0) == "ignored"
        assert assign_difficulty(50, 3, 0.0) == "ignored"

    def test_derivation_in_constructor(self):
        gt = GroundTruthBox(box=BevBox(0, 0, 1, 1), image_bbox_height=45, occlusion=0, truncation=0.1)
        assert gt.difficulty == "easy"


class TestMatching:
    def test_perfect_detections_all_tp(self):
        gts = [gt_at(0, 10), gt_at(5, 20), gt_at(-5, 30)]
        dets = [BevBox(g.box.u, g.box.v, g.box.w, g.box.h, score=0.9) for g in gts]
        result = match_detections(dets, gts, 0.5, "hard")
        assert result.tp.all() and not result.fp.any()

    def test_duplicate_detection_one_tp_one_fp(self):
        gts = [gt_at(0, 10)]
        dets = [BevBox(0, 10, 2, 4, score=0.9), BevBox(0.1, 10, 2, 4, score=0.8)]
        result = match_detections(dets, gts, 0.5, "hard")
        assert result.tp.tolist() == [True, False]
        assert result.fp.tolist() == [False, True]

    def test_ignored_matches_are_neither(self):
        gts = [GroundTruthBox(box=BevBox(0, 10, 2, 4), difficulty="ignored")]
        dets = [BevBox(0, 10, 2, 4, score=0.9)]
        result = match_detections(dets, gts, 0.5, "moderate")
        assert not result.tp.any() and not result.fp.any()

    def test_matches_brute_force_on_random_scenes(self):
        rng = np.random.default_rng(0)
        rank = {"easy": 0, "moderate": 1, "hard": 2, "ignored": 3}
        for trial in range(30):
            gts = [
                GroundTruthBox(
                    box=BevBox(rng.uniform(-20, 20), rng.uniform(5, 40), 2.0, 4.0, rng.uniform(-3, 3)),
                    image_bbox_height=float(rng.choice([50, 30, 26, 10])),
                    occlusion=int(rng.integers(0, 3)),
                    truncation=float(rng.uniform(0, 0.5)),
                )
                for _ in range(rng.integers(1, 6))
            ]
            dets = []
            for g in gts:
                if rng.random() < 0.8:
                    dets.append(
                        BevBox(
                            g.box.u + rng.normal(0, 0.5),
                            g.box.v + rng.normal(0, 0.5),
                            2.0,
                            4.0,
                            g.box.theta,
                            score=float(rng.uniform(0.2, 1.0)),
                        )
                    )
            for _ in range(rng.integers(0, 3)):
                dets.append(BevBox(rng.uniform(-20, 20), rng.uniform(5, 40), 2, 4, score=float(rng.uniform())))
            difficulty = ["easy", "moderate", "hard"][trial % 3]
            result = match_detections(dets, gts, 0.5, difficulty)
            # independent greedy reimplementation
            eligible = [g for g in gts if rank[g.difficulty] <= rank[difficulty]]
            ignored = [g for g in gts if rank[g.difficulty] > rank[difficulty]]
            taken = [False] * len(eligible)
            exp_tp, exp_fp = [], []
            for det in sorted(dets, key=lambda d: (-d.score, d.u, d.v)):
                best_j, best_iou = -1, 0.0
                for j, g in enumerate(eligible):
                    if taken[j]:
                        continue
                    iou = rotated_iou(det, g.box)
                    if iou > best_iou:
                        best_iou, best_j = iou, j
                if best_j >= 0 and best_iou >= 0.5:
                    taken[best_j] = True
                    exp_tp.append(True)
                    exp_fp.append(False)
                elif any(rotated_iou(det, g.box) >= 0.5 for g in ignored):
                    exp_tp.append(False)
                    exp_fp.append(False)
                else:
                    exp_tp.append(False)
                    exp_fp.append(True)
            assert result.tp.tolist() == exp_tp
            assert result.fp.tolist() == exp_fp


class TestAveragePrecision:
    def test_perfect_detector_is_one(self):
        frames = []
        for v in (10.0, 20.0):
            gts = [gt_at(0, v), gt_at(5, v)]
            dets = [BevBox(g.box.u, g.box.v, g.box.w, g.box.h, score=0.9) for g in gts]
            frames.append((dets, gts))
        assert average_precision(frames, 0.5, "hard", "11_point") == 1.0
        assert average_precision(frames, 0.5, "hard", "40_point") == 1.0

    def test_no_detections_zero(self):
        frames = [([], [gt_at(0, 10)])]
        assert average_precision(frames, 0.5, "hard") == 0.0

    def test_no_ground_truth_raises(self):
        with pytest.raises(NoGroundTruthError):
            average_precision([([], [])], 0.5, "hard")

    def test_three_gt_four_det_hand_case(self):
        # det .9 hits gt1; det .8 misses; det .7 hits gt2; det .6 duplicates gt1
        # pooled: TP FP TP FP over 3 GT -> p_interp = 1 (r<=1/3), 2/3 (r<=2/3), 0
        # 11-point AP = (4*1 + 3*2/3) / 11 = 6/11
        gts = [gt_at(0, 10), gt_at(10, 10), gt_at(-10, 10)]
        dets = [
            BevBox(0, 10, 2, 4, score=0.9),
            BevBox(4, 25, 2, 4, score=0.8),
            BevBox(10, 10, 2, 4, score=0.7),
            BevBox(0.05, 10, 2, 4, score=0.6),
        ]
        frames = [(dets, gts)]
        got = average_precision(frames, 0.5, "hard", "11_point")
        assert got == pytest.approx(6.0 / 11.0, abs=1e-12)
        assert got == pytest.approx(brute_force_ap(frames, 0.5, "hard", np.linspace(0, 1, 11)), abs=1e-12)

    def test_matches_brute_force_on_random_scenes(self):
        rng = np.random.default_rng(1)
        for trial in range(25):
            frames = []
            for _ in range(rng.integers(1, 4)):
                gts = [gt_at(rng.uniform(-20, 20), rng.uniform(5, 40)) for _ in range(rng.integers(1, 4))]
                dets = []
                for g in gts:
                    if rng.random() < 0.7:
                        dets.append(
                            BevBox(
                                g.box.u + rng.normal(0, 0.8),
                                g.box.v + rng.normal(0, 0.8),
                                2.0,
                                4.0,
                                score=float(rng.uniform()),
                            )
                        )
                for _ in range(rng.integers(0, 3)):
                    dets.append(BevBox(rng.uniform(-20, 20), rng.uniform(5, 40), 2, 4, score=float(rng.uniform())))
                frames.append((dets, gts))
            for mode, pts in (("11_point", np.linspace(0, 1, 11)), ("40_point", np.arange(1, 41) / 40.0)):
                got = average_precision(frames, 0.5, "hard", mode)
                assert got == pytest.approx(brute_force_ap(frames, 0.5, "hard", pts), abs=1e-12)

    def test_low_scored_false_positive_never_raises_ap(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            gts = [gt_at(rng.uniform(-10, 10), rng.uniform(5, 30)) for _ in range(rng.integers(1, 4))]
            dets = [
                BevBox(g.box.u + rng.normal(0, 0.3), g.box.v, 2, 4, score=float(rng.uniform(0.5, 1.0)))
                for g in gts
                if rng.random() < 0.8
            ]
            frames = [(dets, gts)]
            base = average_precision(frames, 0.5, "hard")
            junk = BevBox(rng.uniform(-10, 10), rng.uniform(5, 30), 2, 4, score=0.01)
            worse = average_precision([(dets + [junk], gts)], 0.5, "hard")
            assert worse <= base + 1e-12

    def test_invariances(self):
        rng = np.random.default_rng(3)
        frames = []
        for _ in range(3):
            gts = [gt_at(rng.uniform(-10, 10), rng.uniform(5, 30)) for _ in range(2)]
            dets = [
                BevBox(g.box.u, g.box.v, 2, 4, score=float(rng.uniform(0.3, 0.9))) for g in gts
            ] + [BevBox(rng.uniform(-10, 10), rng.uniform(5, 30), 2, 4, score=float(rng.uniform()))]
            frames.append((dets, gts))
        base = average_precision(frames, 0.5, "hard")
        assert average_precision(frames[::-1], 0.5, "hard") == base
        rescaled = [
            ([BevBox(d.u, d.v, d.w, d.h, d.theta, score=0.1 + 0.5 * d.score) for d in dets], gts)
            for dets, gts in frames
        ]
        assert average_precision(rescaled, 0.5, "hard") == base

    def test_constant_curve_modes_agree(self):
        # score .9 FP then .8 TP: interpolated precision is 0.5 everywhere
        gts = [gt_at(0, 10)]
        dets = [BevBox(5, 30, 2, 4, score=0.9), BevBox(0, 10, 2, 4, score=0.8)]
        frames = [(dets, gts)]
        ap11 = average_precision(frames, 0.5, "hard", "11_point")
        ap40 = average_precision(frames, 0.5, "hard", "40_point")
        assert ap11 == ap40 == 0.5


class TestTable:
    def test_layout(self):
        gts = [gt_at(0, 10)]
        dets = [BevBox(0, 10, 2, 4, score=0.9)]
        text, csv = ap_table([(dets, gts)])
        assert "difficulty" in text and "IoU>=0.5" in text and "IoU>=0.7" in text
        lines = csv.strip().splitlines()
        assert lines[0] == "difficulty,iou_0.5,iou_0.7"
        assert lines[1].startswith("easy,")
        assert "100.00" in lines[1]
