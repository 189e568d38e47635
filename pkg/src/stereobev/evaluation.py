"""BEV detection scoring: difficulty buckets, greedy matching, average precision.

Difficulty follows the public benchmark convention (image-box height 40/25 px,
occlusion 0/1/2, truncation 0.15/0.30/0.50) and is cumulative: evaluating
"hard" includes easy and moderate ground truth. Matched ignored boxes count
neither as hits nor as false positives.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .boxes import BevBox, rotated_iou
from .errors import NoGroundTruthError

DIFFICULTIES = ("easy", "moderate", "hard")
_RANK = {"easy": 0, "moderate": 1, "hard": 2, "ignored": 3}


def assign_difficulty(image_bbox_height: float, occlusion: int, truncation: float) -> str:
    if image_bbox_height >= 40 and occlusion <= 0 and truncation <= 0.15:
        return "easy"
    if image_bbox_height >= 25 and occlusion <= 1 and truncation <= 0.30:
        return "moderate"
    if image_bbox_height >= 25 and occlusion <= 2 and truncation <= 0.50:
        return "hard"
    return "ignored"


@dataclass(frozen=True)
class GroundTruthBox:
    box: BevBox
    image_bbox_height: float = 100.0
    occlusion: int = 0
    truncation: float = 0.0
    difficulty: str = ""

    def __post_init__(self):
        if not self.difficulty:
            object.__setattr__(
                self,
                "difficulty",
                assign_difficulty(self.image_bbox_height, self.occlusion, self.truncation),
            )
        if self.difficulty not in _RANK:
            raise ValueError(f"unknown difficulty {self.difficulty!r}")


@dataclass
class MatchResult:
    """Per-detection flags aligned to score-descending order."""

    scores: np.ndarray
    tp: np.ndarray
    fp: np.ndarray
    gt_matched: np.ndarray


def match_detections(
    dets: list[BevBox],
    gts: list[GroundTruthBox],
    iou_threshold: float,
    difficulty: str = "moderate",
) -> MatchResult:
    """Greedy matching in score order against the difficulty's ground truth.

    Each detection claims the highest-IoU unmatched eligible box when the
    overlap reaches the threshold; duplicates of a claimed box are false
    positives; hits on out-of-bucket or ignored boxes are discarded outright.
    """
    rank = _RANK[difficulty]
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].u, dets[i].v))
    eligible = [g for g in gts if _RANK[g.difficulty] <= rank]
    ignored = [g for g in gts if _RANK[g.difficulty] > rank]
    matched = np.zeros(len(eligible), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    fp = np.zeros(len(dets), dtype=bool)
    scores = np.array([dets[i].score for i in order], dtype=np.float64)
    for pos, i in enumerate(order):
        det = dets[i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(eligible):
            if matched[j]:
                continue
            iou = rotated_iou(det, gt.box)
            if iou > best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0 and best_iou >= iou_threshold:
            matched[best_j] = True
            tp[pos] = True
            continue
        if any(rotated_iou(det, g.box) >= iou_threshold for g in ignored):
            continue  # neither hit nor false positive
        fp[pos] = True
    return MatchResult(scores=scores, tp=tp, fp=fp, gt_matched=matched)


def _recall_points(mode: str) -> np.ndarray:
    if mode == "11_point":
        return np.linspace(0.0, 1.0, 11)
    if mode == "40_point":
        return np.arange(1, 41) / 40.0
    raise ValueError(f"unknown AP mode {mode!r}")


def average_precision(
    frames: list[tuple[list[BevBox], list[GroundTruthBox]]],
    iou_threshold: float,
    difficulty: str = "moderate",
    mode: str = "11_point",
) -> float:
    """Interpolated AP over a pooled cross-frame precision/recall curve."""
    rank = _RANK[difficulty]
    total_gt = sum(1 for _, gts in frames for g in gts if _RANK[g.difficulty] <= rank)
    if total_gt == 0:
        raise NoGroundTruthError(f"no {difficulty} ground truth in {len(frames)} frames")
    scores, tps, fps = [], [], []
    for dets, gts in frames:
        result = match_detections(dets, gts, iou_threshold, difficulty)
        keep = result.tp | result.fp
        scores.append(result.scores[keep])
        tps.append(result.tp[keep])
        fps.append(result.fp[keep])
    scores = np.concatenate(scores) if scores else np.empty(0)
    tps = np.concatenate(tps) if tps else np.empty(0, bool)
    fps = np.concatenate(fps) if fps else np.empty(0, bool)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp_cum = np.cumsum(tps[order])
    fp_cum = np.cumsum(fps[order])
    recall = tp_cum / total_gt
    precision = tp_cum / np.maximum(1, tp_cum + fp_cum)
    ap = 0.0
    points = _recall_points(mode)
    for r in points:
        achieved = precision[recall >= r - 1e-12]
        ap += float(achieved.max()) if achieved.size else 0.0
    return ap / len(points)


def ap_table(
    frames,
    iou_thresholds=(0.5, 0.7),
    difficulties=DIFFICULTIES,
    mode: str = "11_point",
) -> tuple[str, str]:
    """(text, csv) result tables: rows = difficulty, columns = IoU threshold,
    cells = AP percent with two decimals."""
    cells: dict[tuple[str, float], str] = {}
    for difficulty in difficulties:
        for thr in iou_thresholds:
            try:
                ap = average_precision(frames, thr, difficulty, mode)
                cells[(difficulty, thr)] = f"{100.0 * ap:.2f}"
            except NoGroundTruthError:
                cells[(difficulty, thr)] = "--"
    headers = [f"IoU>={thr:g}" for thr in iou_thresholds]
    width = max(10, *(len(h) for h in headers))
    text = io.StringIO()
    text.write(f"{'difficulty':<12}" + "".join(f"{h:>{width}}" for h in headers) + "\n")
    for difficulty in difficulties:
        row = "".join(f"{cells[(difficulty, thr)]:>{width}}" for thr in iou_thresholds)
        text.write(f"{difficulty:<12}{row}\n")
    csv = io.StringIO()
    csv.write("difficulty," + ",".join(f"iou_{thr:g}" for thr in iou_thresholds) + "\n")
    for difficulty in difficulties:
        csv.write(difficulty + "," + ",".join(cells[(difficulty, thr)] for thr in iou_thresholds) + "\n")
    return text.getvalue(), csv.getvalue()
