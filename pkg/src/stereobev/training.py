"""Stage-wise training: backbone + occupancy first, then the frozen-backbone
detection header. SGD with momentum (the optimizer itself is a desk-scale
choice recorded in the checkpoint's sidecar metadata).

Stage two never updates backbone parameters; since the backbone is frozen and
dropout is inactive outside stage one's forward passes, the detector's input
features are cached once per sample and reused every step.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .boxes import BevBox, decode_boxes, nms
from .errors import DivergedLossError, EmptyDatasetError, OutOfRangeError
from .losses import LossReport, detection_loss, encode_detection_targets, occupancy_bce
from .networks import DETECTOR_STRIDE, StereoBevModel
from .tensor import Tensor
from .voxelgrid import OccupancyGrid

STAGES = ("backbone_occupancy", "detection_head")


@dataclass(frozen=True)
class TrainSchedule:
    stage: str
    epochs: int
    initial_lr: float
    decay_epochs: tuple[int, ...] = ()
    decay_factor: float = 0.1
    batch_size: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        decays = tuple(self.decay_epochs)
        if any(b <= a for a, b in zip(decays, decays[1:])):
            raise ValueError("decay_epochs must be strictly increasing")
        if any(not 0 <= e < self.epochs for e in decays):
            raise ValueError("decay_epochs must lie inside [0, epochs)")


def lr_at(schedule: TrainSchedule, epoch: int) -> float:
    """Learning rate for an epoch: the initial rate decayed once per passed
    decay epoch."""
    if not 0 <= epoch < schedule.epochs:
        raise OutOfRangeError(f"epoch {epoch} outside [0, {schedule.epochs})")
    passed = sum(1 for e in schedule.decay_epochs if e <= epoch)
    return schedule.initial_lr * schedule.decay_factor**passed


class SGD:
    """Momentum SGD over a named parameter dict; lr=0 leaves parameters unchanged."""

    def __init__(self, params: dict[str, Tensor], momentum: float = 0.9):
        self.params = params
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= lr * v


@dataclass
class StepRecord:
    stage: str
    epoch: int
    step: int
    loss: float
    depth_loss: float = 0.0
    focal_loss: float = 0.0
    regression_loss: float = 0.0


@dataclass
class TrainResult:
    records: list[StepRecord] = field(default_factory=list)
    checkpoint_path: Optional[str] = None

    def stage_losses(self, stage: str) -> list[float]:
        return [r.loss for r in self.records if r.stage == stage]


def _check_finite(value: float, stage: str, step: int) -> None:
    if not math.isfinite(value):
        raise DivergedLossError(f"loss became {value} at {stage} step {step}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train(
    model: StereoBevModel,
    dataset: list,
    stage1: TrainSchedule,
    stage2: TrainSchedule,
    out_dir=None,
    progress: Optional[Callable[[StepRecord], None]] = None,
) -> TrainResult:
    """Run both stages over (StereoSample, OccupancyGrid) pairs.

    Stage one optimizes stereo + volume networks and the occupancy header
    under the masked BCE; stage two freezes them (no parameter updates, no
    gradient bookkeeping) and optimizes only the detection header.
    """
    if not dataset:
        raise EmptyDatasetError("training requires at least one sample")
    result = TrainResult()
    step_index = 0

    # stage one: backbone + occupancy header
    backbone = model.backbone_params()
    detector = model.detector_params()
    model.set_trainable(backbone, True)
    model.set_trainable(detector, False)
    optimizer = SGD(backbone)
    order_rng = np.random.default_rng(stage1.seed)
    for epoch in range(stage1.epochs):
        lr = lr_at(stage1, epoch)
        for batch in _batches(len(dataset), stage1.batch_size, order_rng):
            optimizer.zero_grad()
            total = None
            for i in batch:
                sample, labels = dataset[i]
                occupancy = model.forward_occupancy(
                    Tensor(sample.left), Tensor(sample.right), sample.rig, train=True
                )
                loss = occupancy_bce(occupancy, labels)
                total = loss if total is None else total + loss
            total = total / len(batch)
            value = total.item()
            _check_finite(value, stage1.stage, step_index)
            total.backward()
            optimizer.step(lr)
            record = StepRecord(stage1.stage, epoch, step_index, value, depth_loss=value)
            result.records.append(record)
            if progress is not None:
                progress(record)
            step_index += 1

    # stage two: frozen backbone, detection header only
    model.set_trainable(backbone, False)
    model.set_trainable(detector, True)
    cached = []
    for sample, _labels in dataset:
        features = model.detector_features(
            Tensor(sample.left), Tensor(sample.right), sample.rig
        ).detach()
        boxes = [gt.box for gt in sample.gt_boxes if gt.box.class_id == 0]
        targets = encode_detection_targets(boxes, model.config.grid, DETECTOR_STRIDE)
        cached.append((features, targets))
    optimizer = SGD(detector)
    order_rng = np.random.default_rng(stage2.seed)
    for epoch in range(stage2.epochs):
        lr = lr_at(stage2, epoch)
        for batch in _batches(len(cached), stage2.batch_size, order_rng):
            optimizer.zero_grad()
            total = None
            report_sum = LossReport()
            for i in batch:
                features, targets = cached[i]
                cls_logits, regression = model.detection_head(features)
                loss, report = detection_loss(cls_logits, regression, targets)
                total = loss if total is None else total + loss
                report_sum.focal_loss += report.focal_loss
                report_sum.regression_loss += report.regression_loss
            total = total / len(batch)
            value = total.item()
            _check_finite(value, stage2.stage, step_index)
            total.backward()
            optimizer.step(lr)
            record = StepRecord(
                stage2.stage,
                epoch,
                step_index,
                value,
                focal_loss=report_sum.focal_loss / len(batch),
                regression_loss=report_sum.regression_loss / len(batch),
            )
            result.records.append(record)
            if progress is not None:
                progress(record)
            step_index += 1

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "model.ckpt"
        model.save(ckpt)
        meta = {
            "optimizer": "sgd",
            "momentum": 0.9,
            "stage1": asdict(stage1),
            "stage2": asdict(stage2),
        }
        (out_dir / "model.ckpt.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        curve = [asdict(r) for r in result.records]
        (out_dir / "losses.json").write_text(json.dumps(curve, indent=2) + "\n")
        result.checkpoint_path = str(ckpt)
    return result


def infer(
    model: StereoBevModel,
    sample,
    score_threshold: float = 0.1,
    nms_threshold: float = 0.3,
) -> tuple[OccupancyGrid, list[BevBox]]:
    """Eval-mode forward pass: occupancy probabilities plus suppressed boxes."""
    out = model.forward(Tensor(sample.left), Tensor(sample.right), sample.rig, train=False)
    boxes = decode_boxes(
        out.cls_logits,
        out.regression,
        model.config.grid,
        stride=DETECTOR_STRIDE,
        score_threshold=score_threshold,
    )
    return out.occupancy, nms(boxes, nms_threshold)
