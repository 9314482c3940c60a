"""Re-evaluate an adversarial image and decide whether the target was disrupted."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from intentobf.detector.base import AttackMode, Detection, DetectorAdapter
from intentobf.geometry import BoundingBox, iou
from intentobf.selection import MATCH_CONFIDENCE, MATCH_IOU, CorrectDetection


@dataclass(frozen=True)
class DetectionSummary:
    box: tuple[float, float, float, float]
    label: int
    confidence: float
    iou_with_target: float


@dataclass(frozen=True)
class SuccessRecord:
    disrupted: bool
    intended_class_hit: bool | None
    post_attack_detections: tuple[DetectionSummary, ...]


def target_survives(
    detections: Sequence[Detection],
    anchor: BoundingBox,
    label: int,
    iou_threshold: float = MATCH_IOU,
    confidence_threshold: float = MATCH_CONFIDENCE,
) -> bool:
    return any(
        d.label == label and d.confidence >= confidence_threshold and iou(d.box, anchor) >= iou_threshold
        for d in detections
    )


def judge_detections(
    detections: Sequence[Detection],
    target: CorrectDetection,
    mode: AttackMode | str,
    intended_class: int | None = None,
    iou_threshold: float = MATCH_IOU,
    confidence_threshold: float = MATCH_CONFIDENCE,
) -> SuccessRecord:
    """Judge post-attack detections against the target's ground-truth anchor."""
    mode = AttackMode(mode)
    anchor, label = target.matched_truth
    disrupted = not target_survives(detections, anchor, label, iou_threshold, confidence_threshold)
    hit = None
    if mode is AttackMode.MISLABELING:
        if intended_class is None:
            raise ValueError("mislabeling judgement needs the intended class")
        hit = target_survives(detections, anchor, intended_class, iou_threshold, confidence_threshold)
    near = tuple(
        DetectionSummary(d.box.as_tuple(), d.label, d.confidence, v)
        for d in detections
        if (v := iou(d.box, anchor)) > 0.0
    )
    return SuccessRecord(disrupted, hit, near)


def judge(
    adversarial: np.ndarray,
    target: CorrectDetection,
    mode: AttackMode | str,
    adapter: DetectorAdapter,
    intended_class: int | None = None,
) -> SuccessRecord:
    detections = adapter.predict(adversarial, MATCH_CONFIDENCE)
    return judge_detections(detections, target, mode, intended_class)
