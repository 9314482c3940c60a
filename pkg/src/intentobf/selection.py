"""Target and perturb selection for the randomized, deliberate and arbitrary-region designs."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Collection, Mapping, Sequence

import numpy as np

from intentobf.detector.base import Detection
from intentobf.geometry import BoundingBox, PlacementError, iou, min_box_distance, overlaps, place_square_region

MATCH_IOU = 0.3
MATCH_CONFIDENCE = 0.3

FACTORS = ("low_conf", "big_perturb", "near")
LOW_CONF_BELOW = 0.5
BIG_PERTURB_ABOVE = 0.25
NEAR_BELOW = 0.25

PROB_FLOOR = float(np.finfo(np.float64).tiny)

Truth = tuple[BoundingBox, int]


@dataclass(frozen=True)
class CorrectDetection:
    detection: Detection
    matched_truth: Truth
    iou_with_truth: float
    prediction_index: int

    @property
    def box(self) -> BoundingBox:
        return self.detection.box

    @property
    def label(self) -> int:
        return self.detection.label


@dataclass(frozen=True)
class Skip:
    reason: str


@dataclass(frozen=True)
class SelectionOutcome:
    target: CorrectDetection
    perturb: BoundingBox
    perturb_is_object: bool
    perturb_object: CorrectDetection | None = None
    factors: tuple[str, ...] = ()
    side_fraction: float | None = None
    distance_fraction: float | None = None
    direction: str | None = None


@dataclass(frozen=True)
class Covariates:
    target_label: int
    target_confidence: float
    target_iou: float
    perturb_area: float
    distance: float
    perturb_is_object: bool
    class_accuracy: float | None
    intended_class: int | None = None
    intended_prob: float | None = None
    intended_prob_floored: bool = False
    num_factors: int | None = None
    side_fraction: float | None = None
    distance_fraction: float | None = None


def filter_correct(predictions: Sequence[Detection], ground_truth: Sequence[Truth]) -> list[CorrectDetection]:
    """Match predictions one-to-one to ground truth of the same label.

    A pair qualifies at IOU >= 0.3 and confidence >= 0.3. Pairs are taken
    greedily by descending IOU (ties by confidence, then index order); the
    result is ordered by prediction index.
    """
    pairs = []
    for i, det in enumerate(predictions):
        if det.confidence < MATCH_CONFIDENCE:
            continue
        for j, (box, label) in enumerate(ground_truth):
            if label != det.label:
                continue
            v = iou(det.box, box)
            if v >= MATCH_IOU:
                pairs.append((-v, -det.confidence, i, j, v))
    pairs.sort()
    used_p: set[int] = set()
    used_t: set[int] = set()
    out = []
    for _, _, i, j, v in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        out.append(CorrectDetection(predictions[i], ground_truth[j], v, i))
    out.sort(key=lambda c: c.prediction_index)
    return out


def _ordered_pairs(correct: Sequence[CorrectDetection]) -> list[tuple[int, int]]:
    return [
        (t, p)
        for t in range(len(correct))
        for p in range(len(correct))
        if t != p and not overlaps(correct[t].box, correct[p].box)
    ]


def _factor_ok(factor: str, target: CorrectDetection, perturb: CorrectDetection) -> bool:
    if factor == "low_conf":
        return target.detection.confidence < LOW_CONF_BELOW
    if factor == "big_perturb":
        return perturb.box.area > BIG_PERTURB_ABOVE
    if factor == "near":
        return min_box_distance(target.box, perturb.box) < NEAR_BELOW
    raise ValueError(f"unknown selection factor {factor!r}")


def sample_deliberate_pair(
    correct: Sequence[CorrectDetection], rng: np.random.Generator, factors: Collection[str] = ()
) -> SelectionOutcome | Skip:
    """Uniform draw over ordered non-overlapping pairs meeting every factor."""
    unknown = set(factors) - set(FACTORS)
    if unknown:
        raise ValueError(f"unknown factors {sorted(unknown)}")
    factors = tuple(f for f in FACTORS if f in set(factors))
    if len(correct) < 2:
        return Skip("fewer than 2 correctly predicted objects")
    pairs = _ordered_pairs(correct)
    if not pairs:
        return Skip("no non-overlapping pair of correct objects")
    pairs = [(t, p) for t, p in pairs if all(_factor_ok(f, correct[t], correct[p]) for f in factors)]
    if not pairs:
        return Skip(f"no pair satisfies factors {list(factors)}")
    t, p = pairs[int(rng.integers(len(pairs)))]
    return SelectionOutcome(
        target=correct[t],
        perturb=correct[p].box,
        perturb_is_object=True,
        perturb_object=correct[p],
        factors=factors,
    )


def sample_random_pair(correct: Sequence[CorrectDetection], rng: np.random.Generator) -> SelectionOutcome | Skip:
    return sample_deliberate_pair(correct, rng, ())


def sample_arbitrary_region(
    correct: Sequence[CorrectDetection],
    rng: np.random.Generator,
    side_fraction: float,
    distance_fraction: float,
    image_w: int,
    image_h: int,
) -> SelectionOutcome | Skip:
    if not correct:
        return Skip("no correctly predicted objects")
    target = correct[int(rng.integers(len(correct)))]
    try:
        placement = place_square_region(target.box, side_fraction, distance_fraction, image_w, image_h, rng)
    except PlacementError:
        return Skip("no eligible direction for the square perturb region")
    return SelectionOutcome(
        target=target,
        perturb=placement.box,
        perturb_is_object=False,
        side_fraction=side_fraction,
        distance_fraction=distance_fraction,
        direction=placement.direction,
    )


def compute_covariates(
    outcome: SelectionOutcome,
    predictions: Sequence[Detection],
    class_accuracy: Mapping[int, float],
    intended_class: int | None = None,
) -> Covariates:
    """Regressors for one selected pair.

    ``predictions`` must be the list the target was matched from. A class
    missing from ``class_accuracy`` gives ``None`` rather than 0. The
    intended-class probability comes from the target detection's probability
    vector and is floored at the smallest positive double (and flagged) when it
    is zero or the class lies outside the vector.
    """
    target = outcome.target
    det = predictions[target.prediction_index]
    if det != target.detection:
        raise ValueError("target detection does not come from these predictions")
    intended_prob = None
    floored = False
    if intended_class is not None:
        probs = det.class_probs
        p = probs[intended_class] if 0 <= intended_class < len(probs) else 0.0
        if not (p >= PROB_FLOOR and math.isfinite(p)):
            p, floored = PROB_FLOOR, True
        intended_prob = float(p)
    acc = class_accuracy.get(target.label)
    return Covariates(
        target_label=target.label,
        target_confidence=det.confidence,
        target_iou=target.iou_with_truth,
        perturb_area=outcome.perturb.area,
        distance=min_box_distance(target.box, outcome.perturb),
        perturb_is_object=outcome.perturb_is_object,
        class_accuracy=None if acc is None else float(acc),
        intended_class=intended_class,
        intended_prob=intended_prob,
        intended_prob_floored=floored,
        num_factors=len(outcome.factors) if outcome.perturb_is_object else None,
        side_fraction=outcome.side_fraction,
        distance_fraction=outcome.distance_fraction,
    )
