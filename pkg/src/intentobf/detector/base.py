"""Detector-facing types and the adapter contract every detector plugs into."""

from __future__ import annotations

import abc
import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from intentobf.geometry import BoundingBox


class AttackMode(str, enum.Enum):
    VANISHING = "vanishing"
    MISLABELING = "mislabeling"
    UNTARGETED = "untargeted"

    @property
    def targeted(self) -> bool:
        return self is not AttackMode.UNTARGETED


class AdapterError(RuntimeError):
    pass


class UnknownComponentError(AdapterError):
    def __init__(self, component: str, available: Iterable[str]):
        self.component = component
        super().__init__(f"loss component {component!r} not available; adapter offers {sorted(available)}")


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    label: int
    confidence: float
    class_probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if not 0 <= self.label < len(self.class_probs):
            raise ValueError(f"label {self.label} outside class_probs of length {len(self.class_probs)}")
        if any(not (0.0 <= p <= 1.0) for p in self.class_probs):
            raise ValueError("class probabilities must lie in [0, 1]")
        if not math.isclose(self.confidence, self.class_probs[self.label], rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError("confidence must equal the probability of the predicted class")


@dataclass(frozen=True)
class TargetSpec:
    """Desired (or original) detections fed to the attack loss."""

    entries: tuple[tuple[BoundingBox, int], ...]
    mode: AttackMode

    @classmethod
    def from_detections(cls, detections: Sequence[Detection], mode: AttackMode) -> "TargetSpec":
        return cls(tuple((d.box, d.label) for d in detections), AttackMode(mode))


@dataclass(frozen=True)
class LossSelection:
    """Loss components to attack, optionally qualified by stage as ``"stage.kind"``."""

    components: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "components", frozenset(self.components))
        if not self.components:
            raise ValueError("a loss selection needs at least one component")

    def __iter__(self):
        return iter(sorted(self.components))


def validate_image(image: np.ndarray) -> np.ndarray:
    """Check an ``H x W x C`` image with values in [0, 1]; returns it as float64."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValueError(f"image must have shape (H, W, C), got {arr.shape}")
    arr = arr.astype(np.float64, copy=False)
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    return arr


class DetectorAdapter(abc.ABC):
    """Uniform view of a differentiable detector.

    ``loss_and_gradient`` must leave the adapter's weights and running
    statistics bit-identical, so attacks against one instance never drift the
    model that later judges them.
    """

    model_kind: str = "custom"
    num_classes: int

    @property
    @abc.abstractmethod
    def loss_components(self) -> frozenset[str]:
        """Every loss component this adapter can evaluate."""

    @abc.abstractmethod
    def predict(self, image: np.ndarray, confidence_floor: float = 0.3) -> list[Detection]:
        ...

    @abc.abstractmethod
    def loss_and_gradient(
        self, image: np.ndarray, target: TargetSpec, selection: LossSelection
    ) -> tuple[float, np.ndarray]:
        ...

    def check_selection(self, selection: LossSelection) -> None:
        for name in selection.components:
            if name not in self.loss_components:
                raise UnknownComponentError(name, self.loss_components)

    def state_checksum(self) -> str:
        """Digest of the adapter's mutable state; adapters with weights override it."""
        return ""
