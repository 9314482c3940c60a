"""Iterative signed-gradient attack confined to a perturb mask.

Targeted modes descend the loss toward the manipulated target; the untargeted
mode ascends the loss away from the model's own predictions. Each iteration:

    step       x <- x -/+ lr * sign(mask * grad)
    l_inf      x <- clip(x, x0 - eps, x0 + eps)     (only if a budget is set)
    range      x <- clip(x, 0, 1)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from intentobf.detector.base import (
    AttackMode,
    Detection,
    DetectorAdapter,
    LossSelection,
    TargetSpec,
    validate_image,
)
from intentobf.detector.losses import loss_selection_for


class AttackError(RuntimeError):
    def __init__(self, message: str, iteration: int):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")


@dataclass(frozen=True)
class AttackConfig:
    mode: AttackMode
    iterations: int
    learning_rate: float
    mask: np.ndarray = field(repr=False, compare=False)
    linf_budget: float | None = None
    pixel_bounds: tuple[float, float] = (0.0, 1.0)
    selection: LossSelection | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", AttackMode(self.mode))
        if self.iterations < 1:
            raise ValueError("iterations must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.linf_budget is not None and not self.linf_budget > 0:
            raise ValueError("linf_budget must be positive when set")
        mask = np.asarray(self.mask, dtype=bool)
        if mask.ndim != 2:
            raise ValueError("mask must be a 2-D (H, W) array")
        object.__setattr__(self, "mask", mask)

    @classmethod
    def with_schedule(
        cls,
        mode: AttackMode | str,
        iterations: int,
        mask: np.ndarray,
        linf_budget: float | None = None,
        selection: LossSelection | None = None,
    ) -> "AttackConfig":
        """Learning rate ``1 / T``: a pixel can travel the whole [0, 1] range in T steps."""
        return cls(AttackMode(mode), iterations, 1.0 / iterations, mask, linf_budget, selection=selection)


@dataclass
class AttackResult:
    adversarial_image: np.ndarray
    loss_trace: list[float]
    iterations_run: int
    config: AttackConfig


def run_attack(
    image: np.ndarray,
    target: TargetSpec,
    adapter: DetectorAdapter,
    config: AttackConfig,
    on_iteration: Callable[[int, np.ndarray], None] | None = None,
) -> AttackResult:
    """Run exactly ``config.iterations`` masked signed-gradient updates.

    ``on_iteration(t, x)`` is called with the iterate after each update.

    Raises:
        ValueError: mode mismatch or a mask of the wrong shape. An all-zero mask
            is allowed and leaves the image bit-identical.
        AttackError: the adapter failed or returned a non-finite loss/gradient.
    """
    original = validate_image(image)
    if AttackMode(target.mode) is not config.mode:
        raise ValueError(f"target mode {target.mode} does not match attack mode {config.mode}")
    if config.mask.shape != original.shape[:2]:
        raise ValueError(f"mask shape {config.mask.shape} does not match image {original.shape[:2]}")
    selection = config.selection or loss_selection_for(adapter.model_kind, config.mode)
    adapter.check_selection(selection)

    lo, hi = config.pixel_bounds
    mask = config.mask[:, :, None]
    direction = -1.0 if config.mode.targeted else 1.0
    if config.linf_budget is not None:
        floor = original - config.linf_budget
        ceil = original + config.linf_budget

    x = original.copy()
    trace: list[float] = []
    for t in range(config.iterations):
        try:
            loss, grad = adapter.loss_and_gradient(x, target, selection)
        except Exception as exc:
            raise AttackError(f"adapter loss failed: {exc}", t) from exc
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != x.shape:
            raise AttackError(f"gradient shape {grad.shape} != image shape {x.shape}", t)
        if not np.isfinite(loss):
            raise AttackError(f"non-finite loss {loss}", t)
        if not np.all(np.isfinite(grad)):
            raise AttackError("NaN or infinite gradient", t)
        masked = np.where(mask, grad, 0.0)
        trace.append(float(loss))
        step = x + direction * config.learning_rate * np.sign(masked)
        if config.linf_budget is not None:
            step = np.clip(step, floor, ceil)
        step = np.clip(step, lo, hi)
        x = np.where(mask, step, original)
        if on_iteration is not None:
            on_iteration(t, x)
    return AttackResult(x, trace, config.iterations, config)


def make_target_spec(
    predictions: Sequence[Detection],
    target_index: int,
    mode: AttackMode | str,
    num_classes: int,
    intended_class: int | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[TargetSpec, int | None]:
    """Derive the loss target from the model's own predictions.

    Returns the target and, for mislabeling, the intended class (drawn uniformly
    from the other classes when not supplied).
    """
    mode = AttackMode(mode)
    if not 0 <= target_index < len(predictions):
        raise IndexError(f"target index {target_index} out of range for {len(predictions)} predictions")
    entries = [(d.box, d.label) for d in predictions]
    if mode is AttackMode.UNTARGETED:
        return TargetSpec(tuple(entries), mode), None
    if mode is AttackMode.VANISHING:
        del entries[target_index]
        return TargetSpec(tuple(entries), mode), None

    original = predictions[target_index].label
    if intended_class is None:
        if rng is None:
            raise ValueError("mislabeling needs an intended class or a random generator")
        others = [c for c in range(num_classes) if c != original]
        intended_class = others[int(rng.integers(len(others)))]
    if intended_class == original:
        raise ValueError("intended class must differ from the target's original label")
    if not 0 <= intended_class < num_classes:
        raise ValueError(f"intended class {intended_class} outside [0, {num_classes})")
    entries[target_index] = (entries[target_index][0], int(intended_class))
    return TargetSpec(tuple(entries), mode), int(intended_class)
