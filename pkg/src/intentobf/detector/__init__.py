from intentobf.detector.base import (
    AdapterError,
    AttackMode,
    Detection,
    DetectorAdapter,
    LossSelection,
    TargetSpec,
    UnknownComponentError,
)
from intentobf.detector.losses import loss_inventory, loss_selection_for, register_loss_row
from intentobf.detector.registry import AdapterRegistry, default_registry

__all__ = [
    "AdapterError",
    "AdapterRegistry",
    "AttackMode",
    "Detection",
    "DetectorAdapter",
    "LossSelection",
    "TargetSpec",
    "UnknownComponentError",
    "default_registry",
    "loss_inventory",
    "loss_selection_for",
    "register_loss_row",
]
