"""Per-detector choice of which training losses each attack mode drives.

Component names are ``kind`` for single-stage heads or ``stage.kind`` for
multi-stage detectors, with ``kind`` one of ``objectness``, ``class``, ``box``.
"""

from __future__ import annotations

import re
from typing import Mapping

from intentobf.detector.base import AttackMode, LossSelection

_V, _M, _U = AttackMode.VANISHING, AttackMode.MISLABELING, AttackMode.UNTARGETED

LOSS_TABLE: dict[str, dict[AttackMode, frozenset[str]]] = {
    "yolov3": {
        _V: frozenset({"objectness"}),
        _M: frozenset({"class"}),
        _U: frozenset({"class", "box", "objectness"}),
    },
    "ssd": {
        _V: frozenset({"class"}),
        _M: frozenset({"class"}),
        _U: frozenset({"class", "box"}),
    },
    "retinanet": {
        _V: frozenset({"class"}),
        _M: frozenset({"class"}),
        _U: frozenset({"class", "box"}),
    },
    "faster_rcnn": {
        _V: frozenset({"rpn.objectness", "det.class"}),
        _M: frozenset({"det.class"}),
        _U: frozenset({"rpn.objectness", "rpn.box", "det.class", "det.box"}),
    },
    "cascade_rcnn": {
        _V: frozenset({"rpn1.objectness", "rpn2.class", "rpn3.class", "det.class"}),
        _M: frozenset({"rpn2.class", "rpn3.class", "det.class"}),
        _U: frozenset(
            {
                "rpn1.objectness",
                "rpn1.box",
                "rpn2.class",
                "rpn2.box",
                "rpn3.class",
                "rpn3.box",
                "det.class",
                "det.box",
            }
        ),
    },
}

_ALIASES = {
    "yolo": "yolov3",
    "yolov3": "yolov3",
    "ssd": "ssd",
    "retinanet": "retinanet",
    "fasterrcnn": "faster_rcnn",
    "cascadercnn": "cascade_rcnn",
    # the bundled toy detector has a YOLO-style grid head
    "toy": "toy",
}

LOSS_TABLE["toy"] = dict(LOSS_TABLE["yolov3"])


def canonical_kind(model_kind: str) -> str:
    key = _squash(model_kind)
    return _ALIASES.get(key, key)


def _squash(name: str) -> str:
    return re.sub(r"[^a-z0-9]", "", name.lower())


def register_loss_row(model_kind: str, row: Mapping[AttackMode | str, set[str] | frozenset[str]]) -> None:
    """Add or replace the loss row for a custom detector family.

    The untargeted entry defines the adapter's full training-loss inventory and
    must contain every targeted component.
    """
    parsed = {AttackMode(k): frozenset(v) for k, v in row.items()}
    missing = set(AttackMode) - set(parsed)
    if missing:
        raise ValueError(f"loss row for {model_kind!r} lacks modes {sorted(m.value for m in missing)}")
    inventory = parsed[_U]
    for mode in (_V, _M):
        if not parsed[mode] or not parsed[mode] <= inventory:
            raise ValueError(f"{mode.value} components must be a non-empty subset of the untargeted set")
    key = _squash(model_kind)
    _ALIASES[key] = key
    LOSS_TABLE[key] = parsed


def loss_inventory(model_kind: str) -> frozenset[str]:
    return loss_selection_for(model_kind, _U).components


def loss_selection_for(model_kind: str, mode: AttackMode | str) -> LossSelection:
    kind = canonical_kind(model_kind)
    try:
        row = LOSS_TABLE[kind]
    except KeyError:
        raise KeyError(f"no loss row registered for model kind {model_kind!r}") from None
    return LossSelection(row[AttackMode(mode)])
