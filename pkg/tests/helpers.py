"""Small hand-written adapters used as oracles."""

import numpy as np

from intentobf.detector.base import Detection, DetectorAdapter, validate_image
from intentobf.detector.losses import register_loss_row
from intentobf.geometry import BoundingBox

register_loss_row("stub", {"vanishing": {"objectness"}, "mislabeling": {"class"}, "untargeted": {"objectness", "class"}})


class QuadraticAdapter(DetectorAdapter):
    """loss(x) = sum w * (x - c)^2, so grad = 2 w (x - c) is known in closed form."""

    model_kind = "stub"
    num_classes = 2

    def __init__(self, centre, weight=1.0):
        self.centre = np.asarray(centre, dtype=np.float64)
        self.weight = weight
        self.calls = 0

    @property
    def loss_components(self):
        return frozenset({"objectness", "class"})

    def predict(self, image, confidence_floor=0.3):
        return []

    def loss_and_gradient(self, image, target, selection):
        self.calls += 1
        x = validate_image(image)
        d = x - self.centre
        return float(self.weight * (d**2).sum()), 2.0 * self.weight * d


class ConstantAdapter(DetectorAdapter):
    model_kind = "stub"
    num_classes = 2

    @property
    def loss_components(self):
        return frozenset({"objectness", "class"})

    def predict(self, image, confidence_floor=0.3):
        return []

    def loss_and_gradient(self, image, target, selection):
        return 1.5, np.zeros_like(validate_image(image))


class BrokenAdapter(ConstantAdapter):
    def __init__(self, fail_at=3, value=np.nan):
        self.fail_at = fail_at
        self.value = value
        self.n = 0

    def loss_and_gradient(self, image, target, selection):
        self.n += 1
        g = np.ones_like(validate_image(image))
        if self.n > self.fail_at:
            g[0, 0, 0] = self.value
        return 1.0, g


class ScriptedAdapter(ConstantAdapter):
    """Returns a fixed list of detections from predict, ignoring the image."""

    def __init__(self, detections):
        self.detections = list(detections)

    def predict(self, image, confidence_floor=0.3):
        return [d for d in self.detections if d.confidence >= confidence_floor]


def detection(box, label, conf, num_classes=4):
    probs = [0.0] * num_classes
    probs[label] = conf
    rest = (1.0 - conf) / max(num_classes - 1, 1) * 0.5
    for k in range(num_classes):
        if k != label:
            probs[k] = rest
    return Detection(BoundingBox(*box), label, conf, tuple(probs))
