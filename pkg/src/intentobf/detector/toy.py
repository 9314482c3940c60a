"""A small differentiable grid detector for desk-scale experiments.

The network is a strided convolutional trunk plus a global-context branch,
ending in a dense head that emits, per grid cell, one objectness logit,
``num_classes`` class logits and four box offsets. Because every cell sees the
pooled features of the whole image, pixels far from an object can still move
its prediction, which is what a contextual attack needs.

Class probabilities are conditioned on objectness (``obj * softmax``), so a
detection's confidence is the probability of its label and the leftover mass
``1 - obj`` plays the background class.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from intentobf.detector.base import (
    DetectorAdapter,
    Detection,
    LossSelection,
    TargetSpec,
    validate_image,
)
from intentobf.geometry import BoundingBox, iou, overlaps

COMPONENTS = frozenset({"objectness", "class", "box"})
CLASS_NAMES = ("red", "green", "blue", "yellow")
CLASS_COLORS = np.array(
    [
        [0.85, 0.15, 0.15],
        [0.15, 0.80, 0.20],
        [0.20, 0.30, 0.90],
        [0.90, 0.85, 0.15],
    ]
)

WEIGHTS_MAGIC = b"IOBFTOY\x00"
WEIGHTS_VERSION = 1


class ToyTrainingError(RuntimeError):
    """The toy detector missed its recall bar within the training budget."""


# --------------------------------------------------------------------------
# synthetic scenes


@dataclass
class Scene:
    image_id: int
    image: np.ndarray  # uint8, H x W x 3
    objects: list[tuple[BoundingBox, int]]

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def as_float(self) -> np.ndarray:
        return self.image.astype(np.float64) / 255.0


def make_scenes(
    n: int,
    seed: int,
    image_size: int = 48,
    min_objects: int = 2,
    max_objects: int = 3,
    min_side: int = 7,
    max_side: int = 14,
    cell: int = 8,
    num_classes: int = 4,
    first_id: int = 0,
) -> list[Scene]:
    """Random scenes of colored rectangles on noisy gray backgrounds.

    Objects never overlap and their centers fall in distinct grid cells, so each
    object has exactly one responsible cell in the toy detector's head.
    """
    if n < 0 or min_objects < 1 or max_objects < min_objects:
        raise ValueError("invalid scene counts")
    rng = np.random.default_rng(seed)
    scenes = []
    for image_id in range(first_id, first_id + n):
        k = int(rng.integers(min_objects, max_objects + 1))
        for _attempt in range(1000):
            objects = _place_objects(rng, k, image_size, min_side, max_side, cell, num_classes)
            if objects is not None:
                break
        else:
            raise RuntimeError("could not place non-overlapping objects")
        scenes.append(Scene(image_id, _render(rng, image_size, objects), objects))
    return scenes


def _place_objects(rng, k, size, min_side, max_side, cell, num_classes):
    placed: list[tuple[BoundingBox, int]] = []
    cells = set()
    for _ in range(k):
        for _try in range(200):
            w, h = (int(v) for v in rng.integers(min_side, max_side + 1, size=2))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            box = BoundingBox(x0 / size, y0 / size, (x0 + w) / size, (y0 + h) / size)
            c = (int((x0 + w / 2) // cell), int((y0 + h / 2) // cell))
            if c in cells or any(overlaps(box, other) for other, _ in placed):
                continue
            placed.append((box, int(rng.integers(num_classes))))
            cells.add(c)
            break
        else:
            return None
    return placed


def _render(rng, size, objects) -> np.ndarray:
    # A per-image channel gain and offset act on background and objects alike,
    # so an object's class is only readable relative to the whole scene.
    base = rng.uniform(0.3, 0.5)
    img = base + rng.normal(0.0, 0.03, size=(size, size, 3))
    for box, label in objects:
        x0, y0 = round(box.x_min * size), round(box.y_min * size)
        x1, y1 = round(box.x_max * size), round(box.y_max * size)
        color = CLASS_COLORS[label] + rng.uniform(-0.05, 0.05)
        img[y0:y1, x0:x1] = color + rng.normal(0.0, 0.03, size=(y1 - y0, x1 - x0, 3))
    gain = rng.uniform(0.6, 1.2, size=3)
    offset = rng.uniform(-0.12, 0.12, size=3)
    img = img * gain + offset
    return np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# network


@dataclass(frozen=True)
class ToyConfig:
    image_size: int = 48
    num_classes: int = 4
    channels: tuple[int, ...] = (12, 24, 32, 48)
    head_width: int = 48
    anchor: float = 0.2
    nms_iou: float = 0.5

    @property
    def stride(self) -> int:
        return 2 ** (len(self.channels) - 1)

    @property
    def grid(self) -> int:
        return self.image_size // self.stride


class ToyNet(nn.Module):
    def __init__(self, config: ToyConfig):
        super().__init__()
        layers: list[nn.Module] = []
        c_in = 3
        for i, c_out in enumerate(config.channels):
            layers += [nn.Conv2d(c_in, c_out, 3, stride=1 if i == 0 else 2, padding=1), nn.SiLU()]
            c_in = c_out
        self.trunk = nn.Sequential(*layers)
        self.context = nn.Linear(c_in, c_in)
        self.head = nn.Sequential(
            nn.Conv2d(2 * c_in, config.head_width, 1),
            nn.SiLU(),
            nn.Conv2d(config.head_width, 1 + config.num_classes + 4, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f = self.trunk(x)
        g = F.silu(self.context(f.mean(dim=(2, 3))))
        g = g[:, :, None, None].expand_as(f)
        return self.head(torch.cat([f, g], dim=1))


@dataclass
class _EncodedTarget:
    obj: torch.Tensor  # (grid, grid)
    rows: torch.Tensor
    cols: torch.Tensor
    labels: torch.Tensor
    box: torch.Tensor  # (n, 4): x offset, y offset, log w, log h


def _encode(entries, config: ToyConfig, dtype) -> _EncodedTarget:
    g = config.grid
    obj = torch.zeros(g, g, dtype=dtype)
    slots: dict[tuple[int, int], tuple[int, list[float]]] = {}
    for box, label in entries:
        cx, cy = box.center
        col = min(int(cx * g), g - 1)
        row = min(int(cy * g), g - 1)
        w = max(box.width, 1e-6)
        h = max(box.height, 1e-6)
        slots[(row, col)] = (
            int(label),
            [cx * g - col, cy * g - row, math.log(w / config.anchor), math.log(h / config.anchor)],
        )
    keys = sorted(slots)
    for row, col in keys:
        obj[row, col] = 1.0
    return _EncodedTarget(
        obj=obj,
        rows=torch.tensor([r for r, _ in keys], dtype=torch.long),
        cols=torch.tensor([c for _, c in keys], dtype=torch.long),
        labels=torch.tensor([slots[k][0] for k in keys], dtype=torch.long),
        box=torch.tensor([slots[k][1] for k in keys], dtype=dtype).reshape(-1, 4),
    )


def _component_losses(out: torch.Tensor, enc: _EncodedTarget) -> dict[str, torch.Tensor]:
    """Summed objectness BCE, class cross-entropy, and box squared error for one image."""
    obj_logit = out[0]
    losses = {"objectness": F.binary_cross_entropy_with_logits(obj_logit, enc.obj, reduction="sum")}
    if len(enc.labels):
        cls = out[1:-4][:, enc.rows, enc.cols].T
        raw = out[-4:][:, enc.rows, enc.cols].T
        pred = torch.cat([torch.sigmoid(raw[:, :2]), raw[:, 2:]], dim=1)
        losses["class"] = F.cross_entropy(cls, enc.labels, reduction="sum")
        losses["box"] = ((pred - enc.box) ** 2).sum()
    else:
        zero = obj_logit.sum() * 0.0
        losses["class"] = zero
        losses["box"] = zero
    return losses


def _nms(dets: list[Detection], threshold: float) -> list[Detection]:
    kept: list[Detection] = []
    for det in sorted(dets, key=lambda d: -d.confidence):
        if all(k.label != det.label or iou(k.box, det.box) <= threshold for k in kept):
            kept.append(det)
    return kept


# --------------------------------------------------------------------------
# adapter


class ToyDetector(DetectorAdapter):
    model_kind = "toy"

    def __init__(self, config: ToyConfig, net: ToyNet, seed: int = 0, dtype=torch.float64):
        self.config = config
        self.num_classes = config.num_classes
        self.seed = seed
        self.dtype = dtype
        self.net = net.to(dtype)
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.net.eval()
        self._encoded: dict[TargetSpec, _EncodedTarget] = {}

    @property
    def loss_components(self) -> frozenset[str]:
        return COMPONENTS

    def _tensor(self, image: np.ndarray) -> torch.Tensor:
        arr = validate_image(image)
        size = self.config.image_size
        if arr.shape != (size, size, 3):
            raise ValueError(f"toy detector expects a {size}x{size}x3 image, got {arr.shape}")
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).to(self.dtype)[None]

    def raw_output(self, image: np.ndarray) -> np.ndarray:
        """Head output ``(1 + K + 4, grid, grid)`` for an image, no decoding."""
        with torch.no_grad():
            return self.net(self._tensor(image))[0].double().numpy()

    def predict(self, image: np.ndarray, confidence_floor: float = 0.3) -> list[Detection]:
        self.net.eval()
        out = self.raw_output(image)
        g = self.config.grid
        obj = 1.0 / (1.0 + np.exp(-out[0]))
        logits = out[1 : 1 + self.num_classes]
        soft = np.exp(logits - logits.max(axis=0))
        soft /= soft.sum(axis=0)
        probs = obj[None] * soft
        dets = []
        for row in range(g):
            for col in range(g):
                p = probs[:, row, col]
                label = int(np.argmax(p))
                conf = float(p[label])
                if conf < confidence_floor:
                    continue
                tx, ty, tw, th = out[-4:, row, col]
                cx = (col + 1.0 / (1.0 + math.exp(-tx))) / g
                cy = (row + 1.0 / (1.0 + math.exp(-ty))) / g
                w = self.config.anchor * math.exp(min(tw, 5.0))
                h = self.config.anchor * math.exp(min(th, 5.0))
                box = BoundingBox.clipped(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
                dets.append(Detection(box, label, conf, tuple(float(v) for v in p)))
        return _nms(dets, self.config.nms_iou)

    def _target(self, target: TargetSpec) -> _EncodedTarget:
        enc = self._encoded.get(target)
        if enc is None:
            if len(self._encoded) > 4096:
                self._encoded.clear()
            enc = self._encoded[target] = _encode(target.entries, self.config, self.dtype)
        return enc

    @contextlib.contextmanager
    def _training_mode(self):
        # Gradients come from the training-mode graph. Parameters are frozen
        # (no grad, no optimizer), so only buffers such as running statistics
        # can move; they are restored afterwards.
        snapshot = [b.clone() for b in self.net.buffers()]
        self.net.train()
        try:
            yield
        finally:
            self.net.eval()
            with torch.no_grad():
                for buf, saved in zip(self.net.buffers(), snapshot):
                    buf.copy_(saved)

    def loss_and_gradient(
        self, image: np.ndarray, target: TargetSpec, selection: LossSelection
    ) -> tuple[float, np.ndarray]:
        self.check_selection(selection)
        x = self._tensor(image).requires_grad_(True)
        enc = self._target(target)
        with self._training_mode():
            losses = _component_losses(self.net(x)[0], enc)
            loss = sum(losses[name] for name in sorted(selection.components))
            (grad,) = torch.autograd.grad(loss, x)
        return float(loss.detach()), grad[0].permute(1, 2, 0).double().numpy().copy()

    def component_losses(self, image: np.ndarray, target: TargetSpec) -> dict[str, float]:
        with torch.no_grad():
            out = self.net(self._tensor(image))[0]
            return {k: float(v) for k, v in _component_losses(out, self._target(target)).items()}

    def weights_bytes(self) -> bytes:
        return b"".join(
            t.detach().to(torch.float32).contiguous().numpy().tobytes() for t in self.net.state_dict().values()
        )

    def state_checksum(self) -> str:
        return hashlib.sha256(self.weights_bytes()).hexdigest()

    def with_dtype(self, dtype) -> "ToyDetector":
        net = ToyNet(self.config)
        net.load_state_dict({k: v.to(torch.float32) for k, v in self.net.state_dict().items()})
        return ToyDetector(self.config, net, seed=self.seed, dtype=dtype)

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        state = self.net.state_dict()
        header = {
            "config": {**asdict(self.config), "channels": list(self.config.channels)},
            "tensors": [[name, list(t.shape)] for name, t in state.items()],
        }
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(WEIGHTS_MAGIC)
            fh.write(struct.pack("<IqI", WEIGHTS_VERSION, self.seed, len(blob)))
            fh.write(blob)
            fh.write(self.weights_bytes())

    @classmethod
    def load(cls, path: str | Path, dtype=torch.float64) -> "ToyDetector":
        data = Path(path).read_bytes()
        if data[:8] != WEIGHTS_MAGIC:
            raise ValueError(f"{path}: not a toy detector weights file")
        version, seed, n = struct.unpack_from("<IqI", data, 8)
        if version != WEIGHTS_VERSION:
            raise ValueError(f"{path}: unsupported weights version {version}")
        offset = 8 + struct.calcsize("<IqI")
        header = json.loads(data[offset : offset + n])
        offset += n
        cfg = header["config"]
        config = ToyConfig(**{**cfg, "channels": tuple(cfg["channels"])})
        state = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
            state[name] = torch.from_numpy(arr.copy())
            offset += 4 * count
        net = ToyNet(config)
        net.load_state_dict(state)
        return cls(config, net, seed=seed, dtype=dtype)


# --------------------------------------------------------------------------
# training


@dataclass
class TrainingReport:
    steps: int
    final_loss: float
    recall: float
    history: list[tuple[int, float, float]] = field(default_factory=list)


def training_recall(detector: ToyDetector, scenes: Sequence[Scene]) -> float:
    """Fraction of ground-truth objects matched at IOU 0.3 and confidence 0.3."""
    from intentobf.selection import filter_correct

    total = hit = 0
    for scene in scenes:
        preds = detector.predict(scene.as_float(), 0.3)
        hit += len(filter_correct(preds, scene.objects))
        total += len(scene.objects)
    return hit / total if total else 0.0


def build_and_overfit(
    scenes: Sequence[Scene],
    seed: int = 0,
    config: ToyConfig | None = None,
    steps: int = 600,
    learning_rate: float = 3e-3,
    min_recall: float = 0.9,
    check_every: int = 100,
    min_scenes: int = 16,
) -> tuple[ToyDetector, TrainingReport]:
    """Train a fresh toy detector on ``scenes`` for a fixed step budget.

    Full-batch Adam with a cosine schedule; recall on the training scenes is
    logged every ``check_every`` steps and checked against ``min_recall`` at
    the end.

    Raises:
        ValueError: too few scenes, scenes with fewer than two objects, or
            scenes of the wrong size.
        ToyTrainingError: the recall bar was not reached within ``steps``.
    """
    if not scenes:
        raise ValueError("cannot train the toy detector on an empty dataset")
    if len(scenes) < min_scenes:
        raise ValueError(f"need at least {min_scenes} scenes, got {len(scenes)}")
    if any(len(s.objects) < 2 for s in scenes):
        raise ValueError("every training scene needs at least two objects")
    config = config or ToyConfig(image_size=scenes[0].width)
    for s in scenes:
        if s.image.shape != (config.image_size, config.image_size, 3):
            raise ValueError(f"scene {s.image_id} has shape {s.image.shape}")

    torch.manual_seed(seed)
    net = ToyNet(config)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            if p.dim() > 1:
                bound = 1.0 / math.sqrt(p[0].numel())
                p.copy_(torch.rand(p.shape, generator=gen) * 2 * bound - bound)
            else:
                p.zero_()
        net.head[-1].bias[0] = -4.0  # start near "no object" everywhere

    x = torch.from_numpy(np.stack([s.as_float().transpose(2, 0, 1) for s in scenes])).float()
    encs = [_encode(s.objects, config, torch.float32) for s in scenes]
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps, eta_min=learning_rate * 0.05)
    report = TrainingReport(steps=0, final_loss=float("nan"), recall=0.0)
    net.train()
    for step in range(1, steps + 1):
        opt.zero_grad()
        out = net(x)
        total = torch.zeros(())
        for i, enc in enumerate(encs):
            parts = _component_losses(out[i], enc)
            total = total + parts["objectness"] + parts["class"] + 5.0 * parts["box"]
        total = total / len(encs)
        total.backward()
        opt.step()
        sched.step()
        if step % check_every == 0 or step == steps:
            detector = ToyDetector(config, _clone(net, config), seed=seed, dtype=torch.float32)
            recall = training_recall(detector, scenes)
            loss_value = float(total.detach())
            report.history.append((step, loss_value, recall))
            report.steps, report.final_loss, report.recall = step, loss_value, recall
    if report.recall < min_recall:
        raise ToyTrainingError(
            f"toy detector reached recall {report.recall:.3f} < {min_recall} after {report.steps} steps"
        )
    return ToyDetector(config, _clone(net, config), seed=seed), report


def _clone(net: ToyNet, config: ToyConfig) -> ToyNet:
    twin = ToyNet(config)
    twin.load_state_dict({k: v.detach().clone() for k, v in net.state_dict().items()})
    return twin

