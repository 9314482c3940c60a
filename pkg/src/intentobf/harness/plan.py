"""Experiment plans and the cells they expand to."""

from __future__ import annotations

import hashlib
import itertools
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import yaml

from intentobf.detector.base import AttackMode
from intentobf.selection import FACTORS

DESIGNS = ("randomized", "deliberate_factors", "arbitrary_region")
UNBOUNDED = "unbounded"


def norm_budget(norm: str) -> float | None:
    """``"unbounded"`` -> None, ``"linf_0.05"`` -> 0.05."""
    if norm == UNBOUNDED:
        return None
    if norm.startswith("linf_"):
        eps = float(norm[len("linf_") :])
        if eps > 0:
            return eps
    raise ValueError(f"unknown norm variant {norm!r}")


def stable_int(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    kind: str
    options: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Cell:
    design: str
    model: str
    mode: str
    iterations: int
    norm: str
    factors: tuple[str, ...] | None = None
    side_fraction: float | None = None
    distance_fraction: float | None = None

    @property
    def selection_key(self) -> str:
        """Identifies the selection rule; model, mode, T and norm are excluded on purpose."""
        if self.design == "deliberate_factors":
            return f"{self.design}/factors={'+'.join(self.factors or ()) or 'none'}"
        if self.design == "arbitrary_region":
            return f"{self.design}/side={self.side_fraction:g}/dist={self.distance_fraction:g}"
        return self.design

    @property
    def cell_id(self) -> str:
        return f"{self.selection_key}/{self.model}/{self.mode}/T{self.iterations}/{self.norm}"

    def as_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["factors"] = None if self.factors is None else list(self.factors)
        return d


@dataclass
class ExperimentPlan:
    design: str
    models: list[ModelSpec]
    attacks: list[str]
    iteration_grid: list[int]
    dataset_annotations: str
    dataset_images: str
    norm_variants: list[str] = field(default_factory=lambda: [UNBOUNDED])
    images_per_repetition: int = 32
    repetitions: int = 2
    master_seed: int = 0
    factor_subsets: list[list[str]] = field(default_factory=lambda: [[]])
    side_fractions: list[float] = field(default_factory=lambda: [0.1, 0.3, 0.5, 0.7])
    distance_fractions: list[float] = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2])

    def __post_init__(self) -> None:
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}, got {self.design!r}")
        if not self.models:
            raise ValueError("plan needs at least one model")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate model names {names}")
        self.attacks = [AttackMode(a).value for a in self.attacks]
        if not self.attacks:
            raise ValueError("plan needs at least one attack mode")
        if not self.iteration_grid or any(int(t) < 1 for t in self.iteration_grid):
            raise ValueError("iteration_grid values must be positive integers")
        self.iteration_grid = [int(t) for t in self.iteration_grid]
        for n in self.norm_variants:
            norm_budget(n)
        if self.images_per_repetition < 1 or self.repetitions < 1:
            raise ValueError("images_per_repetition and repetitions must be positive")
        for subset in self.factor_subsets:
            bad = set(subset) - set(FACTORS)
            if bad:
                raise ValueError(f"unknown factors {sorted(bad)}")
        for s in self.side_fractions:
            if not 0 < s < 1:
                raise ValueError(f"side fraction {s} outside (0, 1)")
        for d in self.distance_fractions:
            if not 0 < d < 1:
                raise ValueError(f"distance fraction {d} outside (0, 1)")

    @property
    def images_per_cell(self) -> int:
        return self.images_per_repetition * self.repetitions

    def _selection_variants(self) -> list[dict[str, Any]]:
        if self.design == "deliberate_factors":
            return [{"factors": tuple(f for f in FACTORS if f in s)} for s in self.factor_subsets]
        if self.design == "arbitrary_region":
            return [
                {"side_fraction": float(s), "distance_fraction": float(d)}
                for s, d in itertools.product(self.side_fractions, self.distance_fractions)
            ]
        return [{}]

    def cells(self) -> list[Cell]:
        out = []
        for variant, model, mode, t, norm in itertools.product(
            self._selection_variants(), self.models, self.attacks, self.iteration_grid, self.norm_variants
        ):
            out.append(Cell(self.design, model.name, mode, t, norm, **variant))
        return out

    def model(self, name: str) -> ModelSpec:
        for m in self.models:
            if m.name == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["models"] = [asdict(m) for m in self.models]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentPlan":
        data = dict(data)
        models = []
        for m in data.pop("models"):
            m = dict(m)
            name = m.pop("name", None) or m["kind"]
            kind = m.pop("kind")
            options = dict(m.pop("options", {}) or {})
            options.update(m)
            models.append(ModelSpec(name, kind, options))
        dataset = data.pop("dataset", None)
        if dataset is not None:
            data.setdefault("dataset_annotations", dataset["annotations"])
            data.setdefault("dataset_images", dataset["images"])
        if "images_per_cell" in data:
            per_cell = int(data.pop("images_per_cell"))
            reps = int(data.get("repetitions", 1))
            if "images_per_repetition" in data:
                if per_cell != reps * int(data["images_per_repetition"]):
                    raise ValueError("images_per_cell must equal repetitions x images_per_repetition")
            elif per_cell % reps:
                raise ValueError("images_per_cell is not divisible by repetitions")
            else:
                data["images_per_repetition"] = per_cell // reps
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown plan fields {sorted(unknown)}")
        return cls(models=models, **data)


def load_plan(path: str | Path, overrides: dict[str, Any] | None = None) -> ExperimentPlan:
    """Read a YAML or JSON plan. Relative dataset and weight paths resolve against the plan's directory."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) if path.suffix.lower() in (".yaml", ".yml") else json.load(fh)
    base = path.resolve().parent

    def resolve(p: str) -> str:
        q = Path(p)
        return str(q if q.is_absolute() else (base / q).resolve())

    if "dataset" in data:
        data["dataset"] = {k: resolve(v) for k, v in data["dataset"].items()}
    for k in ("dataset_annotations", "dataset_images"):
        if k in data:
            data[k] = resolve(data[k])
    for m in data.get("models", []):
        if "weights" in m:
            m["weights"] = resolve(m["weights"])
    data.update(overrides or {})
    return ExperimentPlan.from_dict(data)

