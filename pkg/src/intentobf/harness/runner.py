"""Run an experiment plan to JSON-Lines attack records.

Work is split into units, one per (cell, repetition). A unit's records are
appended in one write and then checkpointed in ``progress.json`` together with
the byte length of ``records.jsonl``. On resume the record file is truncated to
that length, so a unit is either fully present or absent.

Seeds:
  image sampling   (master_seed, 0, repetition)           shared by every cell
  pair selection   (master_seed, 1, H(selection key), image_id)
  intended class   (master_seed, 2, H(selection key), image_id)

Selections therefore agree across models, modes, budgets and norms, and an
image drawn in two repetitions gets the same selection both times.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping, Sequence

import numpy as np

from intentobf.attack import AttackConfig, make_target_spec, run_attack
from intentobf.detector.base import AttackMode, Detection, DetectorAdapter
from intentobf.detector.registry import AdapterRegistry, default_registry
from intentobf.evaluation import judge
from intentobf.geometry import box_mask
from intentobf.harness.dataset import Dataset, ingest_dataset
from intentobf.harness.plan import Cell, ExperimentPlan, norm_budget, stable_int
from intentobf.selection import (
    CorrectDetection,
    SelectionOutcome,
    Skip,
    compute_covariates,
    filter_correct,
    sample_arbitrary_region,
    sample_deliberate_pair,
)

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
RECORDS = "records.jsonl"
PROGRESS = "progress.json"
TIMINGS = "timings.jsonl"
PLAN_ECHO = "plan.json"
SUMMARY = "summary.json"
ACCURACY = "class_accuracy.json"

SAMPLING, SELECTION, INTENDED = 0, 1, 2


class OutputExistsError(FileExistsError):
    pass


class PlanMismatchError(ValueError):
    pass


# --------------------------------------------------------------------------
# serialization


def _round(x: Any) -> Any:
    if isinstance(x, float):
        if not math.isfinite(x):
            return None
        return float(f"{x:.9g}")
    if isinstance(x, dict):
        return {k: _round(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v) for v in x]
    if isinstance(x, np.generic):
        return _round(x.item())
    return x


def dumps_record(record: Mapping[str, Any]) -> str:
    return json.dumps(_round(record), sort_keys=True, separators=(",", ":"), allow_nan=False)


def read_records(path: str | Path) -> list[dict[str, Any]]:
    path = Path(path)
    if path.is_dir():
        path = path / RECORDS
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def normalized_records(records: Sequence[Mapping[str, Any]]) -> list[str]:
    """Key-sorted canonical lines, for comparing runs irrespective of unit order."""
    return sorted(dumps_record(r) for r in records)


# --------------------------------------------------------------------------
# seeds and per-image work


def sampling_seed(master_seed: int, repetition: int) -> list[int]:
    return [master_seed, SAMPLING, repetition]


def selection_seed(master_seed: int, cell: Cell, image_id: int) -> list[int]:
    return [master_seed, SELECTION, stable_int(cell.selection_key), image_id]


def intended_seed(master_seed: int, cell: Cell, image_id: int) -> list[int]:
    return [master_seed, INTENDED, stable_int(cell.selection_key), image_id]


def sample_images(image_ids: Sequence[int], master_seed: int, repetition: int, count: int) -> list[int]:
    """Draw without replacement within a repetition."""
    ids = sorted(image_ids)
    if count > len(ids):
        raise ValueError(f"repetition needs {count} images but the dataset has {len(ids)}")
    rng = np.random.default_rng(sampling_seed(master_seed, repetition))
    return [ids[i] for i in rng.permutation(len(ids))[:count]]


def select(
    cell: Cell, correct: Sequence[CorrectDetection], rng: np.random.Generator, width: int, height: int
) -> SelectionOutcome | Skip:
    if cell.design == "arbitrary_region":
        return sample_arbitrary_region(correct, rng, cell.side_fraction, cell.distance_fraction, width, height)
    return sample_deliberate_pair(correct, rng, cell.factors or ())


def compute_class_accuracy(dataset: Dataset, adapter: DetectorAdapter) -> dict[int, float]:
    """Per-class recall of the clean detector under the 0.3/0.3 matching rule."""
    total: dict[int, int] = {}
    hit: dict[int, int] = {}
    for entry in dataset:
        truth = entry.objects
        for _, label in truth:
            total[label] = total.get(label, 0) + 1
        if not truth:
            continue
        preds = adapter.predict(dataset.load_image(entry.image_id))
        for c in filter_correct(preds, truth):
            hit[c.label] = hit.get(c.label, 0) + 1
    return {k: hit.get(k, 0) / n for k, n in sorted(total.items())}


def _box(b) -> list[float]:
    return list(b.as_tuple())


def _loss_digest(trace: Sequence[float]) -> dict[str, Any]:
    arr = np.asarray(trace, dtype="<f8")
    return {
        "first": float(arr[0]),
        "last": float(arr[-1]),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "sha256": hashlib.sha256(arr.tobytes()).hexdigest(),
    }


@dataclass
class UnitContext:
    plan: ExperimentPlan
    dataset: Dataset
    adapters: dict[str, DetectorAdapter]
    accuracy: dict[str, dict[int, float]]
    clean: dict[tuple[str, int], list[Detection]] = field(default_factory=dict)

    def predictions(self, model: str, image_id: int) -> list[Detection]:
        key = (model, image_id)
        if key not in self.clean:
            self.clean[key] = self.adapters[model].predict(self.dataset.load_image(image_id))
        return self.clean[key]


def attack_image(ctx: UnitContext, cell: Cell, repetition: int, slot: int, image_id: int) -> dict[str, Any]:
    """Selection, attack and judgement for one sampled image; returns its record."""
    plan = ctx.plan
    entry = ctx.dataset.images[image_id]
    adapter = ctx.adapters[cell.model]
    sel_seed = selection_seed(plan.master_seed, cell, image_id)
    int_seed = intended_seed(plan.master_seed, cell, image_id)
    record: dict[str, Any] = {
        "schema_version": SCHEMA_VERSION,
        "key": f"{cell.cell_id}#r{repetition}s{slot}",
        "cell": cell.as_dict(),
        "repetition": repetition,
        "slot": slot,
        "image_id": image_id,
        "seeds": {
            "master": plan.master_seed,
            "sampling": sampling_seed(plan.master_seed, repetition),
            "selection": sel_seed,
            "intended": int_seed,
        },
        "status": "ok",
        "skip_reason": None,
        "selection": None,
        "covariates": None,
        "result": None,
        "loss": None,
    }
    image = ctx.dataset.load_image(image_id)
    preds = ctx.predictions(cell.model, image_id)
    correct = filter_correct(preds, entry.objects)
    outcome = select(cell, correct, np.random.default_rng(sel_seed), entry.width, entry.height)
    if isinstance(outcome, Skip):
        record["status"] = "skipped"
        record["skip_reason"] = outcome.reason
        return record

    mode = AttackMode(cell.mode)
    spec, intended = make_target_spec(
        preds, outcome.target.prediction_index, mode, adapter.num_classes, rng=np.random.default_rng(int_seed)
    )
    mask = box_mask(outcome.perturb, entry.height, entry.width)
    config = AttackConfig.with_schedule(mode, cell.iterations, mask, norm_budget(cell.norm))
    result = run_attack(image, spec, adapter, config)
    verdict = judge(result.adversarial_image, outcome.target, mode, adapter, intended)
    cov = compute_covariates(outcome, preds, ctx.accuracy[cell.model], intended)

    record["selection"] = {
        "target_index": outcome.target.prediction_index,
        "target_box": _box(outcome.target.box),
        "target_label": outcome.target.label,
        "truth_box": _box(outcome.target.matched_truth[0]),
        "perturb_box": _box(outcome.perturb),
        "perturb_index": None if outcome.perturb_object is None else outcome.perturb_object.prediction_index,
        "perturb_pixels": int(mask.sum()),
        "direction": outcome.direction,
    }
    record["covariates"] = asdict(cov)
    record["result"] = {
        "success": verdict.disrupted,
        "intended_class_hit": verdict.intended_class_hit,
        "num_detections": len(verdict.post_attack_detections),
    }
    record["loss"] = _loss_digest(result.loss_trace)
    return record


# --------------------------------------------------------------------------
# unit scheduling


@dataclass(frozen=True)
class Unit:
    cell: Cell
    repetition: int

    @property
    def key(self) -> str:
        return f"{self.cell.cell_id}#r{self.repetition}"


def plan_units(plan: ExperimentPlan) -> list[Unit]:
    return [Unit(cell, r) for cell in plan.cells() for r in range(plan.repetitions)]


def run_unit(ctx: UnitContext, unit: Unit) -> tuple[list[dict[str, Any]], list[dict[str, Any]]]:
    ids = sample_images(ctx.dataset.image_ids, ctx.plan.master_seed, unit.repetition, ctx.plan.images_per_repetition)
    records, timings = [], []
    for slot, image_id in enumerate(ids):
        start = time.perf_counter()
        rec = attack_image(ctx, unit.cell, unit.repetition, slot, image_id)
        timings.append({"key": rec["key"], "seconds": time.perf_counter() - start})
        records.append(rec)
    return records, timings


def build_context(plan: ExperimentPlan, registry: AdapterRegistry, dataset: Dataset | None = None,
                  accuracy: dict[str, dict[int, float]] | None = None) -> UnitContext:
    dataset = dataset or ingest_dataset(plan.dataset_annotations, plan.dataset_images)
    missing = [m.kind for m in plan.models if m.kind not in registry]
    if missing:
        raise KeyError(f"no adapter registered for {missing}; known: {registry.kinds()}")
    adapters = {m.name: registry.create(m.kind, **m.options) for m in plan.models}
    if accuracy is None:
        accuracy = {name: compute_class_accuracy(dataset, a) for name, a in adapters.items()}
    return UnitContext(plan, dataset, adapters, accuracy)


# worker processes keep one context each
_WORKER_CTX: UnitContext | None = None


def _worker_init(plan_dict: dict, registry: AdapterRegistry, accuracy: dict) -> None:
    global _WORKER_CTX
    import torch

    torch.set_num_threads(1)
    plan = ExperimentPlan.from_dict(plan_dict)
    _WORKER_CTX = build_context(plan, registry, accuracy=accuracy)


def _worker_run(unit: Unit):
    assert _WORKER_CTX is not None
    try:
        return unit, run_unit(_WORKER_CTX, unit), None
    except Exception as exc:  # reported and quarantined by the parent
        return unit, None, f"{type(exc).__name__}: {exc}"


@dataclass
class RunSummary:
    out_dir: Path
    units_total: int
    units_run: int
    units_resumed: int
    records: int
    status_counts: dict[str, int]
    quarantined: dict[str, str]
    per_cell: dict[str, dict[str, int]]

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["out_dir"] = str(self.out_dir)
        return d


def _write_json(path: Path, payload: Any) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _accuracy_json(accuracy: dict[str, dict[int, float]]) -> dict[str, dict[str, float]]:
    return {m: {str(k): v for k, v in table.items()} for m, table in accuracy.items()}


def run_plan(
    plan: ExperimentPlan,
    out_dir: str | Path,
    registry: AdapterRegistry | None = None,
    resume: bool = False,
    workers: int = 1,
    on_unit_complete: Callable[[Unit, int], None] | None = None,
    dataset: Dataset | None = None,
) -> RunSummary:
    """Execute every (cell, repetition) unit and append records to ``out_dir``.

    Existing output is refused unless ``resume`` is set; resuming checks that
    the plan digest matches the checkpoint. A unit that raises quarantines its
    cell: its records are dropped, later repetitions of that cell are not run,
    and other cells continue. ``on_unit_complete(unit, n_done)`` runs after
    each checkpoint (handy for interrupting a run in tests).
    """
    registry = registry or default_registry()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records_path, progress_path = out / RECORDS, out / PROGRESS
    digest = plan.digest()

    progress: dict[str, Any] = {"plan_digest": digest, "completed": [], "offset": 0, "quarantined": {}}
    if progress_path.exists() or records_path.exists():
        if not resume:
            raise OutputExistsError(f"{out} already holds a run; pass resume=True to continue it")
        if progress_path.exists():
            with open(progress_path, encoding="utf-8") as fh:
                progress = json.load(fh)
            if progress["plan_digest"] != digest:
                raise PlanMismatchError("checkpoint was written for a different plan")
        with open(records_path, "ab") as fh:
            fh.truncate(progress["offset"])
    _write_json(out / PLAN_ECHO, plan.to_dict())

    ctx = build_context(plan, registry, dataset)
    _write_json(out / ACCURACY, _accuracy_json(ctx.accuracy))
    units = plan_units(plan)
    done = set(progress["completed"])
    quarantined: dict[str, str] = dict(progress["quarantined"])
    resumed = len(done)
    pending = [u for u in units if u.key not in done and u.cell.cell_id not in quarantined]

    def results() -> Iterator[tuple[Unit, Any, str | None]]:
        if workers <= 1:
            for u in pending:
                if u.cell.cell_id in quarantined:
                    continue
                try:
                    yield u, run_unit(ctx, u), None
                except Exception as exc:
                    yield u, None, f"{type(exc).__name__}: {exc}"
            return
        with ProcessPoolExecutor(
            max_workers=workers, initializer=_worker_init, initargs=(plan.to_dict(), registry, ctx.accuracy)
        ) as pool:
            # map preserves submission order, so the file layout matches a serial run
            yield from pool.map(_worker_run, pending)

    n_run = 0
    with open(records_path, "ab") as rec_fh, open(out / TIMINGS, "a", encoding="utf-8") as time_fh:
        for unit, payload, error in results():
            if unit.cell.cell_id in quarantined:
                continue
            if error is not None:
                log.error("quarantining cell %s: %s", unit.cell.cell_id, error)
                quarantined[unit.cell.cell_id] = error
            else:
                records, timings = payload
                rec_fh.write("".join(dumps_record(r) + "\n" for r in records).encode("utf-8"))
                rec_fh.flush()
                os.fsync(rec_fh.fileno())
                for t in timings:
                    time_fh.write(json.dumps(t) + "\n")
                time_fh.flush()
                progress["completed"].append(unit.key)
                n_run += 1
            progress["offset"] = rec_fh.tell()
            progress["quarantined"] = quarantined
            _write_json(progress_path, progress)
            if on_unit_complete is not None:
                on_unit_complete(unit, len(progress["completed"]))

    summary = summarize(out, len(units), n_run, resumed, quarantined)
    _write_json(out / SUMMARY, summary.to_json())
    return summary


def summarize(out: Path, total: int, run: int, resumed: int, quarantined: dict[str, str]) -> RunSummary:
    records = read_records(out / RECORDS) if (out / RECORDS).exists() else []
    counts: dict[str, int] = {}
    per_cell: dict[str, dict[str, int]] = {}
    for r in records:
        status = r["status"]
        if status == "ok":
            status = "success" if r["result"]["success"] else "failure"
        counts[status] = counts.get(status, 0) + 1
        cid = r["key"].split("#")[0]
        cell = per_cell.setdefault(cid, {})
        cell[status] = cell.get(status, 0) + 1
    return RunSummary(out, total, run, resumed, len(records), counts, quarantined, per_cell)


def replay_record(
    record: Mapping[str, Any],
    plan: ExperimentPlan,
    registry: AdapterRegistry | None = None,
    dataset: Dataset | None = None,
    accuracy: dict[str, dict[int, float]] | None = None,
) -> dict[str, Any]:
    """Recompute a single record from its cell, repetition, slot and image id."""
    registry = registry or default_registry()
    c = dict(record["cell"])
    if c.get("factors") is not None:
        c["factors"] = tuple(c["factors"])
    cell = Cell(**c)
    ctx = build_context(plan, registry, dataset, accuracy)
    ids = sample_images(ctx.dataset.image_ids, plan.master_seed, record["repetition"], plan.images_per_repetition)
    if ids[record["slot"]] != record["image_id"]:
        raise ValueError("record image does not match its seed lineage")
    return json.loads(dumps_record(attack_image(ctx, cell, record["repetition"], record["slot"], record["image_id"])))
