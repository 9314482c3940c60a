import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest

import intentobf.detector.toy as toy
from helpers import detection
from intentobf.detector.base import DetectorAdapter
from intentobf.detector.registry import AdapterRegistry
from intentobf.geometry import BoundingBox
from intentobf.harness.dataset import coco_box, ingest_dataset, write_coco
from intentobf.harness.plan import ExperimentPlan, ModelSpec, load_plan, norm_budget
from intentobf.harness.runner import (
    OutputExistsError,
    PlanMismatchError,
    compute_class_accuracy,
    normalized_records,
    read_records,
    replay_record,
    run_plan,
    sample_images,
)

SCHEMA = json.loads((Path(__file__).parents[1] / "src/intentobf/harness/record_schema.json").read_text())


class Interrupt(Exception):
    pass


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    """Twelve toy scenes plus one single-object scene (id 99)."""
    root = tmp_path_factory.mktemp("small")
    scenes = toy.make_scenes(12, seed=11, first_id=1000)
    lone = toy.make_scenes(1, seed=5, min_objects=1, max_objects=1, first_id=99)[0]
    items = [(s.image_id, s.image, s.objects) for s in scenes + [lone]]
    path = write_coco(root, items, toy.CLASS_NAMES)
    return path, root


def make_plan(toy_artifacts, small_data, **kw):
    ann, root = small_data
    args = dict(
        design="randomized",
        models=[ModelSpec("toy", "toy", {"weights": str(toy_artifacts["weights"]), "dtype": "float32"})],
        attacks=["vanishing", "mislabeling", "untargeted"],
        iteration_grid=[2, 4],
        dataset_annotations=str(ann),
        dataset_images=str(root),
        images_per_repetition=6,
        repetitions=2,
        master_seed=7,
    )
    args.update(kw)
    return ExperimentPlan(**args)


class TestIngest:
    def write(self, tmp_path, annotations, images=({"id": 1, "file_name": "a.png", "width": 100, "height": 200},)):
        from PIL import Image

        for im in images:
            if im["file_name"] != "missing.png":
                Image.new("RGB", (im["width"], im["height"])).save(tmp_path / im["file_name"])
        path = tmp_path / "ann.json"
        path.write_text(json.dumps({"images": list(images), "annotations": annotations, "categories": [{"id": 3, "name": "cat"}]}))
        return ingest_dataset(path, tmp_path)

    def test_normalizes_xywh(self, tmp_path):
        ds = self.write(tmp_path, [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [10, 20, 30, 40]}])
        (box, label), = ds.ground_truth(1)
        assert box.as_tuple() == pytest.approx((0.10, 0.10, 0.40, 0.30))
        assert label == 0

    def test_negative_width_skipped(self, tmp_path):
        ds = self.write(tmp_path, [{"id": 5, "image_id": 1, "category_id": 3, "bbox": [10, 20, -3, 40]}])
        assert ds.ground_truth(1) == []
        assert ds.report.skipped_annotations[0][0] == 5

    def test_missing_image_counted(self, tmp_path):
        ds = self.write(
            tmp_path,
            [{"id": 1, "image_id": 2, "category_id": 3, "bbox": [1, 1, 5, 5]}],
            images=({"id": 1, "file_name": "a.png", "width": 10, "height": 10}, {"id": 2, "file_name": "missing.png", "width": 10, "height": 10}),
        )
        assert ds.image_ids == [1] and ds.report.num_missing == 1

    def test_unknown_category(self, tmp_path):
        ds = self.write(tmp_path, [{"id": 9, "image_id": 1, "category_id": 77, "bbox": [1, 1, 5, 5]}])
        assert ds.report.skipped_annotations == [(9, "unknown category 77")]

    def test_coco_box_clips(self):
        assert coco_box([90, 0, 20, 10], 100, 100).x_max == 1.0

    def test_toy_roundtrip(self, tmp_path):
        scenes = toy.make_scenes(5, seed=2)
        path = write_coco(tmp_path, [(s.image_id, s.image, s.objects) for s in scenes], toy.CLASS_NAMES)
        ds = ingest_dataset(path, tmp_path)
        assert ds.category_names == list(toy.CLASS_NAMES)
        for s in scenes:
            got = ds.ground_truth(s.image_id)
            assert [lab for _, lab in got] == [lab for _, lab in s.objects]
            for (a, _), (b, _) in zip(got, s.objects):
                assert a.as_tuple() == pytest.approx(b.as_tuple(), abs=1e-12)
            assert np.array_equal(np.round(ds.load_image(s.image_id) * 255).astype(np.uint8), s.image)


class _Lookup(DetectorAdapter):
    """Predicts from a table keyed on the image's mean gray level."""

    model_kind = "toy"
    num_classes = 2

    def __init__(self, table):
        self.table = table

    @property
    def loss_components(self):
        return frozenset({"objectness", "class", "box"})

    def predict(self, image, confidence_floor=0.3):
        return self.table.get(int(round(image.mean() * 255)), [])

    def loss_and_gradient(self, image, target, selection):
        return 0.0, np.zeros_like(image)


class TestClassAccuracy:
    def test_seven_of_ten(self, tmp_path):
        box = BoundingBox(0.1, 0.1, 0.5, 0.5)
        images, table = [], {}
        for i in range(10):
            gray = 10 + i
            images.append((i, np.full((8, 8, 3), gray, np.uint8), [(box, 0)]))
            if i < 7:
                table[gray] = [detection(box.as_tuple(), 0, 0.9, 2)]
        images.append((20, np.full((8, 8, 3), 50, np.uint8), [(box, 1)]))
        ds = ingest_dataset(write_coco(tmp_path, images, ["a", "b", "c"]), tmp_path)
        acc = compute_class_accuracy(ds, _Lookup(table))
        assert acc == {0: 0.7, 1: 0.0}
        assert 2 not in acc

    def test_toy_accuracy_in_range(self, toy_detector32, toy_dataset):
        acc = compute_class_accuracy(toy_dataset, toy_detector32)
        assert set(acc) == {0, 1, 2, 3}
        assert all(0.5 < v <= 1.0 for v in acc.values())


class TestPlan:
    def test_yaml_roundtrip(self, tmp_path, toy_artifacts, small_data):
        text = """
design: arbitrary_region
models: [{name: m, kind: toy, weights: w.bin}]
dataset: {annotations: data/ann.json, images: data}
attacks: [vanishing]
iteration_grid: [10, 50]
images_per_cell: 8
repetitions: 2
side_fractions: [0.1, 0.7]
distance_fractions: [0.01]
"""
        (tmp_path / "p.yaml").write_text(text)
        plan = load_plan(tmp_path / "p.yaml")
        assert plan.images_per_repetition == 4
        assert plan.models[0].options["weights"] == str(tmp_path / "w.bin")
        assert plan.dataset_images == str(tmp_path / "data")
        assert len(plan.cells()) == 4
        assert {c.side_fraction for c in plan.cells()} == {0.1, 0.7}

    @pytest.mark.parametrize(
        "bad",
        [{"iteration_grid": [0]}, {"attacks": ["sideways"]}, {"design": "other"}, {"norm_variants": ["l2_1"]}, {"factor_subsets": [["shiny"]]}],
    )
    def test_invalid(self, toy_artifacts, small_data, bad):
        with pytest.raises(ValueError):
            make_plan(toy_artifacts, small_data, **bad)

    def test_norm(self):
        assert norm_budget("unbounded") is None and norm_budget("linf_0.05") == 0.05

    def test_sampling_without_replacement(self):
        ids = list(range(30))
        draw = sample_images(ids, 3, 0, 30)
        assert sorted(draw) == ids
        assert sample_images(ids, 3, 0, 10) == sample_images(ids, 3, 0, 10)
        assert sample_images(ids, 3, 0, 10) != sample_images(ids, 3, 1, 10)
        with pytest.raises(ValueError):
            sample_images(ids, 3, 0, 31)


class TestRunPlan:
    def test_determinism_and_schema(self, toy_artifacts, small_data, tmp_path):
        plan = make_plan(toy_artifacts, small_data)
        run_plan(plan, tmp_path / "a")
        run_plan(plan, tmp_path / "b")
        a = (tmp_path / "a" / "records.jsonl").read_bytes()
        assert a == (tmp_path / "b" / "records.jsonl").read_bytes()
        records = read_records(tmp_path / "a")
        assert len(records) == len(plan.cells()) * plan.images_per_cell
        for r in records:
            jsonschema.validate(r, SCHEMA)

    def test_refuses_overwrite(self, toy_artifacts, small_data, tmp_path):
        plan = make_plan(toy_artifacts, small_data, iteration_grid=[2], attacks=["vanishing"])
        run_plan(plan, tmp_path)
        with pytest.raises(OutputExistsError):
            run_plan(plan, tmp_path)
        with pytest.raises(PlanMismatchError):
            run_plan(make_plan(toy_artifacts, small_data, iteration_grid=[3], attacks=["vanishing"]), tmp_path, resume=True)

    def test_resume_after_interrupt(self, toy_artifacts, small_data, tmp_path):
        plan = make_plan(toy_artifacts, small_data)
        run_plan(plan, tmp_path / "full")

        def stop(unit, n):
            if n == 3:
                raise Interrupt

        with pytest.raises(Interrupt):
            run_plan(plan, tmp_path / "part", on_unit_complete=stop)
        # a torn write past the checkpoint must be discarded on resume
        with open(tmp_path / "part" / "records.jsonl", "a") as fh:
            fh.write('{"partial": ')
        summary = run_plan(plan, tmp_path / "part", resume=True)
        assert summary.units_resumed == 3
        full = read_records(tmp_path / "full")
        part = read_records(tmp_path / "part")
        assert len(part) == len(full)
        assert normalized_records(part) == normalized_records(full)

    def test_skip_propagation(self, toy_artifacts, small_data, tmp_path):
        plan = make_plan(toy_artifacts, small_data, images_per_repetition=13, repetitions=1, iteration_grid=[2])
        records = read_records(run_plan(plan, tmp_path).out_dir)
        lone = [r for r in records if r["image_id"] == 99]
        assert len(lone) == 3
        assert all(r["status"] == "skipped" and "fewer than 2" in r["skip_reason"] for r in lone)

    def test_count_conservation_and_cross_cell_consistency(self, toy_artifacts, small_data, tmp_path):
        plan = make_plan(toy_artifacts, small_data)
        summary = run_plan(plan, tmp_path)
        records = read_records(tmp_path)
        for cell, counts in summary.per_cell.items():
            assert sum(counts.values()) == plan.images_per_cell
        chosen: dict[int, set] = {}
        for r in records:
            if r["status"] == "ok":
                key = (tuple(r["selection"]["target_box"]), tuple(r["selection"]["perturb_box"]))
                chosen.setdefault(r["image_id"], set()).add(key)
        assert chosen and all(len(v) == 1 for v in chosen.values())

    def test_replay(self, toy_artifacts, small_data, tmp_path):
        plan = make_plan(toy_artifacts, small_data, iteration_grid=[4])
        run_plan(plan, tmp_path)
        records = [r for r in read_records(tmp_path) if r["status"] == "ok"]
        for r in records[::5]:
            again = replay_record(r, plan)
            assert again["result"] == r["result"]
            assert again == r

    def test_quarantine(self, toy_artifacts, small_data, tmp_path):
        class Flaky(toy.ToyDetector):
            def loss_and_gradient(self, image, target, selection):
                if target.mode.value == "mislabeling":
                    raise RuntimeError("boom")
                return super().loss_and_gradient(image, target, selection)

        def load(weights, dtype="float32"):
            base = toy.ToyDetector.load(weights)
            return Flaky(base.config, base.net, seed=base.seed)

        reg = AdapterRegistry()
        reg.register("toy", load)
        plan = make_plan(toy_artifacts, small_data, iteration_grid=[2])
        summary = run_plan(plan, tmp_path, registry=reg)
        assert list(summary.quarantined) == ["randomized/toy/mislabeling/T2/unbounded"]
        modes = {r["cell"]["mode"] for r in read_records(tmp_path)}
        assert modes == {"vanishing", "untargeted"}

    def test_workers_match_serial(self, toy_artifacts, small_data, tmp_path):
        plan = make_plan(toy_artifacts, small_data, iteration_grid=[2])
        run_plan(plan, tmp_path / "serial")
        run_plan(plan, tmp_path / "par", workers=2)
        assert (tmp_path / "serial" / "records.jsonl").read_bytes() == (tmp_path / "par" / "records.jsonl").read_bytes()

    def test_arbitrary_and_deliberate_designs(self, toy_artifacts, small_data, tmp_path):
        arb = make_plan(toy_artifacts, small_data, design="arbitrary_region", side_fractions=[0.1], distance_fractions=[0.05], iteration_grid=[2])
        recs = read_records(run_plan(arb, tmp_path / "arb").out_dir)
        ok = [r for r in recs if r["status"] == "ok"]
        assert ok and all(not r["covariates"]["perturb_is_object"] for r in ok)
        de = make_plan(toy_artifacts, small_data, design="deliberate_factors", factor_subsets=[[], ["near"]], iteration_grid=[2], norm_variants=["linf_0.05"])
        recs = read_records(run_plan(de, tmp_path / "de").out_dir)
        near = [r for r in recs if r["status"] == "ok" and r["cell"]["factors"] == ["near"]]
        assert all(r["covariates"]["distance"] < 0.25 and r["covariates"]["num_factors"] == 1 for r in near)

    def test_unregistered_model(self, toy_artifacts, small_data, tmp_path):
        plan = make_plan(toy_artifacts, small_data)
        with pytest.raises(KeyError):
            run_plan(plan, tmp_path, registry=AdapterRegistry())
