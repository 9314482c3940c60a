import hashlib
from pathlib import Path

import numpy as np
import pytest
import torch

import intentobf.detector.toy as toy
from intentobf.harness.dataset import ingest_dataset, write_coco

torch.set_num_threads(1)

TRAIN_IMAGES = 256
EVAL_IMAGES = 128
TRAIN_SEED = 0


def _toy_cache_key() -> str:
    src = Path(toy.__file__).read_bytes()
    return hashlib.sha256(src + f"{TRAIN_IMAGES}/{EVAL_IMAGES}/{TRAIN_SEED}".encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def toy_artifacts(request):
    """Trained toy detector weights plus a held-out COCO dataset.

    Cached in the pytest cache directory, keyed on the toy source.
    """
    root = Path(request.config.cache.mkdir("toy-" + _toy_cache_key()))
    weights = root / "toy_weights.bin"
    annotations = root / "eval" / "annotations.json"
    if not (weights.exists() and annotations.exists()):
        train = toy.make_scenes(TRAIN_IMAGES, seed=TRAIN_SEED)
        held = toy.make_scenes(EVAL_IMAGES, seed=TRAIN_SEED + 1, first_id=TRAIN_IMAGES)
        det, _ = toy.build_and_overfit(train, seed=TRAIN_SEED)
        write_coco(root / "eval", [(s.image_id, s.image, s.objects) for s in held], toy.CLASS_NAMES)
        det.save(weights)
    return {"weights": weights, "annotations": annotations, "images": root / "eval"}


@pytest.fixture(scope="session")
def toy_detector(toy_artifacts):
    return toy.ToyDetector.load(toy_artifacts["weights"], dtype=torch.float64)


@pytest.fixture(scope="session")
def toy_detector32(toy_artifacts):
    return toy.ToyDetector.load(toy_artifacts["weights"], dtype=torch.float32)


@pytest.fixture(scope="session")
def toy_dataset(toy_artifacts):
    return ingest_dataset(toy_artifacts["annotations"], toy_artifacts["images"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
