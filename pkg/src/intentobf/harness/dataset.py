"""COCO-style detection datasets: ingestion and synthetic export."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from intentobf.geometry import BoundingBox

log = logging.getLogger(__name__)


@dataclass
class ImageEntry:
    image_id: int
    file_name: str
    width: int
    height: int
    objects: list[tuple[BoundingBox, int]]


@dataclass
class IngestReport:
    skipped_annotations: list[tuple[int, str]] = field(default_factory=list)
    missing_images: list[int] = field(default_factory=list)

    @property
    def num_missing(self) -> int:
        return len(self.missing_images)


@dataclass
class Dataset:
    """Ground truth addressable by image id, with category ids remapped to 0..K-1."""

    root: Path
    images: dict[int, ImageEntry]
    categories: list[int]
    category_names: list[str]
    report: IngestReport

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[ImageEntry]:
        return iter(self.images[i] for i in self.image_ids)

    @property
    def image_ids(self) -> list[int]:
        return sorted(self.images)

    @property
    def num_classes(self) -> int:
        return len(self.categories)

    def ground_truth(self, image_id: int) -> list[tuple[BoundingBox, int]]:
        return self.images[image_id].objects

    def load_image(self, image_id: int) -> np.ndarray:
        """8-bit RGB converted to float64 in [0, 1], shape H x W x 3."""
        entry = self.images[image_id]
        with Image.open(self.root / entry.file_name) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        return arr / 255.0


def coco_box(bbox: Sequence[float], width: int, height: int) -> BoundingBox:
    """``[x, y, w, h]`` in pixels to a normalized box, clipped to the image."""
    x, y, w, h = (float(v) for v in bbox)
    if not (w > 0 and h > 0):
        raise ValueError(f"non-positive box size w={w}, h={h}")
    x0 = min(max(x / width, 0.0), 1.0)
    y0 = min(max(y / height, 0.0), 1.0)
    x1 = min(max((x + w) / width, 0.0), 1.0)
    y1 = min(max((y + h) / height, 0.0), 1.0)
    return BoundingBox(x0, y0, x1, y1)


def ingest_dataset(annotation_file: str | Path, image_root: str | Path) -> Dataset:
    """Read a COCO detection annotation file.

    Invalid annotations (bad sizes, unknown image or category) are skipped and
    listed in ``report.skipped_annotations``; images whose file is missing are
    dropped and counted in ``report.missing_images``.
    """
    root = Path(image_root)
    with open(annotation_file, encoding="utf-8") as fh:
        data = json.load(fh)
    cats = sorted(data.get("categories", []), key=lambda c: int(c["id"]))
    cat_ids = [int(c["id"]) for c in cats]
    cat_index = {cid: i for i, cid in enumerate(cat_ids)}
    report = IngestReport()

    images: dict[int, ImageEntry] = {}
    for im in data.get("images", []):
        iid = int(im["id"])
        if not (root / im["file_name"]).is_file():
            report.missing_images.append(iid)
            continue
        images[iid] = ImageEntry(iid, im["file_name"], int(im["width"]), int(im["height"]), [])

    missing = set(report.missing_images)
    for ann in data.get("annotations", []):
        aid = int(ann.get("id", -1))
        iid = int(ann["image_id"])
        if iid in missing:
            continue
        entry = images.get(iid)
        if entry is None:
            report.skipped_annotations.append((aid, "unknown image id"))
            continue
        cid = int(ann["category_id"])
        if cid not in cat_index:
            report.skipped_annotations.append((aid, f"unknown category {cid}"))
            continue
        try:
            box = coco_box(ann["bbox"], entry.width, entry.height)
        except (ValueError, TypeError, KeyError) as exc:
            report.skipped_annotations.append((aid, str(exc)))
            continue
        entry.objects.append((box, cat_index[cid]))

    if report.skipped_annotations or report.missing_images:
        log.warning(
            "ingest %s: skipped %d annotations, %d missing images",
            annotation_file,
            len(report.skipped_annotations),
            len(report.missing_images),
        )
    names = [str(c.get("name", c["id"])) for c in cats]
    return Dataset(root, images, cat_ids, names, report)


def write_coco(
    out_dir: str | Path,
    images: Sequence[tuple[int, np.ndarray, Sequence[tuple[BoundingBox, int]]]],
    category_names: Sequence[str],
    annotation_name: str = "annotations.json",
) -> Path:
    """Write uint8 images as PNG plus a COCO annotation file; returns its path.

    Category ids are written 1-based, as COCO does.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    img_rows, ann_rows = [], []
    ann_id = 1
    for image_id, pixels, objects in images:
        h, w = pixels.shape[:2]
        name = f"images/{image_id:06d}.png"
        Image.fromarray(np.asarray(pixels, dtype=np.uint8)).save(out / name)
        img_rows.append({"id": int(image_id), "file_name": name, "width": w, "height": h})
        for box, label in objects:
            x0, y0 = box.x_min * w, box.y_min * h
            ann_rows.append(
                {
                    "id": ann_id,
                    "image_id": int(image_id),
                    "category_id": int(label) + 1,
                    "bbox": [x0, y0, box.x_max * w - x0, box.y_max * h - y0],
                    "area": box.area * w * h,
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    payload = {
        "images": img_rows,
        "annotations": ann_rows,
        "categories": [{"id": i + 1, "name": n} for i, n in enumerate(category_names)],
    }
    path = out / annotation_name
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1)
    return path
