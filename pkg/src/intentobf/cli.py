"""Command line entry point: ``attack run | eval-baseline | toy-train | stats``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

log = logging.getLogger("intentobf")


def _toy_train(args: argparse.Namespace) -> int:
    import torch

    from intentobf.detector import toy
    from intentobf.harness.dataset import write_coco

    torch.manual_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = toy.make_scenes(args.train_images, seed=args.seed)
    held_out = toy.make_scenes(args.eval_images, seed=args.seed + 1, first_id=args.train_images)
    detector, report = toy.build_and_overfit(train, seed=args.seed, steps=args.steps)
    detector.save(out / "toy_weights.bin")
    write_coco(out / "eval", [(s.image_id, s.image, s.objects) for s in held_out], toy.CLASS_NAMES)
    recall = toy.training_recall(detector, held_out)
    info = {
        "train_recall": report.recall,
        "eval_recall": recall,
        "steps": report.steps,
        "final_loss": report.final_loss,
        "weights": str(out / "toy_weights.bin"),
        "eval_annotations": str(out / "eval" / "annotations.json"),
        "checksum": detector.state_checksum(),
    }
    print(json.dumps(info, indent=1))
    return 0


def _run(args: argparse.Namespace) -> int:
    import torch

    from intentobf.harness.plan import load_plan
    from intentobf.harness.runner import OutputExistsError, run_plan

    torch.set_num_threads(args.threads)
    overrides = {} if args.seed is None else {"master_seed": args.seed}
    plan = load_plan(args.plan, overrides)
    try:
        summary = run_plan(plan, args.out, resume=args.resume, workers=args.workers)
    except OutputExistsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary.to_json(), indent=1, sort_keys=True))
    return 1 if summary.quarantined else 0


def _eval_baseline(args: argparse.Namespace) -> int:
    from intentobf.detector.registry import default_registry
    from intentobf.harness.dataset import ingest_dataset
    from intentobf.harness.runner import compute_class_accuracy

    dataset = ingest_dataset(args.annotations, args.images or Path(args.annotations).parent)
    options = {"weights": args.weights} if args.weights else {}
    adapter = default_registry().create(args.model, **options)
    accuracy = compute_class_accuracy(dataset, adapter)
    names = dataset.category_names
    payload = {
        "images": len(dataset),
        "missing_images": dataset.report.num_missing,
        "skipped_annotations": len(dataset.report.skipped_annotations),
        "class_accuracy": {names[k] if k < len(names) else str(k): v for k, v in accuracy.items()},
    }
    print(json.dumps(payload, indent=1))
    return 0


def _stats(args: argparse.Namespace) -> int:
    from intentobf.harness.runner import read_records
    from intentobf.stats.binning import binned_summary
    from intentobf.stats.hypotheses import TREND_AXES, hypothesis_suite, records_frame, trend_frame
    from intentobf.stats.report import emit_report

    records = []
    for path in args.records:
        records.extend(read_records(path))
    frame = records_frame(records)
    tables = hypothesis_suite(frame, args.suite)
    summaries = {}
    for table in tables:
        if table.skipped or table.name not in TREND_AXES:
            continue
        x, bins = TREND_AXES[table.name]
        summaries[table.name] = binned_summary(trend_frame(frame, table.name), x, bins, ("model", "mode"))
    written = emit_report(tables, summaries, args.out, plots=not args.no_plots)
    for table in tables:
        status = f"skipped: {table.skipped}" if table.skipped else f"{len(table.results)} group(s)"
        print(f"{table.name:18s} {status}")
    print(f"wrote {len(written)} files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    from intentobf.stats.hypotheses import SUITES

    parser = argparse.ArgumentParser(prog="attack", description="Intent-obfuscating attacks on object detectors.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute an experiment plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the plan's master seed")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads per process")
    p.set_defaults(func=_run)

    p = sub.add_parser("eval-baseline", help="per-class accuracy of a detector on clean images")
    p.add_argument("--annotations", required=True)
    p.add_argument("--images", default=None)
    p.add_argument("--model", default="toy")
    p.add_argument("--weights", default=None)
    p.set_defaults(func=_eval_baseline)

    p = sub.add_parser("toy-train", help="train the toy detector and write a held-out dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-images", type=int, default=256)
    p.add_argument("--eval-images", type=int, default=128)
    p.add_argument("--steps", type=int, default=600)
    p.set_defaults(func=_toy_train)

    p = sub.add_parser("stats", help="fit the hypothesis designs and emit tables and plots")
    p.add_argument("--records", required=True, nargs="+", help="run directories or records.jsonl files")
    p.add_argument("--suite", default="all", choices=SUITES)
    p.add_argument("--out", required=True)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=_stats)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
