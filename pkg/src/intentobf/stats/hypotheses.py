"""Regression designs over attack records.

Records are the JSON objects written by the harness. :func:`records_frame`
flattens them into one analysis row per judged attack; skipped and failed
records are dropped there.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import pandas as pd

from intentobf.stats.logistic import Formula, GroupFailure, RegressionResult, Term, fit_logistic

UNBOUNDED = "unbounded"

ANALYSIS_COLUMNS = (
    "design",
    "model",
    "mode",
    "iterations",
    "norm",
    "image_id",
    "success",
    "confidence",
    "iou",
    "distance",
    "size",
    "accuracy",
    "probability",
    "num_factors",
    "length",
    "distance_fraction",
    "object",
)


def records_frame(records: Iterable[Mapping]) -> pd.DataFrame:
    rows = []
    for rec in records:
        if rec.get("status") != "ok":
            continue
        cell = rec["cell"]
        cov = rec["covariates"]
        rows.append(
            {
                "design": cell["design"],
                "model": cell["model"],
                "mode": cell["mode"],
                "iterations": cell["iterations"],
                "norm": cell["norm"],
                "image_id": rec["image_id"],
                "success": int(bool(rec["result"]["success"])),
                "confidence": cov["target_confidence"],
                "iou": cov["target_iou"],
                "distance": cov["distance"],
                "size": cov["perturb_area"],
                "accuracy": cov["class_accuracy"],
                "probability": cov["intended_prob"],
                "num_factors": cov["num_factors"],
                "length": cov["side_fraction"],
                "distance_fraction": cov["distance_fraction"],
                "object": int(bool(cov["perturb_is_object"])),
            }
        )
    return pd.DataFrame(rows, columns=list(ANALYSIS_COLUMNS))


@dataclass(frozen=True)
class Hypothesis:
    name: str
    title: str
    formula: Formula
    designs: tuple[str, ...] = ("randomized",)
    modes: tuple[str, ...] | None = None
    all_iterations: bool = False


@dataclass
class HypothesisTable:
    hypothesis: Hypothesis
    results: list[RegressionResult | GroupFailure] = field(default_factory=list)
    skipped: str | None = None
    notes: list[str] = field(default_factory=list)

    @property
    def name(self) -> str:
        return self.hypothesis.name


def _c(name: str) -> Term:
    return Term(name)


BY_CELL = ("model", "mode")

HYPOTHESES: dict[str, Hypothesis] = {
    h.name: h
    for h in (
        Hypothesis(
            "h1",
            "model kind",
            Formula("success", (Term("model", categorical=True, reference="yolov3"),), split_by=("mode",)),
        ),
        Hypothesis(
            "h2",
            "targeted versus untargeted",
            Formula("success", (Term("mode", categorical=True, reference="vanishing"),), split_by=("model",)),
        ),
        Hypothesis(
            "h3",
            "vanishing versus mislabeling",
            Formula("success", (Term("mode", categorical=True, reference="vanishing"),), split_by=("model",)),
        ),
        Hypothesis(
            "h4",
            "attack iterations",
            Formula("success", (Term("iterations", transform="log"),), split_by=BY_CELL),
            all_iterations=True,
        ),
        Hypothesis("h5", "target confidence", Formula("success", (_c("confidence"),), split_by=BY_CELL)),
        Hypothesis(
            "h6",
            "perturb box size",
            Formula("success", (_c("distance"), _c("size")), (("distance", "size"),), BY_CELL),
        ),
        Hypothesis(
            "h7",
            "perturb-target distance",
            Formula("success", (_c("distance"), _c("size")), (("distance", "size"),), BY_CELL),
        ),
        Hypothesis(
            "h8",
            "target class accuracy",
            Formula("success", (_c("accuracy"), _c("confidence")), (("accuracy", "confidence"),), BY_CELL),
        ),
        Hypothesis(
            "h9",
            "target IOU",
            Formula("success", (_c("iou"),), split_by=BY_CELL),
            modes=("untargeted",),
        ),
        Hypothesis(
            "h10",
            "intended class probability",
            Formula(
                "success",
                (Term("probability", transform="log"), _c("confidence")),
                (("log(probability)", "confidence"),),
                BY_CELL,
            ),
            modes=("mislabeling",),
        ),
        Hypothesis(
            "deliberate",
            "number of selection factors",
            Formula("success", (_c("num_factors"),), split_by=BY_CELL),
            designs=("deliberate_factors",),
        ),
        Hypothesis(
            "arbitrary",
            "arbitrary region distance and length",
            Formula("success", (_c("distance"), _c("length")), (("distance", "length"),), BY_CELL),
            designs=("arbitrary_region",),
        ),
        Hypothesis(
            "object-vs-region",
            "object versus non-object perturb",
            Formula("success", (_c("object"), _c("distance"), _c("size")), (("distance", "size"),), BY_CELL),
            designs=("randomized", "arbitrary_region"),
        ),
    )
}

SUITES = ("all", *HYPOTHESES)


def _restrict(frame: pd.DataFrame, hyp: Hypothesis) -> pd.DataFrame:
    sub = frame[frame["design"].isin(hyp.designs) & (frame["norm"] == UNBOUNDED)]
    if hyp.modes is not None:
        sub = sub[sub["mode"].isin(hyp.modes)]
    if not hyp.all_iterations and not sub.empty:
        # strongest budget, taken per design so combined designs keep both
        top = sub.groupby("design")["iterations"].transform("max")
        sub = sub[sub["iterations"] == top]
    return sub


def _with_reference_fallback(sub: pd.DataFrame, formula: Formula, notes: list[str]) -> Formula:
    terms = []
    for term in formula.terms:
        if term.categorical and term.reference is not None:
            levels = sorted(map(str, sub[term.field].dropna().unique()))
            if levels and term.reference not in levels:
                notes.append(f"reference level {term.reference!r} absent for {term.field!r}; using {levels[0]!r}")
                term = Term(term.field, categorical=True, reference=levels[0], label=term.label)
        terms.append(term)
    return Formula(formula.response, tuple(terms), formula.interactions, formula.split_by)


def run_hypothesis(frame: pd.DataFrame, hyp: Hypothesis) -> HypothesisTable:
    table = HypothesisTable(hyp)
    missing = hyp.formula.fields - set(frame.columns)
    if missing:
        table.skipped = f"records lack fields {sorted(missing)}"
        return table
    sub = _restrict(frame, hyp)
    needed = sorted(hyp.formula.fields)
    usable = sub.dropna(subset=needed)
    if sub.empty:
        scope = f"designs {list(hyp.designs)}" + (f", modes {list(hyp.modes)}" if hyp.modes else "")
        table.skipped = f"no judged records for {scope}"
        return table
    if usable.empty:
        empty = [c for c in needed if sub[c].isna().all()]
        table.skipped = f"covariates missing from every record: {empty}"
        return table
    formula = _with_reference_fallback(usable, hyp.formula, table.notes)
    table.results = fit_logistic(usable, formula)
    return table


def hypothesis_suite(records: Iterable[Mapping] | pd.DataFrame, suite: str | Sequence[str] = "all") -> list[HypothesisTable]:
    """Fit the requested designs; inapplicable ones come back with ``skipped`` set."""
    frame = records if isinstance(records, pd.DataFrame) else records_frame(records)
    if isinstance(suite, str):
        names = list(HYPOTHESES) if suite == "all" else [suite]
    else:
        names = list(suite)
    unknown = [n for n in names if n not in HYPOTHESES]
    if unknown:
        raise KeyError(f"unknown hypotheses {unknown}; choose from {list(SUITES)}")
    return [run_hypothesis(frame, HYPOTHESES[n]) for n in names]


# binned-summary axis for each design's trend plot
TREND_AXES: dict[str, tuple[str, str | int]] = {
    "h4": ("iterations", "unique"),
    "h5": ("confidence", "quantile"),
    "h6": ("size", "quantile"),
    "h7": ("distance", "quantile"),
    "h8": ("accuracy", "quantile"),
    "h9": ("iou", "quantile"),
    "h10": ("probability", "quantile"),
    "deliberate": ("num_factors", "unique"),
    "arbitrary": ("length", "unique"),
    "object-vs-region": ("object", "unique"),
}


def trend_frame(frame: pd.DataFrame, name: str) -> pd.DataFrame:
    return _restrict(frame, HYPOTHESES[name])
