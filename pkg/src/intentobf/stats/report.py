"""Write regression tables, binned summaries and trend plots to disk."""

from __future__ import annotations

import csv
import re
from pathlib import Path
from typing import Sequence

import numpy as np

from intentobf.stats.binning import BinSummary
from intentobf.stats.hypotheses import HypothesisTable
from intentobf.stats.logistic import INTERCEPT, GroupFailure, RegressionResult, TermEstimate

TABLE_COLUMNS = ("term", "sig", "estimate", "std.error", "statistic", "p.value", "conf.low", "conf.high")
INDEX_COLUMNS = ("hypothesis", "group", "status", "n", "file", "note")
SUMMARY_COLUMNS = ("group", "x", "x.low", "x.high", "n", "successes", "proportion", "conf.low", "conf.high")


def _fmt(value: float | None, digits: int) -> str:
    if value is None:
        return ""
    if not np.isfinite(value):
        return "Inf" if value > 0 else "-Inf"
    text = f"{value:.{digits}f}"
    # avoid "-0.000"
    return text[1:] if text.startswith("-") and float(text) == 0 else text


def table_rows(result: RegressionResult, digits: int = 3, include_intercept: bool = False) -> list[list[str]]:
    rows = []
    for t in result.terms:
        if t.term == INTERCEPT and not include_intercept:
            continue
        rows.append(_row(t, digits))
    return rows


def _row(t: TermEstimate, digits: int) -> list[str]:
    if t.is_reference:
        return [t.term, "", _fmt(0.0, digits), "", "", "", "", ""]
    return [
        t.term,
        "*" if t.significant else "",
        _fmt(t.estimate, digits),
        _fmt(t.std_error, digits),
        _fmt(t.statistic, digits),
        _fmt(t.p_value, digits),
        _fmt(t.conf_low, digits),
        _fmt(t.conf_high, digits),
    ]


def group_label(group: dict[str, object]) -> str:
    return "_".join(str(v) for v in group.values()) or "all"


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "-", text).strip("-") or "all"


def write_table(path: Path, rows: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(TABLE_COLUMNS)
        writer.writerows(rows)


def emit_report(
    tables: Sequence[HypothesisTable],
    summaries: dict[str, list[BinSummary]] | None = None,
    out_dir: str | Path = "report",
    digits: int = 3,
    include_intercept: bool = False,
    plots: bool = True,
) -> list[Path]:
    """Emit one 8-column CSV per (hypothesis, group) plus an ``index.csv``.

    Reference levels print an estimate of zero and blank inferential fields.
    When ``tables`` is empty a header-only ``results.csv`` is written.
    Binned summaries land under ``summaries/`` and plots, one per facet, under
    ``plots/``. Returns the files written.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "tables").mkdir(exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    written: list[Path] = []
    index_rows = []

    if not tables:
        path = out / "tables" / "results.csv"
        write_table(path, [])
        written.append(path)

    for table in tables:
        if table.skipped:
            index_rows.append([table.name, "", "skipped", "", "", table.skipped])
            continue
        hdir = out / "tables" / _slug(table.name)
        hdir.mkdir(exist_ok=True)
        for res in table.results:
            label = group_label(res.group)
            if isinstance(res, GroupFailure):
                index_rows.append([table.name, label, "failed", res.n, "", res.reason])
                continue
            path = hdir / f"{_slug(label)}.csv"
            write_table(path, table_rows(res, digits, include_intercept))
            written.append(path)
            note = "; ".join(table.notes + ([] if res.converged else ["did not converge"]))
            index_rows.append([table.name, label, "ok", res.n, str(path.relative_to(out)), note])

    index = out / "tables" / "index.csv"
    with open(index, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(INDEX_COLUMNS)
        writer.writerows(index_rows)
    written.append(index)

    fits = {t.name: t for t in tables}
    for name, bins in (summaries or {}).items():
        sdir = out / "summaries"
        sdir.mkdir(exist_ok=True)
        path = sdir / f"{_slug(name)}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SUMMARY_COLUMNS)
            for b in bins:
                writer.writerow(
                    [group_label(b.group), *(_fmt(v, 6) for v in (b.x_center, b.x_low, b.x_high)), b.n, b.successes]
                    + [_fmt(v, 6) for v in (b.proportion, b.conf_low, b.conf_high)]
                )
        written.append(path)
        if plots and bins:
            written.extend(plot_trends(name, bins, fits.get(name), out / "plots"))
    return written


def _trendline(result: RegressionResult | None, xs: np.ndarray, x_name: str) -> np.ndarray | None:
    """Fitted probability along ``x_name`` when it is the only regressor."""
    if result is None:
        return None
    names = [t.term for t in result.terms if not t.is_reference]
    if names == [INTERCEPT, x_name]:
        b0, b1 = result[INTERCEPT].estimate, result[x_name].estimate
        return 1.0 / (1.0 + np.exp(-(b0 + b1 * xs)))
    if names == [INTERCEPT, f"log({x_name})"]:
        b0, b1 = result[INTERCEPT].estimate, result[f"log({x_name})"].estimate
        return 1.0 / (1.0 + np.exp(-(b0 + b1 * np.log(xs))))
    return None


def plot_trends(name: str, bins: Sequence[BinSummary], table: HypothesisTable | None, out_dir: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    from intentobf.stats.hypotheses import TREND_AXES

    x_name = TREND_AXES.get(name, ("x", None))[0]
    facets: dict[str, list[BinSummary]] = {}
    for b in bins:
        facets.setdefault(group_label(b.group), []).append(b)
    fits: dict[str, RegressionResult] = {}
    if table is not None:
        for res in table.results:
            if isinstance(res, RegressionResult):
                fits[group_label(res.group)] = res

    pdir = out_dir / _slug(name)
    pdir.mkdir(parents=True, exist_ok=True)
    paths = []
    for label, fb in sorted(facets.items()):
        fig, ax = plt.subplots(figsize=(4, 3), dpi=100)
        x = np.array([b.x_center for b in fb])
        p = np.array([b.proportion for b in fb])
        err = np.array([[b.proportion - b.conf_low for b in fb], [b.conf_high - b.proportion for b in fb]])
        ax.errorbar(x, p, yerr=err, fmt="o", capsize=3)
        if x.max() > x.min():
            grid = np.linspace(x.min(), x.max(), 100)
            curve = _trendline(fits.get(label), grid, x_name)
            if curve is not None:
                ax.plot(grid, curve)
        ax.set_xlabel(x_name)
        ax.set_ylabel("success proportion")
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(f"{name}: {label}", fontsize=9)
        fig.tight_layout()
        path = pdir / f"{_slug(label)}.png"
        fig.savefig(path)
        plt.close(fig)
        paths.append(path)
    return paths
