"""Maximum-likelihood logistic regression by IRLS, with Wald inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
from scipy import special, stats

Z_95 = 1.96
ALPHA = 0.05
INTERCEPT = "(Intercept)"


class FitError(ValueError):
    """The logistic MLE is undefined or could not be computed."""


class SeparationError(FitError):
    pass


class DegenerateResponseError(FitError):
    pass


class RankDeficientError(FitError):
    pass


@dataclass(frozen=True)
class Term:
    field: str
    transform: str = "identity"
    categorical: bool = False
    reference: str | None = None
    label: str | None = None

    def __post_init__(self) -> None:
        if self.transform not in ("identity", "log"):
            raise ValueError(f"unknown transform {self.transform!r}")
        if self.categorical and self.transform != "identity":
            raise ValueError("categorical terms cannot be transformed")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        return f"log({self.field})" if self.transform == "log" else self.field


@dataclass(frozen=True)
class Formula:
    response: str
    terms: tuple[Term, ...]
    interactions: tuple[tuple[str, str], ...] = ()
    split_by: tuple[str, ...] = ()

    @property
    def fields(self) -> set[str]:
        return {self.response, *(t.field for t in self.terms), *self.split_by}


@dataclass(frozen=True)
class TermEstimate:
    term: str
    estimate: float
    std_error: float | None = None
    statistic: float | None = None
    p_value: float | None = None
    conf_low: float | None = None
    conf_high: float | None = None
    is_reference: bool = False

    @property
    def significant(self) -> bool:
        return self.p_value is not None and self.p_value < ALPHA


@dataclass
class RegressionResult:
    terms: list[TermEstimate]
    iterations: int
    converged: bool
    log_likelihood: float
    n: int
    group: dict[str, object] = field(default_factory=dict)

    def __getitem__(self, name: str) -> TermEstimate:
        for t in self.terms:
            if t.term == name:
                return t
        raise KeyError(name)

    def coefficients(self) -> dict[str, float]:
        return {t.term: t.estimate for t in self.terms if not t.is_reference}


@dataclass
class GroupFailure:
    reason: str
    n: int
    group: dict[str, object] = field(default_factory=dict)


def _log_likelihood(X: np.ndarray, y: np.ndarray, beta: np.ndarray, w: np.ndarray) -> float:
    eta = X @ beta
    # y*eta - log(1 + e^eta), evaluated stably
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def irls(
    X: np.ndarray,
    y: np.ndarray,
    weights: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
    separation_bound: float = 30.0,
) -> tuple[np.ndarray, np.ndarray, int, bool, float]:
    """Newton-Raphson / IRLS for the logistic log-likelihood.

    Returns ``(beta, covariance, iterations, converged, log_likelihood)``.
    Stops when the relative log-likelihood change drops below ``tol``.
    Separation is declared when a coefficient passes ``separation_bound`` on
    the log-odds scale while the likelihood is still improving. The iteration
    runs on a centred and scaled copy of ``X`` and maps back at the end, so the
    bound is judged in standardized units and a covariate far from zero does
    not trip it through the intercept.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=np.float64)
    n, k = X.shape
    if n == 0:
        raise FitError("empty design")
    if np.linalg.matrix_rank(X) < k:
        raise RankDeficientError(f"design matrix has rank {np.linalg.matrix_rank(X)} < {k} columns")
    if np.all(y == y[0]):
        raise DegenerateResponseError("response is constant; the MLE does not exist")

    # X = Z @ A^-1 with Z standardized; coefficients map back as beta = A @ beta_z
    const = np.ptp(X, axis=0) == 0
    has_intercept = bool(const.any())
    centre = np.where(const | (not has_intercept), 0.0, X.mean(axis=0))
    scale = np.where(const, 1.0, X.std(axis=0))
    Z = (X - centre) / scale
    A = np.diag(1.0 / scale)
    if has_intercept:
        j = int(np.flatnonzero(const)[0])
        Z[:, j] = 1.0
        A[j, j] = 1.0 / X[0, j]
        A[j] -= np.where(const, 0.0, centre / scale) / X[0, j]
    beta_z, cov_z, it, converged, ll = _irls_core(Z, y, w, tol, max_iter, separation_bound)
    return A @ beta_z, A @ cov_z @ A.T, it, converged, ll


def _irls_core(X, y, w, tol, max_iter, separation_bound):
    k = X.shape[1]

    beta = np.zeros(k)
    ll = _log_likelihood(X, y, beta, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = special.expit(X @ beta)
        W = w * p * (1.0 - p)
        info = (X * W[:, None]).T @ X
        score = X.T @ (w * (y - p))
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError as exc:
            raise SeparationError(f"information matrix became singular: {exc}") from exc
        new_beta = beta + step
        new_ll = _log_likelihood(X, y, new_beta, w)
        halvings = 0
        while new_ll < ll and halvings < 30:
            step /= 2.0
            new_beta = beta + step
            new_ll = _log_likelihood(X, y, new_beta, w)
            halvings += 1
        change = abs(new_ll - ll) / max(abs(ll), 1e-300)
        improving = new_ll > ll
        beta, ll = new_beta, new_ll
        if np.max(np.abs(beta)) > separation_bound and improving:
            raise SeparationError("coefficients diverge while the likelihood still improves (perfect separation)")
        if change < tol:
            converged = True
            break

    p = special.expit(X @ beta)
    W = w * p * (1.0 - p)
    info = (X * W[:, None]).T @ X
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise SeparationError("information matrix is singular at the estimate") from exc
    return beta, cov, it, converged, ll


def wald_rows(names: Sequence[str], beta: np.ndarray, cov: np.ndarray) -> list[TermEstimate]:
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    rows = []
    for name, b, s in zip(names, beta, se):
        z = b / s if s > 0 else float("inf") * np.sign(b)
        p = float(2.0 * stats.norm.sf(abs(z)))
        rows.append(
            TermEstimate(
                term=name,
                estimate=float(b),
                std_error=float(s),
                statistic=float(z),
                p_value=p,
                conf_low=float(b - Z_95 * s),
                conf_high=float(b + Z_95 * s),
            )
        )
    return rows


# --------------------------------------------------------------------------
# design matrices


def _levels(series: pd.Series, reference: str | None) -> list:
    levels = sorted(series.dropna().unique(), key=str)
    if reference is not None:
        match = [lv for lv in levels if str(lv) == str(reference)]
        if not match:
            raise FitError(f"reference level {reference!r} not present in data")
        levels.remove(match[0])
        levels.insert(0, match[0])
    return levels


def design_matrix(data: pd.DataFrame, formula: Formula) -> tuple[np.ndarray, list[str], list[TermEstimate]]:
    """Build ``X`` with an intercept; returns column names and reference-level rows."""
    columns: dict[str, np.ndarray] = {INTERCEPT: np.ones(len(data))}
    term_columns: dict[str, list[str]] = {}
    references: list[TermEstimate] = []
    for term in formula.terms:
        values = data[term.field]
        if term.categorical:
            levels = _levels(values, term.reference)
            if len(levels) < 2:
                raise RankDeficientError(f"categorical term {term.field!r} has fewer than 2 levels")
            references.append(TermEstimate(str(levels[0]), 0.0, is_reference=True))
            names = []
            for lv in levels[1:]:
                columns[str(lv)] = (values.astype(str) == str(lv)).to_numpy(dtype=np.float64)
                names.append(str(lv))
            term_columns[term.name] = names
        else:
            x = values.to_numpy(dtype=np.float64)
            if term.transform == "log":
                if np.any(~(x > 0)):
                    raise FitError(f"log transform needs strictly positive {term.field!r}")
                x = np.log(x)
            columns[term.name] = x
            term_columns[term.name] = [term.name]
    for a, b in formula.interactions:
        for ca in term_columns[a]:
            for cb in term_columns[b]:
                columns[f"{ca} * {cb}"] = columns[ca] * columns[cb]
    names = list(columns)
    return np.column_stack([columns[c] for c in names]), names, references


def _groups(data: pd.DataFrame, split_by: Sequence[str]) -> Iterable[tuple[dict[str, object], pd.DataFrame]]:
    if not split_by:
        yield {}, data
        return
    for key, frame in data.groupby(list(split_by), sort=True):
        key = key if isinstance(key, tuple) else (key,)
        yield dict(zip(split_by, key)), frame


def fit_frame(frame: pd.DataFrame, formula: Formula, group: dict[str, object] | None = None) -> RegressionResult:
    """Fit one group. Raises :class:`FitError` subclasses for undefined fits."""
    group = group or {}
    if frame.empty:
        raise FitError("empty group")
    y = frame[formula.response].to_numpy()
    if not np.isin(y, (0, 1, True, False)).all():
        raise FitError(f"response {formula.response!r} is not binary")
    X, names, references = design_matrix(frame, formula)
    beta, cov, iterations, converged, ll = irls(X, y.astype(np.float64))
    rows = wald_rows(names, beta, cov)
    ordered = [rows[0], *references, *rows[1:]]
    return RegressionResult(ordered, iterations, converged, ll, len(frame), group)


def fit_logistic(data: pd.DataFrame | Sequence[dict], formula: Formula) -> list[RegressionResult | GroupFailure]:
    """Fit ``formula`` separately for every ``split_by`` group."""
    frame = data if isinstance(data, pd.DataFrame) else pd.DataFrame(list(data))
    missing = formula.fields - set(frame.columns)
    if missing:
        raise FitError(f"records lack fields {sorted(missing)}")
    frame = frame.dropna(subset=sorted(formula.fields))
    if frame.empty:
        return [GroupFailure("empty group", 0)]
    out: list[RegressionResult | GroupFailure] = []
    for group, sub in _groups(frame, formula.split_by):
        try:
            out.append(fit_frame(sub, formula, group))
        except FitError as exc:
            out.append(GroupFailure(str(exc), len(sub), group))
    return out
