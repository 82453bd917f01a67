"""Error matrices and area-adjusted accuracy estimates.

Stratified estimators with the map classes as strata (rows = mapped class,
columns = reference class). With stratum weights ``W_i`` and counts
``n_ij``::

    p_ij = W_i * n_ij / n_i.
    OA   = sum_i p_ii
    UA_i = p_ii / p_i.        PA_j = p_jj / p_.j

Variances follow the usual stratified formulas; 95 % intervals are
``1.96 * SE``. Undefined quantities are NaN.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

Z95 = 1.96


@dataclass
class ErrorMatrix:
    n: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.n = np.asarray(self.n, dtype=np.int64)
        self.W = np.asarray(self.W, dtype=np.float64)
        K = self.n.shape[0]
        if self.n.shape != (K, K) or self.W.shape != (K,):
            raise ValueError("error matrix must be K x K with K weights")
        if (self.n < 0).any():
            raise ValueError("counts must be >= 0")
        if (self.W < 0).any() or abs(self.W.sum() - 1.0) > 1e-9:
            raise ValueError("stratum weights must be >= 0 and sum to 1")

    @property
    def K(self) -> int:
        return self.n.shape[0]


@dataclass
class AccuracyReport:
    oa: float
    oa_ci: float
    ua: np.ndarray
    ua_ci: np.ndarray
    pa: np.ndarray
    pa_ci: np.ndarray
    area_prop: np.ndarray
    area_prop_ci: np.ndarray
    # run-to-run standard deviations, filled by multi_run_average
    sd: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.ua)


METRICS = ("oa", "ua", "pa", "area_prop")


def error_matrix(mapped: np.ndarray, samples: Iterable, n_classes: int, W=None) -> ErrorMatrix:
    """Cross-tabulate ``(row, col, reference_class)`` samples against a label map.

    ``W`` defaults to the mapped-class pixel proportions of ``mapped``.
    """
    mapped = np.asarray(mapped)
    H, Wd = mapped.shape
    n = np.zeros((n_classes, n_classes), dtype=np.int64)
    for r, c, ref in samples:
        if not (0 <= r < H and 0 <= c < Wd):
            raise ValueError(f"sample ({r}, {c}) outside the {H}x{Wd} grid")
        n[mapped[r, c], ref] += 1
    if W is None:
        W = map_proportions(mapped, n_classes)
    return ErrorMatrix(n, W)


def map_proportions(mapped: np.ndarray, n_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(mapped).ravel(), minlength=n_classes).astype(np.float64)
    return counts / counts.sum()


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.full(np.broadcast(a, b).shape, np.nan)
    np.divide(a, b, out=out, where=b != 0)
    return out


def estimated_proportions(e: ErrorMatrix) -> np.ndarray:
    """Cell proportions ``p_ij = W_i n_ij / n_i.`` (rows of zero weight are 0)."""
    rows = e.n.sum(axis=1)
    empty = (rows == 0) & (e.W > 0)
    if empty.any():
        raise ValueError(f"stratum {int(np.flatnonzero(empty)[0])} has weight > 0 but no samples")
    frac = np.zeros(e.n.shape)
    np.divide(e.n, rows[:, None], out=frac, where=rows[:, None] > 0)
    return e.W[:, None] * frac


def area_adjusted_metrics(e: ErrorMatrix) -> AccuracyReport:
    p = estimated_proportions(e)
    rows = e.n.sum(axis=1).astype(np.float64)
    W = e.W
    K = e.K
    # within-stratum share of each reference class and its binomial variance term
    q = np.zeros(e.n.shape)
    np.divide(e.n, rows[:, None], out=q, where=rows[:, None] > 0)
    dof = rows - 1.0
    qvar = np.zeros(e.n.shape)
    np.divide(q * (1 - q), dof[:, None], out=qvar, where=dof[:, None] > 0)

    oa = float(np.trace(p))
    ua = np.array([q[i, i] if rows[i] > 0 else np.nan for i in range(K)])
    ua_var = np.diag(qvar).copy()
    ua_var[rows == 0] = np.nan
    # rows with W = 0 contribute nothing to OA
    oa_var = float(np.sum(W**2 * np.diag(qvar)))

    col = p.sum(axis=0)
    pa = _safe_div(np.diag(p), col)
    area_var = np.sum(W[:, None] ** 2 * qvar, axis=0)

    pa_var = np.full(K, np.nan)
    for j in range(K):
        if col[j] <= 0:
            continue
        pj = pa[j]
        first = W[j] ** 2 * (1 - pj) ** 2 * (qvar[j, j] if rows[j] > 0 else 0.0)
        others = sum(W[i] ** 2 * qvar[i, j] for i in range(K) if i != j)
        pa_var[j] = (first + pj**2 * others) / col[j] ** 2

    return AccuracyReport(
        oa=oa,
        oa_ci=Z95 * float(np.sqrt(oa_var)),
        ua=ua,
        ua_ci=Z95 * np.sqrt(ua_var),
        pa=pa,
        pa_ci=Z95 * np.sqrt(pa_var),
        area_prop=col,
        area_prop_ci=Z95 * np.sqrt(area_var),
    )


def area_estimates(e: ErrorMatrix, total_area: float) -> tuple[np.ndarray, np.ndarray]:
    """Per reference class: estimated area and its 95 % half-width."""
    if total_area <= 0:
        raise ValueError("total_area must be > 0")
    rep = area_adjusted_metrics(e)
    return total_area * rep.area_prop, total_area * rep.area_prop_ci


def agreement_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``(H, W, 2)`` array: agreement flag (1/0) and the class of ``b``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return np.stack([(a == b).astype(np.int64), b.astype(np.int64)], axis=-1)


def multi_run_average(reports: Sequence[AccuracyReport]) -> AccuracyReport:
    """Element-wise mean over runs; ``sd`` holds the run-to-run standard deviations.

    Values undefined in some runs (NaN) are averaged over the runs that define them.
    """
    if not reports:
        raise ValueError("need at least one report")
    K = reports[0].K
    if any(r.K != K for r in reports):
        raise ValueError("reports have inconsistent class counts")
    out = {}
    sd = {}
    for f in fields(AccuracyReport):
        if f.name == "sd":
            continue
        stack = np.array([np.asarray(getattr(r, f.name), dtype=np.float64) for r in reports])
        defined = ~np.isnan(stack)
        cnt = defined.sum(axis=0)
        total = np.where(defined, stack, 0.0).sum(axis=0)
        mean = _safe_div(total, cnt)
        out[f.name] = float(mean) if np.ndim(mean) == 0 else mean
        if not f.name.endswith("_ci"):
            dev = np.where(defined, stack - mean, 0.0)
            var = _safe_div((dev**2).sum(axis=0), cnt)
            # identical runs: report exactly 0 rather than rounding noise
            lo = np.where(defined, stack, np.inf).min(axis=0)
            hi = np.where(defined, stack, -np.inf).max(axis=0)
            var = np.where(lo == hi, 0.0, var)
            sd[f.name] = float(np.sqrt(var)) if np.ndim(var) == 0 else np.sqrt(var)
    return AccuracyReport(**out, sd=sd)


def report_rows(report: AccuracyReport, classes: Sequence[str], **keys) -> list[dict]:
    """Flatten a report to rows ``{**keys, metric, class, value, ci, sd}``.

    Every class gets a row per metric; undefined values are written as NaN.
    """
    rows = [dict(keys, metric="oa", **{"class": "all"}, value=report.oa, ci=report.oa_ci, sd=report.sd.get("oa", 0.0))]
    for metric in ("ua", "pa", "area_prop"):
        vals = getattr(report, metric)
        cis = getattr(report, metric + "_ci")
        sds = report.sd.get(metric, np.zeros(len(vals)))
        for k, name in enumerate(classes):
            rows.append(dict(keys, metric=metric, **{"class": name}, value=vals[k], ci=cis[k], sd=sds[k]))
    return rows


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return "nan" if np.isnan(x) else f"{float(x):.10g}"
    return str(x)


def write_rows_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def write_error_matrix_csv(path, e: ErrorMatrix, classes: Sequence[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mapped\\reference", *classes, "weight"])
        for name, row, wt in zip(classes, e.n, e.W):
            w.writerow([name, *map(int, row), _fmt(wt)])
