"""Classification metrics for the binary heads and the ordinal GCS head.

Undefined values (zero denominators) are reported as NaN and listed in
``MetricReport.undefined``; they are never coerced to 0.

Uniform ordinal classification index (A_UOC)
--------------------------------------------
For a K x K confusion matrix ``n[r, c]`` (rows = true class) the rows are first
re-weighted to a uniform class prior, ``p[r, c] = n[r, c] / (R * n_r)`` with
``R`` the number of non-empty rows, so ``sum(p) == 1``. A *path* is a
monotone walk through the matrix from (0, 0) to (K-1, K-1) using steps
(+1, 0), (0, +1) or (+1, +1). With

    D    = sum over all cells   p[r, c] * |r - c|
    S(P) = sum over cells in P  p[r, c]
    B(P) = sum over cells in P  p[r, c] * |r - c| / (K - 1)

the ordinal cost at penalty ``beta`` is

    OC(beta) = min_P  1 - S(P) / (1 + D) + beta * B(P)

and ``A_UOC = integral_0^1 OC(beta) dbeta``. Each path contributes a line in
beta, so OC is the lower envelope of finitely many lines (concave, piecewise
linear) and the integral is computed exactly by locating its breakpoints.
A diagonal matrix gives 0; any off-diagonal mass gives a strictly positive
value.

Worked example, ``n = [[2, 1, 0], [0, 3, 1], [0, 0, 3]]``: R = 3, the rows
normalize to [[2/9, 1/9, 0], [0, 1/4, 1/12], [0, 0, 1/3]], D = 1/9 + 1/12 =
7/36. The diagonal path (S = 29/36, B = 0) gives the line 1 - 29/43 = 14/43.
Paths that also pick up one off-diagonal cell gain S but pay a slope, e.g.
(0,0)->(0,1)->(1,1)->(2,2) has S = 33/36, B = 1/18, line 10/43 + beta/18.
Taking the lower envelope of all 13 path lines over [0, 1] gives
A_UOC = 0.21140180878552967 (pinned in the test suite).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import rankdata

BINARY_KEYS = ("auc", "acc", "b_acc", "spec", "npv", "prec", "recall", "f1")
ORDINAL_KEYS = ("acc", "b_acc", "mae", "rmse", "a_uoc", "kappa_qw")
# column order of the model-comparison table
TABLE_KEYS = ("acc", "b_acc", "spec", "npv", "prec", "recall", "f1")
TABLE_LABELS = {
    "auc": "AUC",
    "acc": "Acc.",
    "b_acc": "B. Acc.",
    "spec": "Spec.",
    "npv": "NPV",
    "prec": "Prec.",
    "recall": "Recall",
    "f1": "F1-sc.",
    "mae": "MAE",
    "rmse": "RMSE",
    "a_uoc": "A_UOC",
    "kappa_qw": "Kappa (QW)",
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)
    undefined: tuple = ()

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def to_dict(self) -> dict:
        return {
            "values": {k: (None if not math.isfinite(v) else v) for k, v in self.values.items()},
            "undefined": sorted(self.undefined),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self, keys=TABLE_KEYS) -> str:
        return ",".join("" if not math.isfinite(self.values.get(k, math.nan)) else repr(float(self.values[k])) for k in keys)


def _ratio(num, den):
    return num / den if den else math.nan


def confusion_binary(y_true, y_pred) -> ConfusionCounts:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    if y_true.shape != y_pred.shape:
        raise ValueError("length mismatch")
    return ConfusionCounts(
        tp=int(np.sum((y_true == 1) & (y_pred == 1))),
        fp=int(np.sum((y_true == 0) & (y_pred == 1))),
        tn=int(np.sum((y_true == 0) & (y_pred == 0))),
        fn=int(np.sum((y_true == 1) & (y_pred == 0))),
    )


def confusion_matrix(y_true, y_pred, k: int) -> np.ndarray:
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    if y_true.shape != y_pred.shape:
        raise ValueError("length mismatch")
    if y_true.size and (min(y_true.min(), y_pred.min()) < 0 or max(y_true.max(), y_pred.max()) >= k):
        raise ValueError(f"class index outside [0, {k})")
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (y_true, y_pred), 1)
    return m


def binary_suite(counts: ConfusionCounts, scores=None, labels=None) -> MetricReport:
    """Acc, balanced acc, spec, NPV, precision, recall, F1 from counts.

    AUC is added when ``scores``/``labels`` are given and both classes occur.
    """
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    n = counts.n
    if n < 1:
        raise ValueError("empty confusion counts")
    recall = _ratio(tp, tp + fn)
    spec = _ratio(tn, tn + fp)
    prec = _ratio(tp, tp + fp)
    npv = _ratio(tn, tn + fn)
    b_acc = (recall + spec) / 2
    f1 = 2 * prec * recall / (prec + recall) if (prec + recall) > 0 else math.nan
    vals = {
        "acc": (tp + tn) / n,
        "b_acc": b_acc,
        "spec": spec,
        "npv": npv,
        "prec": prec,
        "recall": recall,
        "f1": f1,
    }
    if scores is not None:
        labels = np.asarray(labels).astype(int)
        vals["auc"] = roc_auc(scores, labels) if 0 < labels.sum() < labels.size else math.nan
    undefined = tuple(k for k, v in vals.items() if not math.isfinite(v))
    return MetricReport(vals, undefined)


def binary_report(y_true, y_pred, scores=None) -> MetricReport:
    return binary_suite(confusion_binary(y_true, y_pred), scores, y_true if scores is not None else None)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney AUC from mid-ranks (ties count one half)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(int)
    if scores.shape != labels.shape:
        raise ValueError("length mismatch")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    ranks = rankdata(scores)
    r_pos = ranks[labels == 1].sum()
    return float((r_pos - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def ordinal_errors(true_classes, pred_classes) -> tuple[float, float]:
    t = np.asarray(true_classes, dtype=float)
    p = np.asarray(pred_classes, dtype=float)
    if t.shape != p.shape:
        raise ValueError("length mismatch")
    d = t - p
    return float(np.mean(np.abs(d))), float(np.sqrt(np.mean(d * d)))


def kappa_quadratic(matrix) -> float:
    """Quadratic-weighted Cohen kappa; NaN when expected disagreement is 0."""
    m = np.asarray(matrix, dtype=float)
    k = m.shape[0]
    n = m.sum()
    if n <= 0 or k < 2:
        return math.nan
    i, j = np.indices((k, k))
    w = (i - j) ** 2 / (k - 1) ** 2
    obs = m / n
    exp = np.outer(m.sum(axis=1), m.sum(axis=0)) / n**2
    den = float((w * exp).sum())
    if den == 0:
        return math.nan
    return 1.0 - float((w * obs).sum()) / den


# A_UOC


def _uniform_rows(matrix) -> np.ndarray:
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("confusion matrix must be square")
    rows = m.sum(axis=1)
    if rows.sum() <= 0:
        raise ValueError("empty confusion matrix")
    nonempty = rows > 0
    p = np.zeros_like(m)
    p[nonempty] = m[nonempty] / rows[nonempty, None] / nonempty.sum()
    return p


def _best_path(p, dist, denom, beta):
    """Max-weight monotone path for the given beta; returns (S, B) of the path."""
    k = p.shape[0]
    scale = max(k - 1, 1)
    w = p / denom - beta * p * dist / scale
    best = np.full((k, k), -np.inf)
    s_acc = np.zeros((k, k))
    b_acc = np.zeros((k, k))
    for r in range(k):
        for c in range(k):
            if r == 0 and c == 0:
                prev = None
            else:
                cands = []
                if r > 0:
                    cands.append((r - 1, c))
                if c > 0:
                    cands.append((r, c - 1))
                if r > 0 and c > 0:
                    cands.append((r - 1, c - 1))
                prev = max(cands, key=lambda rc: best[rc])
            base, s0, b0 = (0.0, 0.0, 0.0) if prev is None else (best[prev], s_acc[prev], b_acc[prev])
            best[r, c] = base + w[r, c]
            s_acc[r, c] = s0 + p[r, c]
            b_acc[r, c] = b0 + p[r, c] * dist[r, c] / scale
    return s_acc[-1, -1], b_acc[-1, -1]


def ordinal_cost(matrix, beta: float) -> float:
    """OC(beta) of the uniform-prior matrix (see module docstring)."""
    p = _uniform_rows(matrix)
    k = p.shape[0]
    dist = np.abs(np.subtract.outer(np.arange(k), np.arange(k))).astype(float)
    denom = 1.0 + float((p * dist).sum())
    s, b = _best_path(p, dist, denom, beta)
    return 1.0 - s / denom + beta * b


def uoc_index(matrix) -> float:
    """Area under OC(beta) for beta in [0, 1]; 0 for a diagonal matrix."""
    p = _uniform_rows(matrix)
    k = p.shape[0]
    if k == 1:
        return 0.0
    dist = np.abs(np.subtract.outer(np.arange(k), np.arange(k))).astype(float)
    denom = 1.0 + float((p * dist).sum())

    def line(beta):
        s, b = _best_path(p, dist, denom, beta)
        return 1.0 - s / denom, b

    def value(ln, beta):
        return ln[0] + ln[1] * beta

    def area(lo, hi, l_lo, l_hi, depth=0):
        if (abs(l_lo[0] - l_hi[0]) < 1e-15 and abs(l_lo[1] - l_hi[1]) < 1e-15) or hi - lo < 1e-15:
            return 0.5 * (value(l_lo, lo) + value(l_lo, hi)) * (hi - lo)
        if abs(l_lo[1] - l_hi[1]) < 1e-15:
            mid = 0.5 * (lo + hi)
        else:
            mid = (l_hi[0] - l_lo[0]) / (l_lo[1] - l_hi[1])
            mid = min(max(mid, lo), hi)
        l_mid = line(mid)
        if value(l_mid, mid) >= min(value(l_lo, mid), value(l_hi, mid)) - 1e-14 or depth > 60:
            # envelope is the tent min(l_lo, l_hi) on [lo, hi]
            return (
                0.5 * (value(l_lo, lo) + value(l_lo, mid)) * (mid - lo)
                + 0.5 * (value(l_hi, mid) + value(l_hi, hi)) * (hi - mid)
            )
        return area(lo, mid, l_lo, l_mid, depth + 1) + area(mid, hi, l_mid, l_hi, depth + 1)

    return float(area(0.0, 1.0, line(0.0), line(1.0)))


def ordinal_suite(true_classes, pred_classes, k: int = 3) -> MetricReport:
    t = np.asarray(true_classes).astype(int)
    p = np.asarray(pred_classes).astype(int)
    if t.size < 1:
        raise ValueError("no samples")
    m = confusion_matrix(t, p, k)
    rows = m.sum(axis=1)
    present = rows > 0
    mae, rmse = ordinal_errors(t, p)
    vals = {
        "acc": float(np.trace(m) / m.sum()),
        "b_acc": float(np.mean(np.diag(m)[present] / rows[present])),
        "mae": mae,
        "rmse": rmse,
        "a_uoc": uoc_index(m),
        "kappa_qw": kappa_quadratic(m),
    }
    undefined = tuple(k_ for k_, v in vals.items() if not math.isfinite(v))
    return MetricReport(vals, undefined)


# bootstrap


@dataclass
class BootstrapCI:
    point: float
    lower: float
    upper: float
    n_resamples: int
    level: float
    n_undefined: int = 0
    point_outside: bool = False

    def format(self, digits: int = 2) -> str:
        f = lambda v: "nan" if not math.isfinite(v) else f"{v:.{digits}f}"
        return f"{f(self.point)} ({f(self.lower)}-{f(self.upper)})"


def bootstrap_ci(
    y_true,
    y_other,
    metric: Callable[[np.ndarray, np.ndarray], float],
    n_resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapCI:
    """Percentile bootstrap of ``metric(y_true, y_other)``.

    Resamples whose metric is undefined (NaN) are skipped and counted; more
    than half undefined is an error. The point estimate uses the full sample
    and is flagged, not clamped, if it falls outside the interval.
    """
    y_true = np.asarray(y_true)
    y_other = np.asarray(y_other)
    n = len(y_true)
    if n < 2 or len(y_other) != n:
        raise ValueError("bootstrap needs at least two paired samples")
    if n_resamples < 100:
        raise ValueError("use at least 100 resamples")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_resamples, n))
    stats = np.array([metric(y_true[i], y_other[i]) for i in idx], dtype=float)
    ok = np.isfinite(stats)
    n_bad = int((~ok).sum())
    if n_bad > n_resamples / 2:
        raise ValueError(f"{n_bad} of {n_resamples} resamples gave an undefined metric")
    kept = stats[ok]
    alpha = (1 - level) / 2
    lower, upper = np.percentile(kept, [100 * alpha, 100 * (1 - alpha)])
    point = float(metric(y_true, y_other))
    outside = math.isfinite(point) and not (lower <= point <= upper)
    return BootstrapCI(point, float(lower), float(upper), n_resamples, level, n_bad, bool(outside))


def metric_fn(name: str, threshold: float = 0.5) -> Callable:
    """Binary metric ``f(labels, probabilities)`` for use with bootstrap_ci."""

    def fn(y, prob):
        if name == "auc":
            y = np.asarray(y).astype(int)
            return roc_auc(prob, y) if 0 < y.sum() < y.size else math.nan
        pred = (np.asarray(prob) >= threshold).astype(int)
        return binary_suite(confusion_binary(y, pred)).values[name]

    return fn


def aggregate(reports: list, keys=None) -> dict:
    """Per-metric mean and sample SD across folds (undefined folds skipped)."""
    keys = keys or sorted({k for r in reports for k in r.values})
    out = {}
    for k in keys:
        vals = np.array([r.values.get(k, math.nan) for r in reports], dtype=float)
        vals = vals[np.isfinite(vals)]
        mean = float(vals.mean()) if vals.size else math.nan
        sd = float(vals.std(ddof=1)) if vals.size > 1 else (0.0 if vals.size == 1 else math.nan)
        out[k] = {"mean": mean, "sd": sd, "n": int(vals.size)}
    return out


def format_mean_sd(mean: float, sd: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {sd:.{digits}f}"
