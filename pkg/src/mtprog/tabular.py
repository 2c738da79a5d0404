"""CART (Gini) decision trees and logistic regression over tabular features.

Used to locate the prognostic cut points on GCS and age that the encoding
module hard-codes. Split thresholds sit at midpoints between adjacent
distinct observed values, so a boundary between ages 79 and 80 shows up as
79.5.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .nn import stable_sigmoid

TIE_TOL = 1e-12


@dataclass
class TabularRecord:
    gcs: int
    age: float
    label: int
    extra: tuple = ()
    id: str = ""


def records_to_matrix(records: Sequence[TabularRecord], features=("gcs", "age")):
    cols = []
    for name in features:
        if name in ("gcs", "age"):
            cols.append([float(getattr(r, name)) for r in records])
        else:
            i = int(name.split("_", 1)[1]) if name.startswith("extra_") else None
            if i is None:
                raise KeyError(f"unknown feature {name!r}")
            cols.append([float(r.extra[i]) for r in records])
    x = np.array(cols, dtype=float).T.reshape(len(records), len(features))
    y = np.array([r.label for r in records], dtype=int)
    return x, y


def load_records_csv(path) -> list[TabularRecord]:
    """Read ``id?, gcs, age, extra..., label`` rows; extra columns are any
    numeric columns other than id/gcs/age/label and known label columns."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"gcs", "age", "label"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: header must contain gcs, age, label")
        skip = {"id", "gcs", "age", "label", "prognosis", "gcs_class", "age_bin", "severity"}
        extra_cols = [c for c in reader.fieldnames if c not in skip]
        out = []
        for row in reader:
            out.append(
                TabularRecord(
                    gcs=int(float(row["gcs"])),
                    age=float(row["age"]),
                    label=int(row["label"]),
                    extra=tuple(float(row[c]) for c in extra_cols),
                    id=row.get("id", ""),
                )
            )
    return out


# decision tree


@dataclass
class TreeNode:
    counts: tuple  # (n_class0, n_class1)
    depth: int
    feature: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    impurity_after: Optional[float] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    @property
    def prediction(self) -> int:
        # ties go to the poor-prognosis class
        return int(self.counts[1] >= self.counts[0])

    def to_dict(self, names=None) -> dict:
        d = {"counts": list(self.counts), "depth": self.depth}
        if not self.is_leaf:
            d.update(
                feature=self.feature if names is None else names[self.feature],
                feature_index=self.feature,
                threshold=self.threshold,
                left=self.left.to_dict(names),
                right=self.right.to_dict(names),
            )
        return d

    @classmethod
    def from_dict(cls, d) -> "TreeNode":
        node = cls(tuple(d["counts"]), d["depth"])
        if "threshold" in d:
            node.feature = d["feature_index"]
            node.threshold = d["threshold"]
            node.left = cls.from_dict(d["left"])
            node.right = cls.from_dict(d["right"])
        return node


@dataclass
class DecisionTree:
    root: TreeNode
    max_depth: int
    min_leaf: int
    feature_names: tuple = ()
    single_class: bool = False

    @property
    def depth(self) -> int:
        def walk(n):
            return 0 if n.is_leaf else 1 + max(walk(n.left), walk(n.right))

        return walk(self.root)

    def leaf(self, x) -> TreeNode:
        node = self.root
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node

    def predict_proba(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.empty(len(x))
        for i, row in enumerate(x):
            c0, c1 = self.leaf(row).counts
            out[i] = c1 / (c0 + c1)
        return out

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.array([self.leaf(row).prediction for row in x], dtype=int)

    def to_json(self) -> str:
        doc = {
            "max_depth": self.max_depth,
            "min_leaf": self.min_leaf,
            "feature_names": list(self.feature_names),
            "single_class": self.single_class,
            "root": self.root.to_dict(self.feature_names or None),
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text) -> "DecisionTree":
        doc = json.loads(text)
        return cls(
            TreeNode.from_dict(doc["root"]),
            doc["max_depth"],
            doc["min_leaf"],
            tuple(doc["feature_names"]),
            doc.get("single_class", False),
        )


def gini(counts) -> float:
    n = sum(counts)
    if n == 0:
        return 0.0
    return 1.0 - sum((c / n) ** 2 for c in counts)


def split_candidates(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Weighted child Gini for every midpoint threshold of one feature.

    Returns (thresholds, weighted_gini) arrays; only splits leaving at least
    ``min_leaf`` samples on each side are included.
    """
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    n = len(xs)
    pos_left = np.cumsum(ys)[:-1]
    n_left = np.arange(1, n)
    distinct = xs[1:] != xs[:-1]
    ok = distinct & (n_left >= min_leaf) & (n - n_left >= min_leaf)
    if not ok.any():
        return np.empty(0), np.empty(0)
    nl = n_left[ok].astype(float)
    pl = pos_left[ok].astype(float)
    nr = n - nl
    pr = ys.sum() - pl
    g_left = 1.0 - (pl / nl) ** 2 - ((nl - pl) / nl) ** 2
    g_right = 1.0 - (pr / nr) ** 2 - ((nr - pr) / nr) ** 2
    weighted = (nl * g_left + nr * g_right) / n
    thresholds = (xs[:-1][ok] + xs[1:][ok]) / 2.0
    return thresholds, weighted


def best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """(feature, threshold, weighted_gini) minimizing child impurity, ties to
    the lowest feature index then the lowest threshold; None if no split."""
    best = None
    for f in range(x.shape[1]):
        thr, w = split_candidates(x[:, f], y, min_leaf)
        if thr.size == 0:
            continue
        i = int(np.argmin(w))
        lowest = w[i]
        # earliest threshold within tolerance of the minimum
        i = int(np.flatnonzero(w <= lowest + TIE_TOL)[0])
        cand = (f, float(thr[i]), float(w[i]))
        if best is None or cand[2] < best[2] - TIE_TOL:
            best = cand
    return best


def fit_dtc(x, y, max_depth: int = 2, min_leaf: int = 5, feature_names=()) -> DecisionTree:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y).astype(int)
    if x.ndim == 1:
        x = x[:, None]
    if len(y) < 2:
        raise ValueError("need at least two records")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    single = len(np.unique(y)) < 2
    if single:
        warnings.warn("single-class training data; returning a leaf", RuntimeWarning, stacklevel=2)

    def grow(idx, depth):
        ys = y[idx]
        counts = (int((ys == 0).sum()), int((ys == 1).sum()))
        node = TreeNode(counts, depth)
        if depth >= max_depth or min(counts) == 0 or len(idx) < 2 * min_leaf:
            return node
        split = best_split(x[idx], ys, min_leaf)
        if split is None or split[2] >= gini(counts) - TIE_TOL:
            return node
        f, thr, w = split
        node.feature, node.threshold, node.impurity_after = f, thr, w
        mask = x[idx, f] <= thr
        node.left = grow(idx[mask], depth + 1)
        node.right = grow(idx[~mask], depth + 1)
        return node

    root = grow(np.arange(len(y)), 0)
    return DecisionTree(root, max_depth, min_leaf, tuple(feature_names), single)


def extract_boundaries(tree: DecisionTree) -> list[tuple]:
    """Thresholds of the root and its children, by depth then feature index.

    Features are reported by name when the tree has names, else by index.
    """
    found = []
    frontier = [tree.root]
    for _ in range(2):
        nxt = []
        for node in frontier:
            if not node.is_leaf:
                found.append((node.depth, node.feature, node.threshold))
                nxt.extend([node.left, node.right])
        frontier = nxt
    found.sort()
    names = tree.feature_names
    return [((names[f] if names else f), t) for _, f, t in found]


# logistic regression


@dataclass
class LogisticModel:
    weights: np.ndarray
    intercept: float
    epochs_run: int = 0
    history: list = field(default_factory=list)

    def predict_proba(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return stable_sigmoid(x @ self.weights + self.intercept)

    def predict(self, x, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(x) >= threshold).astype(int)


def logistic_loss_grad(w, b, x, y, l2):
    """Mean BCE + l2*|w|^2/2 and its gradient w.r.t. (w, b)."""
    z = x @ w + b
    loss = np.mean(np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))) + 0.5 * l2 * float(w @ w)
    r = (stable_sigmoid(z) - y) / len(y)
    return float(loss), x.T @ r + l2 * w, float(r.sum())


class DivergenceError(RuntimeError):
    pass


def fit_logistic(x, y, learning_rate: float = 0.5, epochs: int = 5000, l2: float = 0.01, tol: float = 1e-9) -> LogisticModel:
    """Full-batch gradient descent from zero weights."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if len(np.unique(y)) < 2:
        raise ValueError("logistic regression needs both classes")
    w = np.zeros(x.shape[1])
    b = 0.0
    prev = math.inf
    history = []
    epoch = 0
    for epoch in range(1, epochs + 1):
        loss, gw, gb = logistic_loss_grad(w, b, x, y, l2)
        if not math.isfinite(loss):
            raise DivergenceError(f"loss became {loss} at epoch {epoch}")
        history.append(loss)
        if abs(prev - loss) < tol:
            break
        prev = loss
        w = w - learning_rate * gw
        b = b - learning_rate * gb
    return LogisticModel(w, b, epoch, history)


def predict_tabular(model, x) -> tuple[np.ndarray, np.ndarray]:
    """(labels, probability of the poor class) for a DTC or LR model."""
    if model is None:
        raise ValueError("model is not fitted")
    if isinstance(model, DecisionTree):
        return model.predict(x), model.predict_proba(x)
    if isinstance(model, LogisticModel):
        p = model.predict_proba(x)
        return (p >= 0.5).astype(int), p
    raise TypeError(f"unsupported model {type(model).__name__}")


def permutation_importance(model, x, y, n_repeats: int = 10, seed: int = 0) -> np.ndarray:
    """Mean accuracy drop when each feature column is shuffled."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    base = np.mean(predict_tabular(model, x)[0] == y)
    drops = np.zeros(x.shape[1])
    for f in range(x.shape[1]):
        for _ in range(n_repeats):
            xp = x.copy()
            xp[:, f] = rng.permutation(xp[:, f])
            drops[f] += base - np.mean(predict_tabular(model, xp)[0] == y)
    return drops / n_repeats
