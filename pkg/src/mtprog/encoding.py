"""Discretization of GCS and age, ordinal codes, min-max normalization.

Boundaries: GCS 3-8 is severe (binary 1, ordinal 2), 9-12 moderate (ordinal 1),
13-15 mild (ordinal 0). Age >= 80 is binary 1. An ordinal class ``c`` of ``K``
is coded as ``K-1`` cumulative bits, the first ``c`` set.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

GCS_MIN, GCS_MAX = 3, 15
AGE_MIN, AGE_MAX = 0.0, 130.0
GCS_SEVERE_MAX = 8
GCS_MODERATE_MAX = 12
AGE_OLD = 80.0


def _check_gcs(g) -> int:
    if isinstance(g, bool) or int(g) != g:
        raise ValueError(f"GCS must be an integer, got {g!r}")
    g = int(g)
    if not GCS_MIN <= g <= GCS_MAX:
        raise ValueError(f"GCS {g} outside [{GCS_MIN}, {GCS_MAX}]")
    return g


def _check_age(a) -> float:
    a = float(a)
    if not (AGE_MIN <= a <= AGE_MAX):
        raise ValueError(f"age {a} outside [{AGE_MIN}, {AGE_MAX}]")
    return a


def binarize_gcs(g) -> int:
    return int(_check_gcs(g) <= GCS_SEVERE_MAX)


def ordinal_class_gcs(g) -> int:
    g = _check_gcs(g)
    if g <= GCS_SEVERE_MAX:
        return 2
    if g <= GCS_MODERATE_MAX:
        return 1
    return 0


def binarize_age(a) -> int:
    return int(_check_age(a) >= AGE_OLD)


def encode_ordinal(cls: int, k: int) -> list[int]:
    if k < 2:
        raise ValueError("need at least two ordered classes")
    if not 0 <= cls < k:
        raise ValueError(f"class {cls} out of range for K={k}")
    return [1] * cls + [0] * (k - 1 - cls)


def decode_ordinal(probs: Sequence[float], threshold: float = 0.5, rule: str = "leading") -> int:
    """Map per-bit probabilities back to a class index.

    ``rule="leading"`` counts consecutive bits >= threshold from the start, so
    a non-cumulative pattern such as [0.2, 0.9] still decodes to a valid class
    (0). ``rule="count"`` counts every bit above threshold instead.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    p = np.asarray(probs, dtype=float)
    if np.any((p < 0) | (p > 1)) or np.any(~np.isfinite(p)):
        raise ValueError("probabilities must lie in [0, 1]")
    above = p >= threshold
    if rule == "count":
        return int(above.sum())
    if rule != "leading":
        raise ValueError(f"unknown decode rule {rule!r}")
    n = 0
    for bit in above:
        if not bit:
            break
        n += 1
    return n


def decode_ordinal_batch(probs: np.ndarray, threshold: float = 0.5, rule: str = "leading") -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    above = probs >= threshold
    if rule == "count":
        return above.sum(axis=1).astype(int)
    # leading run length: cumprod stops at the first miss
    return np.cumprod(above, axis=1).sum(axis=1).astype(int)


@dataclass
class NormalizationSpec:
    """Per-variable training-split min/max."""

    ranges: dict = field(default_factory=dict)

    def apply(self, name: str, values):
        lo, hi = self.ranges[name]
        return (np.asarray(values, dtype=float) - lo) / (hi - lo)

    def to_json(self) -> str:
        doc = {k: {"min": lo, "max": hi} for k, (lo, hi) in self.ranges.items()}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NormalizationSpec":
        doc = json.loads(text)
        spec = cls({k: (float(v["min"]), float(v["max"])) for k, v in doc.items()})
        for k, (lo, hi) in spec.ranges.items():
            if not hi > lo:
                raise ValueError(f"{k}: max must exceed min")
        return spec


def minmax_fit(train_values: Mapping[str, Sequence[float]]) -> NormalizationSpec:
    ranges = {}
    for name, vals in train_values.items():
        vals = np.asarray(vals, dtype=float)
        if vals.size == 0:
            raise ValueError(f"{name}: no training values")
        lo, hi = float(vals.min()), float(vals.max())
        if not hi > lo:
            raise ValueError(f"{name}: degenerate range (min == max == {lo})")
        ranges[name] = (lo, hi)
    return NormalizationSpec(ranges)


def minmax_fit_apply(train_values, apply_values, name: str = "x"):
    """Fit on ``train_values`` and map ``apply_values``; no clamping, so
    values outside the training range fall outside [0, 1]."""
    spec = minmax_fit({name: train_values})
    return spec.apply(name, apply_values), spec
