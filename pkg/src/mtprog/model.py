"""Shared-backbone prognosis model with optional GCS and age heads.

Variants:

=================== ========== ========= =====
variant             prognosis  GCS       age
=================== ========== ========= =====
baseline_prognosis  yes        -         -
baseline_gcs_bin    -          1 bit     -
baseline_gcs_ord    -          2 bits    -
baseline_age        -          -         yes
mt_bin              yes        1 bit     yes
mt_ord              yes        2 bits    yes
=================== ========== ========= =====

The training loss is ``lambda_prog*L_prog + lambda_gcs*L_gcs + lambda_age*L_age``
summed over the active heads, every term a batch-mean binary cross-entropy
computed from logits. The ordinal GCS term averages the per-bit BCEs.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .encoding import decode_ordinal_batch, encode_ordinal
from .nn import Dense, DenseNetLite, Module, Tensor, load_params, save_params, scale, stable_sigmoid
from .nn import add as t_add
from .nn.tensor import make_op as _make_op

VARIANTS = (
    "baseline_prognosis",
    "baseline_gcs_bin",
    "baseline_gcs_ord",
    "baseline_age",
    "mt_bin",
    "mt_ord",
)
HEADS = ("prognosis", "gcs", "age")
GCS_CLASSES = 3


@dataclass
class ModelConfig:
    variant: str = "mt_ord"
    lambda_prog: float = 0.4
    lambda_gcs: float = 0.3
    lambda_age: float = 0.3
    input_shape: tuple = (8, 32, 32)
    stem_channels: int = 8
    growth_rate: int = 4
    block_layers: tuple = (2, 2)
    stem_pool: bool = True
    dropout: float = 0.2
    decode_rule: str = "leading"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.block_layers = tuple(int(v) for v in self.block_layers)
        self.validate()

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("lambda_prog", "lambda_gcs", "lambda_age"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a non-negative finite number")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be three positive extents, got {self.input_shape}")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.decode_rule not in ("leading", "count"):
            raise ValueError(f"unknown decode rule {self.decode_rule!r}")

    @property
    def heads(self) -> tuple:
        return {
            "baseline_prognosis": ("prognosis",),
            "baseline_gcs_bin": ("gcs",),
            "baseline_gcs_ord": ("gcs",),
            "baseline_age": ("age",),
            "mt_bin": HEADS,
            "mt_ord": HEADS,
        }[self.variant]

    @property
    def ordinal(self) -> bool:
        return self.variant in ("baseline_gcs_ord", "mt_ord")

    @property
    def gcs_width(self) -> int:
        return GCS_CLASSES - 1 if self.ordinal else 1

    def weight(self, head: str) -> float:
        return {"prognosis": self.lambda_prog, "gcs": self.lambda_gcs, "age": self.lambda_age}[head]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["block_layers"] = list(self.block_layers)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MultiTaskOutput:
    prog_logit: Optional[Tensor] = None
    gcs_logits: Optional[Tensor] = None
    age_logit: Optional[Tensor] = None

    def head(self, name: str) -> Optional[Tensor]:
        return {"prognosis": self.prog_logit, "gcs": self.gcs_logits, "age": self.age_logit}[name]


@dataclass
class Targets:
    """Per-sample labels. ``gcs_class`` is the 3-level ordinal class; the
    binary GCS label is ``gcs_class == 2``."""

    prognosis: Optional[np.ndarray] = None
    gcs_class: Optional[np.ndarray] = None
    age_bin: Optional[np.ndarray] = None

    def subset(self, idx) -> "Targets":
        pick = lambda a: None if a is None else np.asarray(a)[idx]
        return Targets(pick(self.prognosis), pick(self.gcs_class), pick(self.age_bin))


@dataclass
class LossBreakdown:
    l_prog: Optional[float]
    l_gcs: Optional[float]
    l_age: Optional[float]
    l_total: float
    total: Tensor = field(repr=False, default=None)


def bce(logit: float, target: int) -> float:
    """Binary cross-entropy of a single logit, stable for any magnitude."""
    z = float(logit)
    return max(z, 0.0) - z * target + math.log1p(math.exp(-abs(z)))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean BCE over every element of ``logits``."""
    z = logits.data
    t = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    n = z.size
    value = np.mean(np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z))))
    return _make_op("bce_with_logits", (logits,), value, lambda g: ((stable_sigmoid(z) - t) * (float(g) / n),))


class MultiTaskModel(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        self.backbone = self.add_child(
            "backbone",
            DenseNetLite(
                in_channels=1,
                stem_channels=config.stem_channels,
                growth_rate=config.growth_rate,
                block_layers=config.block_layers,
                stem_pool=config.stem_pool,
                dropout_rate=config.dropout,
                rng=rng,
            ),
        )
        f = self.backbone.out_features
        self.heads = {}
        for head in config.heads:
            width = config.gcs_width if head == "gcs" else 1
            self.heads[head] = self.add_child(f"head_{head}", Dense(f, width, rng))
        self.dropout_rng = np.random.default_rng(seed + 1)

    def reseed_dropout(self, seed: int):
        self.dropout_rng = np.random.default_rng(seed)

    def _check_input(self, x: Tensor):
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.config.input_shape:
            raise ValueError(f"expected input (N, 1, {', '.join(map(str, self.config.input_shape))}), got {x.shape}")
        if x.shape[0] < 1:
            raise ValueError("empty batch")

    def forward_features(self, x: Tensor, training: bool = False):
        """Forward pass that also returns the backbone's spatial feature maps."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        self._check_input(x)
        pooled, feats = self.backbone.forward(x, training, self.dropout_rng)
        out = MultiTaskOutput()
        if "prognosis" in self.heads:
            out.prog_logit = self.heads["prognosis"](pooled)
        if "gcs" in self.heads:
            out.gcs_logits = self.heads["gcs"](pooled)
        if "age" in self.heads:
            out.age_logit = self.heads["age"](pooled)
        return out, feats

    def forward(self, x, training: bool = False) -> MultiTaskOutput:
        return self.forward_features(x, training)[0]

    __call__ = forward

    def save(self, path, **meta):
        """Write ``<path>`` (binary parameters) and ``<path>.json`` (config + meta)."""
        path = Path(path)
        save_params(path, self.state_dict())
        sidecar = {"format": "mtprog-checkpoint", "version": 1, "config": self.config.to_dict()}
        sidecar.update(meta)
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> tuple["MultiTaskModel", dict]:
        path = Path(path)
        sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        config = ModelConfig.from_dict(sidecar["config"])
        model = cls(config)
        model.load_state_dict(load_params(path))
        return model, sidecar


def head_targets(head: str, targets: Targets, config: ModelConfig) -> np.ndarray:
    if head == "prognosis":
        y = targets.prognosis
    elif head == "age":
        y = targets.age_bin
    else:
        if targets.gcs_class is None:
            y = None
        elif config.ordinal:
            y = np.array([encode_ordinal(int(c), GCS_CLASSES) for c in targets.gcs_class], dtype=float)
        else:
            y = (np.asarray(targets.gcs_class) == 2).astype(float)
    if y is None:
        raise ValueError(f"missing target for active head {head!r}")
    y = np.asarray(y, dtype=float)
    return y.reshape(len(y), -1)


def combined_loss(output: MultiTaskOutput, targets: Targets, config: ModelConfig) -> LossBreakdown:
    parts = {}
    total = None
    for head in config.heads:
        logits = output.head(head)
        if logits is None:
            raise ValueError(f"model output lacks head {head!r}")
        l_head = bce_with_logits(logits, head_targets(head, targets, config))
        parts[head] = l_head
        term = scale(l_head, config.weight(head))
        total = term if total is None else t_add(total, term)
    val = lambda h: float(parts[h].data) if h in parts else None
    return LossBreakdown(val("prognosis"), val("gcs"), val("age"), float(total.data), total)


def predict(output: MultiTaskOutput, threshold: float = 0.5, config: Optional[ModelConfig] = None) -> dict:
    """Threshold head probabilities; ``p >= threshold`` is positive.

    Returns arrays keyed ``prognosis``/``gcs``/``age`` plus ``*_prob``.
    GCS is a severity class in {0, 1, 2} for ordinal heads and a 0/1 severe
    flag for binary heads.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    rule = config.decode_rule if config is not None else "leading"
    res = {}
    if output.prog_logit is not None:
        p = stable_sigmoid(output.prog_logit.data[:, 0])
        res["prognosis_prob"], res["prognosis"] = p, (p >= threshold).astype(int)
    if output.age_logit is not None:
        p = stable_sigmoid(output.age_logit.data[:, 0])
        res["age_prob"], res["age"] = p, (p >= threshold).astype(int)
    if output.gcs_logits is not None:
        p = stable_sigmoid(output.gcs_logits.data)
        res["gcs_prob"] = p
        if p.shape[1] == 1:
            res["gcs"] = (p[:, 0] >= threshold).astype(int)
        else:
            res["gcs"] = decode_ordinal_batch(p, threshold, rule)
    return res
