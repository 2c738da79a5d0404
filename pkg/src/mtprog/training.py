"""Training loop (AdamW, gradient accumulation, early stopping) and the
stratified k-fold cross-validation harness.

Oversampling touches only the training indices of a fold. Validation for
fold ``f`` is the test share of fold ``(f + 1) % k``, which keeps it
stratified and sized ``1/(k-1)`` of the non-test data.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .metrics import MetricReport, aggregate, binary_report, confusion_matrix, ordinal_suite
from .model import ModelConfig, MultiTaskModel, Targets, combined_loss, predict
from .nn import Tape, Tensor, scale


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    grad_accum_steps: int = 3
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    patience_epochs: int = 20
    max_epochs: int = 200
    augment_prob: float = 0.5
    rotation_deg: float = 5.0
    zoom_frac: float = 0.10
    noise_mean: float = 0.0
    noise_std: float = 0.01
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    eval_batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self):
        for name in ("batch_size", "grad_accum_steps", "patience_epochs", "max_epochs", "eval_batch_size"):
            v = getattr(self, name)
            if isinstance(v, bool) or int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        for name in ("weight_decay", "rotation_deg", "zoom_frac", "noise_std", "eps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.augment_prob <= 1.0:
            raise ValueError("augment_prob must lie in [0, 1]")
        if self.zoom_frac >= 1:
            raise ValueError("zoom_frac must be below 1")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two values in [0, 1)")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# splits


@dataclass
class FoldSplit:
    fold: int
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def check(self, n: Optional[int] = None):
        sets = [set(self.train.tolist()), set(self.validation.tolist()), set(self.test.tolist())]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise AssertionError(f"fold {self.fold}: overlapping index lists")
        if n is not None and set().union(*sets) != set(range(n)):
            raise AssertionError(f"fold {self.fold}: lists do not cover the cohort")


def stratified_kfold(labels, k: int, seed: int) -> list[FoldSplit]:
    """Shuffle each class, then deal its members to test folds round-robin.

    The dealing position carries over from one class to the next, so fold
    sizes stay within one sample of each other overall as well as per class.
    """
    labels = np.asarray(labels).astype(int)
    if k < 2:
        raise ValueError("k must be at least 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=int)
    pos = 0
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k:
            raise ValueError(f"class {cls} has {len(members)} members, fewer than k={k}")
        members = rng.permutation(members)
        fold_of[members] = (pos + np.arange(len(members))) % k
        pos = (pos + len(members)) % k
    splits = []
    for f in range(k):
        v = (f + 1) % k
        test = np.flatnonzero(fold_of == f)
        val = np.flatnonzero(fold_of == v) if k > 2 else np.empty(0, dtype=int)
        train = np.flatnonzero((fold_of != f) & (fold_of != v)) if k > 2 else np.flatnonzero(fold_of != f)
        splits.append(FoldSplit(f, train, val, test))
    return splits


def oversample_train(split: FoldSplit, labels, seed: int) -> np.ndarray:
    """Training indices with minority-class duplicates appended until both
    prognosis classes have equal counts."""
    labels = np.asarray(labels).astype(int)
    train = np.asarray(split.train)
    y = labels[train]
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise ValueError(f"fold {split.fold}: training split has a single class")
    if counts[0] == counts[1]:
        return train.copy()
    minority = train[y == classes[np.argmin(counts)]]
    deficit = int(abs(counts[0] - counts[1]))
    rng = np.random.default_rng(seed)
    full, rest = divmod(deficit, len(minority))
    extra = np.concatenate([np.tile(minority, full), rng.choice(minority, rest, replace=False)])
    return np.concatenate([train, extra])


# augmentation


def rotate_axial(volume: np.ndarray, degrees: float, order: int = 1) -> np.ndarray:
    """Rotate every axial (H, W) slice about the slice center."""
    return ndimage.rotate(volume, degrees, axes=(1, 2), reshape=False, order=order, mode="nearest")


def zoom_centered(volume: np.ndarray, factor: float, order: int = 1) -> np.ndarray:
    """Isotropic zoom about the volume center, cropped/padded to the input shape."""
    center = (np.array(volume.shape) - 1) / 2.0
    inv = 1.0 / factor
    offset = center - inv * center
    return ndimage.affine_transform(volume, np.diag(np.full(3, inv)), offset=offset, order=order, mode="constant", cval=0.0)


def augment(volume: np.ndarray, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotation, zoom and additive noise, each applied independently with
    probability ``config.augment_prob``. RNG draws happen in a fixed order
    whether or not a transform fires, so streams stay aligned."""
    hits = rng.uniform(size=3) < config.augment_prob
    angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    factor = rng.uniform(1 - config.zoom_frac, 1 + config.zoom_frac)
    out = volume
    if hits[0]:
        out = rotate_axial(out, angle)
    if hits[1]:
        out = zoom_centered(out, factor)
    if hits[2]:
        out = out + rng.normal(config.noise_mean, config.noise_std, size=out.shape)
    return out if out is not volume else volume.copy()


# optimizer


@dataclass
class OptimizerState:
    m: list
    v: list
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], betas=(0.9, 0.999), eps=1e-8) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0, tuple(betas), eps)


def adamw_step(params: list, grads: list, state: OptimizerState, lr: float, weight_decay: float) -> list:
    """One decoupled-weight-decay Adam update; returns new parameter arrays
    and advances ``state`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must align")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged("non-finite gradient")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i}: shape {p.shape} vs gradient {g.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        out.append(p - lr * (m_hat / (np.sqrt(v_hat) + state.eps)) - lr * weight_decay * p)
    return out


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr=1e-3, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.state = OptimizerState.zeros_like([p.data for p in self.params], betas, eps)

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new = adamw_step([p.data for p in self.params], grads, self.state, self.lr, self.weight_decay)
        for p, d in zip(self.params, new):
            p.data = d

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class EarlyStopper:
    """Tracks the best score; ``stop`` once ``patience`` epochs pass without
    a strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.since = 0

    def update(self, score: float, epoch: int) -> bool:
        if score > self.best:
            self.best, self.best_epoch, self.since = score, epoch, 0
            return True
        self.since += 1
        return False

    @property
    def stop(self) -> bool:
        return self.since >= self.patience


# training


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float
    val_b_acc: float
    steps: int
    improved: bool


@dataclass
class FoldResult:
    fold: int
    best_epoch: int
    best_val_b_acc: float
    steps: int
    log: list
    state: dict = field(repr=False, default=None)


def micro_batches(order: np.ndarray, batch_size: int) -> list:
    """Split ``order`` into batches; a trailing batch of one sample is
    merged into its predecessor because batch norm needs two samples."""
    chunks = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def _batch(volumes, idx):
    return Tensor(volumes[idx][:, None])


def predict_indices(model: MultiTaskModel, volumes: np.ndarray, idx, batch_size: int = 32, threshold: float = 0.5):
    """Eval-mode head predictions for ``volumes[idx]`` (see ``model.predict``)."""
    idx = np.asarray(idx)
    parts = []
    for i in range(0, len(idx), batch_size):
        out = model.forward(_batch(volumes, idx[i : i + batch_size]), training=False)
        parts.append((out, predict(out, threshold, model.config)))
    merged = {}
    for key in parts[0][1]:
        merged[key] = np.concatenate([p[1][key] for p in parts])
    logits = {}
    for head in model.config.heads:
        logits[head] = np.concatenate([p[0].head(head).data for p in parts])
    return merged, logits


def _macro_recall(t, p, k):
    m = confusion_matrix(t, p, k)
    rows = m.sum(axis=1)
    present = rows > 0
    return float(np.mean(np.diag(m)[present] / rows[present]))


def monitor_score(config: ModelConfig, preds: dict, targets: Targets) -> float:
    """Validation balanced accuracy of the prognosis head, or of the single
    auxiliary head for the auxiliary-only baselines."""
    head = "prognosis" if "prognosis" in config.heads else config.heads[0]
    if head == "prognosis":
        return float(binary_report(targets.prognosis, preds["prognosis"]).values["b_acc"])
    if head == "age":
        return float(binary_report(targets.age_bin, preds["age"]).values["b_acc"])
    if config.ordinal:
        return _macro_recall(targets.gcs_class, preds["gcs"], 3)
    return float(binary_report((np.asarray(targets.gcs_class) == 2).astype(int), preds["gcs"]).values["b_acc"])


def _eval_loss(model, volumes, targets, idx, batch_size):
    total = 0.0
    for i in range(0, len(idx), batch_size):
        b = idx[i : i + batch_size]
        out = model.forward(_batch(volumes, b), training=False)
        total += combined_loss(out, targets.subset(b), model.config).l_total * len(b)
    return total / len(idx)


def train_one_fold(
    model: MultiTaskModel,
    volumes: np.ndarray,
    targets: Targets,
    split: FoldSplit,
    config: TrainConfig,
    progress: Optional[Callable[[EpochLog], None]] = None,
) -> FoldResult:
    """Train with early stopping on validation balanced accuracy; the model
    ends holding the best checkpoint's parameters."""
    if len(split.train) < 2 or len(split.validation) < 1:
        raise ValueError(f"fold {split.fold}: degenerate split")
    rng = np.random.default_rng([config.seed, 1])
    model.reseed_dropout(int(np.random.default_rng([config.seed, 2]).integers(2**63)))
    train_idx = oversample_train(split, targets.prognosis, int(rng.integers(2**63))) if targets.prognosis is not None and "prognosis" in model.config.heads else np.asarray(split.train)
    val_idx = np.asarray(split.validation)
    val_targets = targets.subset(val_idx)
    opt = AdamW(model.parameters(), config.learning_rate, config.weight_decay, config.betas, config.eps)
    stopper = EarlyStopper(config.patience_epochs)
    best_state = model.state_dict()
    log = []
    steps = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(train_idx)
        chunks = micro_batches(order, config.batch_size)
        loss_sum = 0.0
        for g0 in range(0, len(chunks), config.grad_accum_steps):
            group = chunks[g0 : g0 + config.grad_accum_steps]
            opt.zero_grad()
            for b in group:
                x = np.stack([augment(volumes[i], config, rng) for i in b])[:, None]
                with Tape() as tape:
                    out = model.forward(Tensor(x), training=True)
                    parts = combined_loss(out, targets.subset(b), model.config)
                    if not math.isfinite(parts.l_total):
                        raise TrainingDiverged(f"fold {split.fold}, epoch {epoch}: loss {parts.l_total}")
                    tape.backward(scale(parts.total, 1.0 / len(group)))
                loss_sum += parts.l_total * len(b)
            opt.step()
            steps += 1
        preds, _ = predict_indices(model, volumes, val_idx, config.eval_batch_size)
        score = monitor_score(model.config, preds, val_targets)
        val_loss = _eval_loss(model, volumes, targets, val_idx, config.eval_batch_size)
        improved = stopper.update(score, epoch)
        if improved:
            best_state = model.state_dict()
        entry = EpochLog(epoch, loss_sum / len(train_idx), val_loss, score, steps, improved)
        log.append(entry)
        if progress is not None:
            progress(entry)
        if stopper.stop:
            break
    model.load_state_dict(best_state)
    return FoldResult(split.fold, stopper.best_epoch, stopper.best, steps, log, best_state)


# evaluation


def evaluate(model: MultiTaskModel, volumes, targets: Targets, idx, threshold: float = 0.5) -> dict:
    """Metric reports per active head on ``volumes[idx]``."""
    idx = np.asarray(idx)
    preds, _ = predict_indices(model, volumes, idx, threshold=threshold)
    t = targets.subset(idx)
    reports = {}
    if "prognosis" in preds:
        reports["prognosis"] = binary_report(t.prognosis, preds["prognosis"], preds["prognosis_prob"])
    if "age" in preds:
        reports["age"] = binary_report(t.age_bin, preds["age"], preds["age_prob"])
    if "gcs" in preds:
        if model.config.ordinal:
            reports["gcs"] = ordinal_suite(t.gcs_class, preds["gcs"], 3)
        else:
            sev = (np.asarray(t.gcs_class) == 2).astype(int)
            reports["gcs"] = binary_report(sev, preds["gcs"], preds["gcs_prob"][:, 0])
    return reports


# cross-validation


@dataclass
class FoldOutcome:
    fold: int
    seed: int
    reports: dict = field(default_factory=dict)
    result: Optional[FoldResult] = None
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class CVResult:
    variant: str
    k: int
    seed: int
    folds: list

    @property
    def failures(self) -> list:
        return [f for f in self.folds if f.failed]

    def head_reports(self, head: str = "prognosis") -> list:
        return [f.reports[head] for f in self.folds if not f.failed and head in f.reports]

    def aggregate(self) -> dict:
        heads = sorted({h for f in self.folds for h in f.reports})
        return {h: aggregate(self.head_reports(h)) for h in heads}

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "k": self.k,
            "seed": self.seed,
            "n_folds_ok": len(self.folds) - len(self.failures),
            "failures": [{"fold": f.fold, "error": f.error} for f in self.failures],
            "aggregate": _finite(self.aggregate()),
        }


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def default_fold_runner(volumes, targets, split, model_config, train_config, fold_seed) -> FoldOutcome:
    model = MultiTaskModel(model_config, seed=fold_seed)
    cfg = TrainConfig(**{**train_config.to_dict(), "seed": fold_seed})
    result = train_one_fold(model, volumes, targets, split, cfg)
    reports = evaluate(model, volumes, targets, split.test)
    return FoldOutcome(split.fold, fold_seed, reports, result)


def _run_fold(args):
    runner, volumes, targets, split, model_config, train_config, fold_seed = args
    try:
        return runner(volumes, targets, split, model_config, train_config, fold_seed)
    except Exception as exc:  # a failing fold is reported, not fatal
        return FoldOutcome(split.fold, fold_seed, error=f"{type(exc).__name__}: {exc}")


def run_cv(
    volumes: np.ndarray,
    targets: Targets,
    model_config: ModelConfig,
    train_config: TrainConfig,
    k: int = 10,
    seed: int = 0,
    jobs: int = 1,
    fold_runner: Callable = default_fold_runner,
    folds: Optional[Sequence[int]] = None,
) -> CVResult:
    """Train a fresh model per fold (seed ``seed ^ fold``) and evaluate it on
    the fold's test split. Stratification uses the prognosis label, or the
    first active auxiliary label for auxiliary-only variants."""
    strat = targets.prognosis
    if strat is None:
        strat = targets.age_bin if "age" in model_config.heads else targets.gcs_class
    splits = stratified_kfold(strat, k, seed)
    if folds is not None:
        splits = [splits[f] for f in folds]
    tasks = [(fold_runner, volumes, targets, s, model_config, train_config, seed ^ s.fold) for s in splits]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_fold, tasks))
    else:
        outcomes = [_run_fold(t) for t in tasks]
    return CVResult(model_config.variant, k, seed, outcomes)


# outputs


def epoch_log_csv(result: CVResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "seed", "fold", "epoch", "train_loss", "val_loss", "val_b_acc", "steps", "improved"])
    for f in result.folds:
        if f.result is None:
            continue
        for e in f.result.log:
            w.writerow([result.variant, result.seed, f.fold, e.epoch, repr(e.train_loss), repr(e.val_loss),
                        repr(e.val_b_acc), e.steps, int(e.improved)])
    return buf.getvalue()


def fold_metrics_csv(results: Sequence[CVResult], head: str = "prognosis", keys: Optional[Sequence[str]] = None) -> str:
    """One row per (variant, seed, fold); failed folds keep their row with
    empty metrics and the error text."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if keys is None:
        keys = sorted({k for r in results for f in r.folds if head in f.reports for k in f.reports[head].values})
    w.writerow(["variant", "seed", "fold", "head", *keys, "error"])
    for r in results:
        for f in r.folds:
            rep: Optional[MetricReport] = f.reports.get(head)
            vals = ["" if rep is None or not math.isfinite(rep.values.get(k, math.nan)) else repr(float(rep.values[k])) for k in keys]
            w.writerow([r.variant, r.seed, f.fold, head, *vals, f.error or ""])
    return buf.getvalue()


def write_cv_outputs(result: CVResult, directory) -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "epochs": directory / "epochs.csv",
        "folds": directory / "folds.csv",
        "aggregate": directory / "aggregate.json",
    }
    paths["epochs"].write_text(epoch_log_csv(result))
    paths["folds"].write_text(fold_metrics_csv([result]))
    paths["aggregate"].write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
    return paths
