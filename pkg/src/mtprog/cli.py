"""``mtprog`` command line: synth, tabular, cv, eval, saliency.

Exit codes: 0 success, 2 usage/validation, 3 I/O, 4 partial failure.
Options of ``cv`` and ``tabular`` may also come from ``--config FILE``
(JSON or TOML, flat keys named like the long options with dashes replaced
by underscores); explicit flags win over file values.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_PARTIAL = 0, 2, 3, 4

ABLATION = {
    "baseline_prognosis": {"variant": "baseline_prognosis"},
    "mt_bin": {"variant": "mt_bin"},
    "mt_ord": {"variant": "mt_ord"},
    "mt_ord_no_gcs": {"variant": "mt_ord", "lambda_gcs": 0.0},
    "mt_ord_no_age": {"variant": "mt_ord", "lambda_age": 0.0},
}


class UsageError(Exception):
    pass


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"1,4,9"`` or an inclusive range ``"1..5"``."""
    try:
        if ".." in text:
            lo, hi = (int(p) for p in text.split(".."))
            if hi < lo:
                raise ValueError
            return list(range(lo, hi + 1))
        return [int(p) for p in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}; use N, A,B,C or A..B") from None


def _open_unit(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in the open interval (0, 1)")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be a positive integer")
    return v


# config files


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from exc
    else:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be a table/object")
    return data


def merge_config(args, parser_defaults: dict, overridable: set) -> argparse.Namespace:
    """Fill options left unset on the command line from ``--config``, then
    from the built-in defaults."""
    file_values = {}
    if getattr(args, "config", None):
        file_values = load_config_file(args.config)
        unknown = set(file_values) - overridable
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}; allowed: {sorted(overridable)}")
    for key in overridable:
        if getattr(args, key, None) is None:
            value = file_values.get(key, parser_defaults.get(key))
            if key == "seeds" and isinstance(value, (str, int)):
                value = parse_seeds(str(value))
            setattr(args, key, value)
    return args


# commands


def cmd_synth(args) -> int:
    from .synth import PhantomSpec, generate_cohort, export_cohort

    if args.n < 20:
        raise UsageError(f"--n must be at least 20, got {args.n}")
    extents = tuple(args.extents)
    spec = PhantomSpec.for_extents(extents, intraventricular=args.intraventricular)
    cohort = generate_cohort(args.n, extents, args.seed, noise=args.noise, spec=spec)
    path = export_cohort(cohort, args.out)
    poor = int(cohort.prognosis.sum())
    print(f"{len(cohort)} subjects ({len(cohort) - poor} good / {poor} poor)")
    print(path)
    return EXIT_OK


def _cohort_dir(path) -> Path:
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise FileNotFoundError(f"cohort directory {path} has no manifest.json")
    return path


def _load_cohort(path):
    from .synth import load_cohort

    return load_cohort(_cohort_dir(path))


def tabular_cv(x, y, model: str, k: int, seed: int, max_depth: int = 2, min_leaf: int = 5):
    """Per-fold binary reports for a tabular model; features are min-max
    scaled on each training split for logistic regression."""
    from .encoding import minmax_fit
    from .metrics import binary_report
    from .tabular import fit_dtc, fit_logistic, predict_tabular
    from .training import stratified_kfold

    reports = []
    for split in stratified_kfold(y, k, seed):
        train = np.concatenate([split.train, split.validation])
        xt, xs = x[train], x[split.test]
        if model == "lr":
            spec = minmax_fit({str(j): xt[:, j] for j in range(x.shape[1])})
            scale = lambda a: np.column_stack([spec.apply(str(j), a[:, j]) for j in range(a.shape[1])])
            fitted = fit_logistic(scale(xt), y[train])
            xs = scale(xs)
        else:
            fitted = fit_dtc(xt, y[train], max_depth, min_leaf)
        pred, prob = predict_tabular(fitted, xs)
        reports.append(binary_report(y[split.test], pred, prob))
    return reports


def _table_lines(name, reports, keys=("auc", "acc", "b_acc", "spec", "npv", "prec", "recall", "f1")):
    from .metrics import TABLE_LABELS, aggregate, format_mean_sd

    agg = aggregate(reports, list(keys))
    labels = {**TABLE_LABELS, "auc": "AUC"}
    lines = [f"{name}:"]
    for k in keys:
        lines.append(f"  {labels.get(k, k):<10} {format_mean_sd(agg[k]['mean'], agg[k]['sd'])}")
    return lines


def cmd_tabular(args) -> int:
    from .tabular import extract_boundaries, fit_dtc, load_records_csv, records_to_matrix

    src = Path(args.cohort)
    csv_path = src / "cohort.csv" if src.is_dir() else src
    if not csv_path.is_file():
        raise FileNotFoundError(f"no cohort table at {csv_path}")
    records = load_records_csv(csv_path)
    x, y = records_to_matrix(records, ("gcs", "age"))
    models = ("dtc", "lr") if args.model == "both" else (args.model,)
    out_lines = []
    if "dtc" in models:
        tree = fit_dtc(x, y, args.max_depth, args.min_leaf, feature_names=("gcs", "age"))
        bounds = extract_boundaries(tree)
        out_lines.append("boundaries: " + ", ".join(f"{f}<={t:g}" for f, t in bounds))
        if args.out:
            Path(args.out).mkdir(parents=True, exist_ok=True)
            (Path(args.out) / "tree.json").write_text(tree.to_json() + "\n")
    for m in models:
        reports = tabular_cv(x, y, m, args.k, args.seed, args.max_depth, args.min_leaf)
        out_lines += _table_lines({"dtc": "DTC", "lr": "LR"}[m] + f" ({args.k}-fold)", reports)
    text = "\n".join(out_lines)
    print(text)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "tabular.txt").write_text(text + "\n")
    return EXIT_OK


def _model_config(args, overrides=None):
    from .model import ModelConfig

    d = {
        "variant": args.variant,
        "lambda_prog": args.lambda_prog,
        "lambda_gcs": args.lambda_gcs,
        "lambda_age": args.lambda_age,
    }
    d.update(overrides or {})
    return ModelConfig(**d)


def _train_config(args):
    from .training import TrainConfig

    return TrainConfig(
        batch_size=args.batch_size,
        grad_accum_steps=args.accum_steps,
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        patience_epochs=args.patience,
        max_epochs=args.max_epochs,
        augment_prob=args.augment_prob,
    )


def cmd_cv(args) -> int:
    from .training import default_fold_runner, fold_metrics_csv, run_cv, write_cv_outputs

    if args.k < 3:
        raise UsageError("cv needs --k of at least 3 so every fold keeps training, validation and test data")
    cohort = _load_cohort(args.cohort)
    volumes, targets = cohort.volumes, cohort.targets()
    runs = ABLATION if args.ablation else {args.variant: {}}
    tc = _train_config(args)
    out = Path(args.out)
    results = []
    for name, over in runs.items():
        mc = _model_config(args, over)
        if tuple(volumes.shape[1:]) != mc.input_shape:
            mc = type(mc)(**{**mc.to_dict(), "input_shape": tuple(volumes.shape[1:])})
        for seed in args.seeds:
            runner = _SavingRunner(out / "checkpoints" / f"{name}_s{seed}") if args.save_checkpoints else default_fold_runner
            res = run_cv(volumes, targets, mc, tc, k=args.k, seed=seed, jobs=args.jobs, fold_runner=runner)
            res.variant = name
            results.append(res)
            write_cv_outputs(res, out / f"{name}_s{seed}")
            agg = res.aggregate().get("prognosis" if "prognosis" in mc.heads else mc.heads[0], {})
            ba = agg.get("b_acc", {})
            print(f"{name} seed {seed}: B.Acc {ba.get('mean', math.nan):.3f} ± {ba.get('sd', math.nan):.3f}"
                  f" ({len(res.folds) - len(res.failures)}/{len(res.folds)} folds)")
    combined = out / ("ablation.csv" if args.ablation else "folds.csv")
    combined.write_text(fold_metrics_csv(results))
    summary = {"config": {"model": {n: _model_config(args, o).to_dict() for n, o in runs.items()},
                          "train": tc.to_dict(), "k": args.k, "seeds": list(args.seeds)},
               "runs": [r.summary() for r in results]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    failures = [(r.variant, r.seed, f.fold, f.error) for r in results for f in r.failures]
    for v, s, f, e in failures:
        print(f"FAILED {v} seed {s} fold {f}: {e}", file=sys.stderr)
    return EXIT_PARTIAL if failures else EXIT_OK


class _SavingRunner:
    """Picklable fold runner that saves the best checkpoint of each fold."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def __call__(self, volumes, targets, split, model_config, train_config, fold_seed):
        from .model import MultiTaskModel
        from .training import FoldOutcome, TrainConfig, evaluate, train_one_fold

        model = MultiTaskModel(model_config, seed=fold_seed)
        cfg = TrainConfig(**{**train_config.to_dict(), "seed": fold_seed})
        result = train_one_fold(model, volumes, targets, split, cfg)
        reports = evaluate(model, volumes, targets, split.test)
        self.directory.mkdir(parents=True, exist_ok=True)
        model.save(self.directory / f"fold{split.fold}.mtpg", fold=split.fold, seed=fold_seed,
                   best_epoch=result.best_epoch, test_indices=[int(i) for i in split.test])
        return FoldOutcome(split.fold, fold_seed, reports, result)


def eval_lines(labels, probs, threshold=0.5, resamples=1000, level=0.95, seed=0):
    """Table-style lines ``Label  point (lower-upper)`` for prognosis metrics."""
    from .metrics import TABLE_LABELS, bootstrap_ci, metric_fn

    labels = np.asarray(labels).astype(int)
    probs = np.asarray(probs, dtype=float)
    keys = ["auc", "acc", "b_acc", "spec", "npv", "prec", "recall", "f1"]
    names = {**TABLE_LABELS, "auc": "AUC"}
    lines, cis = [], {}
    for k in keys:
        try:
            ci = bootstrap_ci(labels, probs, metric_fn(k, threshold), resamples, level, seed)
        except ValueError as exc:
            lines.append(f"{names[k]:<10} undefined ({exc})")
            continue
        cis[k] = ci
        lines.append(f"{names[k]:<10} {ci.format()}")
    return lines, cis


def cmd_eval(args) -> int:
    from .model import MultiTaskModel
    from .training import predict_indices

    cohort = _load_cohort(args.cohort)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    model, meta = MultiTaskModel.load(ckpt)
    if tuple(cohort.volumes.shape[1:]) != model.config.input_shape:
        raise UsageError(f"checkpoint expects volumes {model.config.input_shape}, cohort has {cohort.volumes.shape[1:]}")
    if "prognosis" not in model.config.heads:
        raise UsageError(f"checkpoint variant {model.config.variant} has no prognosis head")
    idx = np.arange(len(cohort)) if args.all or "test_indices" not in meta else np.asarray(meta["test_indices"])
    preds, _ = predict_indices(model, cohort.volumes, idx, threshold=args.threshold)
    lines, _ = eval_lines(cohort.prognosis[idx], preds["prognosis_prob"], args.threshold, args.resamples, args.level, args.seed)
    header = f"{model.config.variant} on {len(idx)} subjects, threshold {args.threshold}, {int(args.level * 100)}% CI"
    print("\n".join([header, *lines]))
    return EXIT_OK


def cmd_saliency(args) -> int:
    from .model import MultiTaskModel
    from .saliency import compute, export_slices, normalize_threshold, write_raw

    cohort = _load_cohort(args.cohort)
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    model, _ = MultiTaskModel.load(ckpt)
    if args.head not in model.config.heads:
        raise UsageError(f"variant {model.config.variant} has no {args.head} head")
    ids = cohort.ids
    if args.subjects:
        missing = [s for s in args.subjects if s not in ids]
        if missing:
            raise UsageError(f"unknown subject ids: {missing}")
        chosen = [ids.index(s) for s in args.subjects]
    else:
        chosen = list(range(min(args.limit, len(ids))))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    count = 0
    for i in chosen:
        sal = compute(model, cohort.volumes[i], args.method, args.head, args.layer, args.nearest)
        norm = normalize_threshold(sal, args.quantile, args.per_slice)
        write_raw(sal.values, out / f"{ids[i]}_{args.method}_{args.head}.f64", method=args.method, head=args.head,
                  subject=ids[i])
        count += len(export_slices(norm, out, ids[i], args.slices))
    print(f"{len(chosen)} subjects, {count} slices -> {out}")
    return EXIT_OK


# parser


CV_DEFAULTS = {
    "variant": "mt_ord",
    "k": 10,
    "seeds": [0],
    "jobs": 1,
    "lambda_prog": 0.4,
    "lambda_gcs": 0.3,
    "lambda_age": 0.3,
    "batch_size": 8,
    "accum_steps": 3,
    "lr": 1e-3,
    "weight_decay": 1e-4,
    "patience": 20,
    "max_epochs": 200,
    "augment_prob": 0.5,
}
TABULAR_DEFAULTS = {"model": "both", "k": 10, "seed": 0, "max_depth": 2, "min_leaf": 5}


def build_parser() -> argparse.ArgumentParser:
    from .model import HEADS, VARIANTS
    from .saliency import METHODS

    p = argparse.ArgumentParser(prog="mtprog", description="Multi-task prognosis models on volumetric data.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--n", type=int, default=261, help="number of subjects (>= 20)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--extents", type=_positive_int, nargs=3, default=[8, 32, 32], metavar=("D", "H", "W"))
    s.add_argument("--noise", type=float, default=1.0, help="label noise level (0 = deterministic)")
    s.add_argument("--intraventricular", action="store_true", help="add a central intraventricular blob")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("tabular", help="decision boundaries and tabular CV metrics")
    t.add_argument("--cohort", required=True, help="cohort directory or CSV")
    t.add_argument("--model", choices=("dtc", "lr", "both"), default=None)
    t.add_argument("--k", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--max-depth", type=int, default=None)
    t.add_argument("--min-leaf", type=int, default=None)
    t.add_argument("--out", help="directory for tree.json and the printed report")
    t.add_argument("--config", help="JSON or TOML file with option values")
    t.set_defaults(func=cmd_tabular, overridable=TABULAR_DEFAULTS)

    c = sub.add_parser("cv", help="cross-validated training")
    c.add_argument("--cohort", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--variant", choices=VARIANTS, default=None)
    c.add_argument("--ablation", action="store_true", help="run " + ", ".join(ABLATION))
    c.add_argument("--k", type=int, default=None)
    c.add_argument("--seeds", type=parse_seeds, default=None, help="N, A,B,C or A..B")
    c.add_argument("--jobs", type=_positive_int, default=None, help="parallel folds")
    c.add_argument("--lambda-prog", type=float, default=None)
    c.add_argument("--lambda-gcs", type=float, default=None)
    c.add_argument("--lambda-age", type=float, default=None)
    c.add_argument("--batch-size", type=int, default=None)
    c.add_argument("--accum-steps", type=int, default=None)
    c.add_argument("--lr", type=float, default=None)
    c.add_argument("--weight-decay", type=float, default=None)
    c.add_argument("--patience", type=int, default=None)
    c.add_argument("--max-epochs", type=int, default=None)
    c.add_argument("--augment-prob", type=float, default=None)
    c.add_argument("--save-checkpoints", action="store_true")
    c.add_argument("--config", help="JSON or TOML file with option values")
    c.set_defaults(func=cmd_cv, overridable=CV_DEFAULTS)

    e = sub.add_parser("eval", help="bootstrap confidence intervals for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cohort", required=True)
    e.add_argument("--all", action="store_true", help="evaluate every subject, not the stored test fold")
    e.add_argument("--threshold", type=_open_unit, default=0.5)
    e.add_argument("--resamples", type=int, default=1000)
    e.add_argument("--level", type=_open_unit, default=0.95)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("saliency", help="export saliency volumes and PGM slices")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--cohort", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--method", choices=METHODS, default="ggcam")
    a.add_argument("--head", choices=HEADS, default="prognosis")
    a.add_argument("--quantile", type=_open_unit, default=0.9)
    a.add_argument("--layer", help="feature layer for Grad-CAM (default: last dense block)")
    a.add_argument("--nearest", action="store_true", help="nearest-neighbour CAM upsampling")
    a.add_argument("--per-slice", action="store_true", help="normalize each axial slice separately")
    a.add_argument("--subjects", nargs="+", help="subject ids (default: the first --limit)")
    a.add_argument("--limit", type=_positive_int, default=5)
    a.add_argument("--slices", type=int, nargs="+", help="slice indices to export (default: all)")
    a.set_defaults(func=cmd_saliency)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overridable = getattr(args, "overridable", None)
        if overridable is not None:
            merge_config(args, overridable, set(overridable))
        if getattr(args, "k", None) is not None and args.k < 2:
            raise UsageError("--k must be at least 2")
        return args.func(args)
    except UsageError as exc:
        print(f"mtprog {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"mtprog {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"mtprog {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
