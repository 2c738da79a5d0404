import json
import re
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtprog.cli import (
    CV_DEFAULTS,
    EXIT_IO,
    EXIT_OK,
    EXIT_PARTIAL,
    EXIT_USAGE,
    UsageError,
    build_parser,
    eval_lines,
    main,
    merge_config,
    parse_seeds,
    tabular_cv,
)
from mtprog.metrics import metric_fn

TINY = ["--extents", "8", "16", "16"]
FAST = ["--k", "3", "--max-epochs", "1", "--augment-prob", "0.0"]


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cohort")
    assert main(["synth", "--n", "24", "--seed", "3", "--out", str(d), *TINY]) == EXIT_OK
    return d


@pytest.fixture(scope="module")
def trained(cohort_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cv")
    code = main(["cv", "--cohort", str(cohort_dir), "--out", str(out), "--variant", "mt_ord", "--save-checkpoints", *FAST])
    assert code == EXIT_OK
    return out


def test_seed_list_forms():
    assert parse_seeds("3") == [3]
    assert parse_seeds("1,4,9") == [1, 4, 9]
    assert parse_seeds("2..5") == [2, 3, 4, 5]
    for bad in ("5..2", "a", "1..", ""):
        with pytest.raises(Exception):
            parse_seeds(bad)


def test_help_exits_cleanly(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    assert "synth" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        ["tabular", "--cohort", "x", "--model", "rf"],
        ["saliency", "--checkpoint", "a", "--cohort", "b", "--out", "c", "--quantile", "0.0"],
        ["eval", "--checkpoint", "a", "--cohort", "b", "--threshold", "1.0"],
        ["cv", "--cohort", "a", "--out", "b", "--seeds", "3..1"],
        ["nonsense"],
    ],
)
def test_argument_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_validation_errors_exit_2(tmp_path, cohort_dir):
    assert main(["synth", "--n", "5", "--out", str(tmp_path / "c")]) == EXIT_USAGE
    for k in ("1", "2"):
        assert main(["cv", "--cohort", str(cohort_dir), "--out", str(tmp_path / "o"), "--k", k]) == EXIT_USAGE


def test_missing_cohort_exits_3(tmp_path):
    assert main(["tabular", "--cohort", str(tmp_path / "missing")]) == EXIT_IO
    assert main(["cv", "--cohort", str(tmp_path), "--out", str(tmp_path / "o")]) == EXIT_IO


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"k": 5, "lr": 0.01}))
    parser = build_parser()
    args = parser.parse_args(["cv", "--cohort", "a", "--out", "b", "--config", str(cfg), "--k", "3"])
    merge_config(args, CV_DEFAULTS, set(CV_DEFAULTS))
    assert args.k == 3  # flag beats file
    assert args.lr == 0.01  # file beats default
    assert args.max_epochs == 200  # default fills the rest


def test_toml_config_and_seed_strings(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text('seeds = "1..3"\nvariant = "mt_bin"\n')
    args = build_parser().parse_args(["cv", "--cohort", "a", "--out", "b", "--config", str(cfg)])
    merge_config(args, CV_DEFAULTS, set(CV_DEFAULTS))
    assert args.seeds == [1, 2, 3] and args.variant == "mt_bin"


def test_unknown_config_key_is_usage_error(tmp_path, cohort_dir):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"momentum": 0.9}))
    args = build_parser().parse_args(["cv", "--cohort", "a", "--out", "b", "--config", str(cfg)])
    with pytest.raises(UsageError):
        merge_config(args, CV_DEFAULTS, set(CV_DEFAULTS))
    assert main(["tabular", "--cohort", str(cohort_dir), "--config", str(cfg)]) == EXIT_USAGE


def test_synth_writes_manifest(cohort_dir, capsys):
    manifest = json.loads((cohort_dir / "manifest.json").read_text())
    assert manifest["n"] == 24 and manifest["spec"]["extents"] == [8, 16, 16]


def test_tabular_command_reports_boundaries(tmp_path, capsys):
    cdir = tmp_path / "c"
    main(["synth", "--n", "120", "--seed", "0", "--out", str(cdir), *TINY])
    capsys.readouterr()
    assert main(["tabular", "--cohort", str(cdir), "--k", "3", "--out", str(tmp_path / "t")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "gcs" in out and "±" in out
    assert (tmp_path / "t" / "tree.json").is_file()


def test_tabular_cv_is_deterministic():
    rng = np.random.default_rng(0)
    x = np.column_stack([rng.integers(3, 16, 80), rng.integers(30, 100, 80)]).astype(float)
    y = ((x[:, 0] <= 8) | (x[:, 1] >= 80)).astype(int)
    a = tabular_cv(x, y, "lr", 4, 1)
    b = tabular_cv(x, y, "lr", 4, 1)
    assert [r.values for r in a] == [r.values for r in b]
    assert np.mean([r["b_acc"] for r in tabular_cv(x, y, "dtc", 4, 1)]) > 0.9


def test_cv_outputs_and_checkpoints(trained):
    run = trained / "mt_ord_s0"
    assert {p.name for p in run.iterdir()} >= {"epochs.csv", "folds.csv", "aggregate.json"}
    assert sorted(p.name for p in (trained / "checkpoints" / "mt_ord_s0").glob("*.mtpg")) == ["fold0.mtpg", "fold1.mtpg", "fold2.mtpg"]
    summary = json.loads((trained / "summary.json").read_text())
    assert summary["config"]["k"] == 3


def test_eval_prints_bracketed_intervals(trained, cohort_dir, capsys):
    ckpt = trained / "checkpoints" / "mt_ord_s0" / "fold0.mtpg"
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--cohort", str(cohort_dir), "--resamples", "200"]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert "8 subjects" in lines[0]
    pattern = re.compile(r"^\S.* (\d\.\d\d \(\d\.\d\d-\d\.\d\d\)|undefined .*)$")
    assert len(lines) == 9 and all(pattern.match(l) for l in lines[1:])


def test_eval_rejects_mismatched_cohort(trained, tmp_path):
    other = tmp_path / "o"
    main(["synth", "--n", "20", "--out", str(other)])
    ckpt = trained / "checkpoints" / "mt_ord_s0" / "fold0.mtpg"
    assert main(["eval", "--checkpoint", str(ckpt), "--cohort", str(other)]) == EXIT_USAGE
    assert main(["eval", "--checkpoint", str(tmp_path / "none.mtpg"), "--cohort", str(other)]) == EXIT_IO


def test_saliency_command_exports_slices(trained, cohort_dir, tmp_path):
    ckpt = trained / "checkpoints" / "mt_ord_s0" / "fold1.mtpg"
    out = tmp_path / "sal"
    code = main(["saliency", "--checkpoint", str(ckpt), "--cohort", str(cohort_dir), "--out", str(out),
                 "--method", "gradcam", "--head", "gcs", "--limit", "2", "--slices", "0", "4"])
    assert code == EXIT_OK
    assert sorted(p.name for p in out.glob("*.pgm")) == [
        f"s000{i}_gradcam_gcs_z{k}.pgm" for i in (0, 1) for k in (0, 4)
    ]
    assert len(list(out.glob("*.f64"))) == 2
    bad = ["saliency", "--checkpoint", str(ckpt), "--cohort", str(cohort_dir), "--out", str(out)]
    assert main(bad + ["--subjects", "nobody"]) == EXIT_USAGE
    assert main(bad + ["--layer", "block7"]) == EXIT_USAGE


def test_partial_failure_exits_4(cohort_dir, tmp_path, monkeypatch):
    import mtprog.training as training

    def broken(*args, **kwargs):
        raise RuntimeError("boom")

    monkeypatch.setattr(training, "default_fold_runner", broken)
    code = main(["cv", "--cohort", str(cohort_dir), "--out", str(tmp_path), *FAST])
    assert code == EXIT_PARTIAL
    assert "RuntimeError: boom" in (tmp_path / "mt_ord_s0" / "folds.csv").read_text()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mtprog.cli", "synth", "--n", "3", "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == EXIT_USAGE and "at least 20" in proc.stderr


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_recall_never_rises_with_threshold(seed, t1, t2):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, 40)
    y[:2] = [0, 1]
    p = rng.uniform(size=40)
    lo, hi = sorted((t1, t2))
    assert metric_fn("recall", hi)(y, p) <= metric_fn("recall", lo)(y, p)


def test_eval_lines_format():
    y = np.array([0, 1] * 20)
    p = np.where(y == 1, 0.8, 0.2)
    lines, cis = eval_lines(y, p, resamples=200)
    assert lines[0].split()[-2:] == ["1.00", "(1.00-1.00)"]
    assert set(cis) == {"auc", "acc", "b_acc", "spec", "npv", "prec", "recall", "f1"}
