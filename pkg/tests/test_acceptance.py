"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line (printed in the terminal summary by
conftest.py) and then asserts, so a failing criterion also fails the run.
The multi-task experiment (criterion 8) is marked ``slow``.
"""
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from conftest import record_criterion
from mtprog import nn
from mtprog.encoding import binarize_age, binarize_gcs, decode_ordinal, encode_ordinal, ordinal_class_gcs
from mtprog.metrics import (
    binary_report,
    bootstrap_ci,
    confusion_matrix,
    kappa_quadratic,
    metric_fn,
    ordinal_errors,
    roc_auc,
    uoc_index,
)
from mtprog.model import ModelConfig, MultiTaskModel, MultiTaskOutput, Targets, combined_loss
from mtprog.nn import Tape, Tensor, layers
from mtprog.saliency import (
    METHODS,
    SaliencyVolume,
    compute,
    grad_cam,
    guided_backprop,
    model_checksum,
    normalize_threshold,
)
from mtprog.synth import generate_cohort, permuted
from mtprog.tabular import fit_dtc
from mtprog.training import FoldSplit, TrainConfig, evaluate, oversample_train, stratified_kfold, train_one_fold
from oracles import auc_pairwise, central_diff, kappa_direct, recount_binary, rel_err, uoc_enumerate
from test_tabular import exhaustive_best


def verdict(number, ok, detail):
    record_criterion(number, bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


# 1. gradient integrity


def tape_vs_fd(build, tensors, eps=1e-5):
    with Tape() as tape:
        loss = build()
    tape.backward(loss, accumulate=False)
    worst = 0.0
    for t in tensors:
        g = tape.grad(t)
        g = np.zeros(t.shape) if g is None else g
        worst = max(worst, rel_err(g, central_diff(lambda: float(build().data), t.data, eps)))
    return worst


def projected(out, seed=7):
    w = np.random.default_rng(seed).normal(size=out.shape)
    return nn.tensor_sum(nn.mul(out, Tensor(w)))


def rnd(shape, seed, grad=True):
    return Tensor(np.random.default_rng(seed).normal(size=shape), requires_grad=grad)


def layer_cases():
    x5 = rnd((2, 2, 4, 5, 5), 0)
    w5 = rnd((3, 2, 3, 3, 3), 1)
    b5 = rnd((3,), 2)
    yield "conv3d", lambda: projected(nn.conv3d(x5, w5, b5, stride=1, padding=1)), [x5, w5, b5]
    yield "conv3d stride 2", lambda: projected(nn.conv3d(x5, w5, None, stride=2, padding=1)), [x5, w5]
    x2, w2, b2 = rnd((4, 5), 3), rnd((5, 3), 4), rnd((3,), 5)
    yield "dense", lambda: projected(nn.dense(x2, w2, b2)), [x2, w2, b2]
    g, be = rnd((2,), 6), rnd((2,), 7)
    rm, rv = np.zeros(2), np.ones(2)
    yield "batch norm (train)", lambda: projected(nn.batch_norm(x5, g, be, rm.copy(), rv.copy(), True)), [x5, g, be]
    yield "batch norm (eval)", lambda: projected(nn.batch_norm(x5, g, be, rm + 0.1, rv * 2.0, False)), [x5, g, be]
    yield "avg pool", lambda: projected(nn.avg_pool3d(x5, 2)), [x5]
    yield "global avg pool", lambda: projected(nn.global_avg_pool(x5)), [x5]
    yield "relu", lambda: projected(nn.relu(x5)), [x5]
    yield "sigmoid", lambda: projected(nn.sigmoid(x2)), [x2]
    yield "dropout", lambda: projected(nn.dropout(x2, 0.5, True, np.random.default_rng(0))), [x2]
    blk = nn.DenseBlock(2, 2, 2, np.random.default_rng(8))
    yield "dense block", lambda: projected(blk(x5, True)), [x5] + blk.parameters()
    tr = nn.Transition(2, 2, np.random.default_rng(9))
    yield "transition", lambda: projected(tr(x5, True)), [x5] + tr.parameters()


class ReluGates:
    """Stands in for the layers' ReLU to record gate patterns or replay a recorded one.

    Replaying keeps the network inside one linear region, so central
    differences stay valid when a stencil step would flip a gate.
    """

    def __init__(self):
        self.log, self.frozen = [], None

    def __call__(self, a, name=None):
        if self.frozen is not None:
            mask = self.frozen[len(self.log)]
            self.log.append(mask)
            return nn.mul(a, Tensor(mask.astype(np.float64)))
        self.log.append(a.data > 0)
        return nn.relu(a, name=name)

    def run(self, f, frozen=None):
        self.log, self.frozen = [], frozen
        try:
            return f(), self.log
        finally:
            self.frozen = None


def gate_aware_fd(f, gates, arr, eps=1e-5):
    """Central differences of ``f()``; entries whose stencil flips a gate use the frozen base pattern."""
    _, base = gates.run(f)
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    crossed = 0
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp, mp = gates.run(f)
        flat[i] = old - eps
        fm, mm = gates.run(f)
        if any((a != c).any() or (b != c).any() for a, b, c in zip(mp, mm, base)):
            crossed += 1
            flat[i] = old + eps
            fp, _ = gates.run(f, base)
            flat[i] = old - eps
            fm, _ = gates.run(f, base)
        flat[i] = old
        grad.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return grad, crossed


def test_criterion_1_gradient_integrity(monkeypatch):
    start = time.perf_counter()
    errors = {name: tape_vs_fd(build, tensors) for name, build, tensors in layer_cases()}

    cfg = ModelConfig(variant="mt_ord")  # 8 x 32 x 32 input, default backbone
    model = MultiTaskModel(cfg, seed=0)
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(size=(2, 1) + cfg.input_shape))
    targets = Targets(np.array([0, 1]), np.array([1, 2]), np.array([1, 0]))

    def full_loss():
        model.reseed_dropout(5)  # identical dropout mask on every evaluation
        return combined_loss(model(x, training=True), targets, cfg).total

    params = model.parameters()
    gates = ReluGates()
    monkeypatch.setattr(layers, "relu", gates)
    with Tape() as tape:
        loss = full_loss()
    tape.backward(loss, accumulate=False)
    worst_net, crossed = 0.0, 0
    for p in params:
        fd, c = gate_aware_fd(lambda: float(full_loss().data), gates, p.data)
        worst_net = max(worst_net, rel_err(tape.grad(p), fd))
        crossed += c
    errors["full mt_ord network"] = worst_net
    elapsed = time.perf_counter() - start
    worst = max(errors.values())
    n_params = sum(p.size for p in params)
    detail = (f"max rel err {worst:.2e} over {len(errors) - 1} layer types and all {n_params} network "
              f"parameters (< 1e-4; {crossed} entries had a ReLU gate inside the stencil and used "
              f"gate-frozen differences); {elapsed:.0f} s (< 300 s)")
    verdict(1, worst < 1e-4 and elapsed < 300, detail)


# 2. encoding exactness


def test_criterion_2_encoding_exactness():
    ok = True
    for g in range(3, 16):
        ok &= ordinal_class_gcs(g) == (2 if g <= 8 else 1 if g <= 12 else 0)
        ok &= binarize_gcs(g) == int(g <= 8)
    for a, want in [(0, 0), (79, 0), (79.999, 0), (80, 1), (130, 1)]:
        ok &= binarize_age(a) == want
    roundtrips = 0
    for k in range(2, 11):
        for c in range(k):
            bits = encode_ordinal(c, k)
            ok &= decode_ordinal(bits) == c and len(bits) == k - 1
            roundtrips += 1
    ok &= binarize_gcs(8) != binarize_gcs(9) and binarize_age(79.999) != binarize_age(80)
    verdict(2, ok, f"13 GCS values, 5 ages, {roundtrips} ordinal roundtrips (K <= 10), both boundary pairs flip")


# 3. loss identity


def test_criterion_3_loss_identity():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(variant="mt_ord")
    worst = 0.0
    for _ in range(10_000):
        n = int(rng.integers(1, 6))
        out = MultiTaskOutput(Tensor(rng.normal(0, 5, (n, 1))), Tensor(rng.normal(0, 5, (n, 2))), Tensor(rng.normal(0, 5, (n, 1))))
        t = Targets(rng.integers(0, 2, n), rng.integers(0, 3, n), rng.integers(0, 2, n))
        lb = combined_loss(out, t, cfg)
        worst = max(worst, abs(lb.l_total - (0.4 * lb.l_prog + 0.3 * lb.l_gcs + 0.3 * lb.l_age)))

    small = dict(input_shape=(4, 8, 8), stem_channels=4, growth_rate=2, block_layers=(1, 1))
    base_cfg = ModelConfig(variant="baseline_prognosis", **small)
    zero_cfg = ModelConfig(variant="mt_ord", lambda_gcs=0.0, lambda_age=0.0, **small)
    base, zero = MultiTaskModel(base_cfg, seed=3), MultiTaskModel(zero_cfg, seed=3)
    x = Tensor(rng.uniform(size=(3, 1, 4, 8, 8)))
    t = Targets(np.array([0, 1, 1]), np.array([0, 1, 2]), np.array([1, 0, 1]))
    losses, grads = [], []
    for model, c in ((base, base_cfg), (zero, zero_cfg)):
        with Tape() as tape:
            lb = combined_loss(model(x, training=True), t, c)
        tape.backward(lb.total, accumulate=False)
        losses.append(lb.l_total)
        grads.append({k: tape.grad(p) for k, p in model.named_parameters()})
    shared = sorted(grads[0])
    same = losses[0] == losses[1] and all(np.array_equal(grads[0][k], grads[1][k]) for k in shared)
    verdict(3, worst <= 1e-12 and same,
            f"max |total - weighted sum| {worst:.1e} over 1e4 cases; zero-lambda mt_ord matches baseline loss and "
            f"{len(shared)} shared parameter gradients bit for bit: {same}")


# 4. metric oracles


def deviation(a, b):
    if math.isnan(a) or math.isnan(b):
        return 0.0 if math.isnan(a) and math.isnan(b) else math.inf
    return abs(a - b)


def test_criterion_4_metric_oracles():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 501))
        y, p = rng.integers(0, 2, n), rng.integers(0, 2, n)
        y[:2] = [0, 1]
        got = binary_report(y, p).values
        for k, v in recount_binary(y.tolist(), p.tolist()).items():
            worst = max(worst, deviation(got[k], v))
        s = np.round(rng.uniform(size=n), 2)  # coarse grid forces score ties
        worst = max(worst, deviation(roc_auc(s, y), auc_pairwise(s.tolist(), y.tolist())))
        t3, p3 = rng.integers(0, 3, n), rng.integers(0, 3, n)
        mae, rmse = ordinal_errors(t3, p3)
        worst = max(worst, deviation(mae, np.mean(np.abs(t3 - p3))), deviation(rmse, math.sqrt(np.mean((t3 - p3) ** 2))))
        try:
            want = kappa_direct(t3.tolist(), p3.tolist(), 3)
        except ZeroDivisionError:
            want = math.nan
        worst = max(worst, deviation(kappa_quadratic(confusion_matrix(t3, p3, 3)), want))
    golden = abs(uoc_index([[2, 1, 0], [0, 3, 1], [0, 0, 3]]) - 0.21140180878552967)
    zero_iff_diag = uoc_index(np.diag([3, 1, 4])) == 0.0
    for _ in range(50):
        m = rng.integers(0, 4, (3, 3))
        m[0, 0] += 1
        off = m.sum() - np.trace(m) > 0
        zero_iff_diag &= (uoc_index(m) > 0) == off and abs(uoc_index(m) - uoc_enumerate(m.tolist())) <= 1e-12
    ok = worst <= 1e-12 and golden <= 1e-12 and zero_iff_diag
    verdict(4, ok, f"max oracle deviation {worst:.1e} on 100 instances; golden A_UOC deviation {golden:.1e}; "
                   f"zero iff diagonal: {zero_iff_diag}")


# 5. cross-validation protocol


def test_criterion_5_cv_protocol():
    labels = np.array([0] * 99 + [1] * 162)
    ok_counts = all(
        9 <= (labels[s.test] == 0).sum() <= 10 and 16 <= (labels[s.test] == 1).sum() <= 17
        for s in stratified_kfold(labels, 10, 0)
    )
    ok_over = True
    for s in stratified_kfold(labels, 10, 1):
        val, test = s.validation.tobytes(), s.test.tobytes()
        tr = oversample_train(s, labels, 1)
        ok_over &= (labels[tr] == 0).sum() == (labels[tr] == 1).sum()
        ok_over &= s.validation.tobytes() == val and s.test.tobytes() == test
    ok_part = True
    rng = np.random.default_rng(5)
    for seed in range(50):
        n0, n1 = int(rng.integers(10, 120)), int(rng.integers(10, 120))
        lab = rng.permutation(np.array([0] * n0 + [1] * n1))
        k = int(rng.integers(3, 11))
        splits = stratified_kfold(lab, k, seed)
        ok_part &= sorted(np.concatenate([s.test for s in splits]).tolist()) == list(range(n0 + n1))
        for s in splits:
            parts = [set(s.train.tolist()), set(s.validation.tolist()), set(s.test.tolist())]
            ok_part &= not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
            ok_part &= len(parts[0] | parts[1] | parts[2]) == n0 + n1
    verdict(5, ok_counts and ok_over and ok_part,
            f"99/162 fold counts: {ok_counts}; oversampling exact and val/test untouched: {ok_over}; "
            f"partition and disjointness on 50 seeds: {ok_part}")


# 6. bootstrap behaviour


def test_criterion_6_bootstrap():
    start = time.perf_counter()
    ci = bootstrap_ci(np.ones(60, dtype=int), np.full(60, 0.8), metric_fn("acc"), 1000, 0.95, seed=0)
    zero_width = ci.lower == ci.upper
    outer = np.random.default_rng(99)
    hits = 0
    stat = lambda y, c: float(np.mean(c))
    for rep in range(100):
        correct = (outer.uniform(size=200) < 0.7).astype(float)
        c = bootstrap_ci(np.zeros(200), correct, stat, 1000, 0.95, seed=rep)
        hits += c.lower <= 0.7 <= c.upper
    elapsed = time.perf_counter() - start
    verdict(6, zero_width and hits >= 90 and elapsed < 120,
            f"constant data width {ci.upper - ci.lower:.1e}; coverage {hits}/100 (>= 90); {elapsed:.1f} s (< 120 s)")


# 7. boundary recovery


def check_splits(tree, x, y):
    """Every internal node's split is Gini-optimal for the samples reaching it."""
    stack = [(tree.root, np.arange(len(y)))]
    while stack:
        node, idx = stack.pop()
        if node.is_leaf:
            continue
        if abs(node.impurity_after - exhaustive_best(x[idx], y[idx], tree.min_leaf)) > 1e-12:
            return False
        mask = x[idx, node.feature] <= node.threshold
        stack += [(node.left, idx[mask]), (node.right, idx[~mask])]
    return True


def test_criterion_7_boundary_recovery():
    recovered, optimal = 0, True
    for seed in range(40):
        cohort = generate_cohort(261, seed=seed)
        x, y = cohort.tabular()
        tree = fit_dtc(x, y, max_depth=2, min_leaf=5)
        cuts = []
        stack = [tree.root]
        while stack:
            node = stack.pop()
            if not node.is_leaf:
                cuts.append((node.feature, node.threshold))
                stack += [node.left, node.right]
        gcs_ok = any(f == 0 and 8 < t < 9 for f, t in cuts)
        age_ok = any(f == 1 and 79 < t < 80 for f, t in cuts)
        recovered += gcs_ok and age_ok
        optimal &= check_splits(tree, x, y)
    verdict(7, recovered >= 38 and optimal,
            f"both thresholds recovered in {recovered}/40 seeds (>= 38); every split Gini-optimal: {optimal}")


# 8. directional multi-task gain

MT_SEEDS = range(5)
MT_COHORT = 300
MT_FOLDS = 5
MT_TRAIN = dict(max_epochs=30, patience_epochs=10)


def _experiment_fold(task):
    variant, seed, fold, shuffle = task
    cohort = generate_cohort(MT_COHORT, seed=seed)
    if shuffle:
        cohort = permuted(cohort, seed)
    targets = cohort.targets()
    split = stratified_kfold(targets.prognosis, MT_FOLDS, seed)[fold]
    fold_seed = seed ^ fold
    model = MultiTaskModel(ModelConfig(variant=variant), seed=fold_seed)
    train_one_fold(model, cohort.volumes, targets, split, TrainConfig(seed=fold_seed, **MT_TRAIN))
    report = evaluate(model, cohort.volumes, targets, split.test)["prognosis"]
    return task, report.values["b_acc"]


@pytest.mark.slow
def test_criterion_8_multitask_gain():
    start = time.perf_counter()
    folds = range(MT_FOLDS)
    tasks = [(v, s, f, False) for s in MT_SEEDS for v in ("baseline_prognosis", "mt_ord") for f in folds]
    tasks += [("baseline_prognosis", 0, f, True) for f in folds]
    jobs = min(len(tasks), os.cpu_count() or 1)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = dict(pool.map(_experiment_fold, tasks))
    else:
        results = dict(map(_experiment_fold, tasks))
    # per-seed score is the mean over the test folds of that seed's CV
    ba = {v: np.array([np.mean([results[(v, s, f, False)] for f in folds]) for s in MT_SEEDS])
          for v in ("baseline_prognosis", "mt_ord")}
    control = np.mean([results[("baseline_prognosis", 0, f, True)] for f in folds])
    gain = ba["mt_ord"].mean() - ba["baseline_prognosis"].mean()
    sd_mt, sd_base = ba["mt_ord"].std(ddof=1), ba["baseline_prognosis"].std(ddof=1)
    elapsed = time.perf_counter() - start
    ok = gain >= 0.02 and sd_mt <= sd_base and 0.4 <= control <= 0.6
    detail = (f"B.Acc mt_ord {ba['mt_ord'].mean():.3f} ± {sd_mt:.3f} vs baseline "
              f"{ba['baseline_prognosis'].mean():.3f} ± {sd_base:.3f} (gain {gain:+.3f}, need >= 0.02, SD not larger); "
              f"permuted control {control:.3f} (in [0.4, 0.6]); {elapsed / 60:.1f} min on {os.cpu_count()} core(s)")
    print("per-seed B.Acc", {v: np.round(a, 3).tolist() for v, a in ba.items()})
    verdict(8, ok, detail)


# 9. saliency contracts


def test_criterion_9_saliency_contracts():
    small = dict(input_shape=(4, 8, 8), stem_channels=4, growth_rate=2, block_layers=(1, 1))
    rng = np.random.default_rng(0)
    cam_ok = product_ok = checksum_ok = support_ok = True
    for seed in range(5):
        model = MultiTaskModel(ModelConfig(variant="mt_ord", **small), seed=seed)
        model(Tensor(rng.uniform(size=(4, 1, 4, 8, 8))), training=True)
        before = model_checksum(model)
        vol = rng.uniform(size=(4, 8, 8))
        for head in ("prognosis", "gcs", "age"):
            for layer in model.backbone.feature_layers:
                cam_ok &= grad_cam(model, vol, head, layer).values.min() >= 0.0
            gbp = guided_backprop(model, vol, head)
            cam = grad_cam(model, vol, head)
            product_ok &= np.array_equal(compute(model, vol, "ggcam", head).values, gbp.values * cam.values)
            for method in METHODS:
                sal = normalize_threshold(compute(model, vol, method, head), 0.9)
                v = sal.values
                support_ok &= bool(np.all((v == 0) | ((v >= (sal.threshold or 0)) & (v <= 1))))
        checksum_ok &= model_checksum(model) == before

    # hand-built network whose hidden gates are all closed
    x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    from mtprog.saliency import _guided_relu

    with Tape() as tape:
        out = nn.tensor_sum(nn.dense(nn.relu(nn.dense(x, Tensor(-np.ones((2, 3))))), Tensor(np.ones((3, 1)))))
    tape.backward(out, overrides={"relu": _guided_relu}, accumulate=False)
    closed_ok = not tape.grad(x).any()
    closed_model = MultiTaskModel(ModelConfig(variant="mt_ord", **small), seed=0)
    closed_model.backbone.stem_norm.beta.data[:] = -1e3
    closed_ok &= not guided_backprop(closed_model, rng.uniform(size=(4, 8, 8))).values.any()
    degenerate = normalize_threshold(SaliencyVolume(np.ones((2, 2, 2)), "prognosis", "gbp"))
    support_ok &= degenerate.degenerate and not degenerate.values.any()
    ok = cam_ok and product_ok and closed_ok and checksum_ok and support_ok
    verdict(9, ok, f"CAM >= 0: {cam_ok}; guided Grad-CAM exact product: {product_ok}; closed gates give zero: "
                   f"{closed_ok}; checksums unchanged: {checksum_ok}; support in {{0}} U [t, 1]: {support_ok}")


# 10. determinism of the command line


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_cli_determinism(tmp_path):
    from mtprog.cli import main

    runs = []
    for rep in ("a", "b"):
        base = tmp_path / rep
        codes = [
            main(["synth", "--n", "30", "--seed", "11", "--extents", "8", "16", "16", "--out", str(base / "cohort")]),
            main(["cv", "--cohort", str(base / "cohort"), "--out", str(base / "cv"), "--k", "3", "--seeds", "0,1",
                  "--max-epochs", "2", "--save-checkpoints"]),
            main(["saliency", "--checkpoint", str(base / "cv" / "checkpoints" / "mt_ord_s0" / "fold0.mtpg"),
                  "--cohort", str(base / "cohort"), "--out", str(base / "sal"), "--limit", "3"]),
        ]
        runs.append((codes, {d: tree_bytes(base / d) for d in ("cohort", "cv", "sal")}))
    (codes_a, a), (codes_b, b) = runs
    identical = {d: a[d] == b[d] for d in a}
    counts = {d: len(a[d]) for d in a}
    ok = codes_a == codes_b == [0, 0, 0] and all(identical.values())
    verdict(10, ok, f"exit codes {codes_a}/{codes_b}; byte-identical reruns {identical} over files {counts}")
