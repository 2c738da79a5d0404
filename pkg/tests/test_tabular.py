import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtprog.tabular import (
    DecisionTree,
    DivergenceError,
    TabularRecord,
    best_split,
    extract_boundaries,
    fit_dtc,
    fit_logistic,
    gini,
    load_records_csv,
    logistic_loss_grad,
    permutation_importance,
    predict_tabular,
    records_to_matrix,
)
from oracles import central_diff


def exhaustive_best(x, y, min_leaf):
    """Weighted child Gini of every (feature, midpoint) split; brute force."""
    best = math.inf
    n = len(y)
    for f in range(x.shape[1]):
        vals = sorted(set(x[:, f].tolist()))
        for a, b in zip(vals, vals[1:]):
            t = (a + b) / 2
            left = x[:, f] <= t
            nl, nr = left.sum(), n - left.sum()
            if nl < min_leaf or nr < min_leaf:
                continue
            gl = gini([int((y[left] == 0).sum()), int((y[left] == 1).sum())])
            gr = gini([int((y[~left] == 0).sum()), int((y[~left] == 1).sum())])
            best = min(best, (nl * gl + nr * gr) / n)
    return best


def test_gini_examples():
    assert gini([5, 5]) == 0.5
    assert gini([4, 0]) == 0.0
    assert gini([0, 0]) == 0.0


def test_clean_threshold_is_found_at_midpoint():
    x = np.array([[3], [5], [7], [8], [9], [10], [12], [15]], dtype=float)
    y = np.array([1, 1, 1, 1, 0, 0, 0, 0])
    tree = fit_dtc(x, y, max_depth=1, min_leaf=1)
    assert tree.root.feature == 0 and tree.root.threshold == 8.5
    assert tree.predict([[8], [9]]).tolist() == [1, 0]


def test_ties_prefer_lowest_feature_then_lowest_threshold():
    x = np.array([[0, 0], [1, 1], [2, 2], [3, 3]], dtype=float)
    y = np.array([0, 1, 0, 1])
    f, t, _ = best_split(x, y, 1)
    assert f == 0
    assert t == 0.5


def test_min_leaf_is_respected():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(40, 2))
    y = (x[:, 0] > 0.9).astype(int)
    tree = fit_dtc(x, y, max_depth=3, min_leaf=5)

    def leaves(node):
        return [node] if node.is_leaf else leaves(node.left) + leaves(node.right)

    assert all(sum(leaf.counts) >= 5 for leaf in leaves(tree.root))


def test_single_class_warns_and_returns_leaf():
    with pytest.warns(RuntimeWarning):
        tree = fit_dtc(np.arange(10.0)[:, None], np.ones(10, dtype=int))
    assert tree.single_class and tree.depth == 0
    assert tree.predict([[3.0]]).tolist() == [1]


def test_too_few_records():
    with pytest.raises(ValueError):
        fit_dtc([[1.0]], [1])


def test_leaf_tie_goes_to_poor_class():
    x = np.array([[0.0], [1.0]])
    tree = fit_dtc(x, np.array([0, 1]), max_depth=0)
    assert tree.predict([[0.0]]).tolist() == [1]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_root_split_is_globally_gini_optimal(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(12, 60))
    x = np.column_stack([rng.integers(3, 16, n), rng.integers(30, 101, n)]).astype(float)
    y = rng.integers(0, 2, n)
    split = best_split(x, y, 5)
    want = exhaustive_best(x, y, 5)
    if split is None:
        assert want == math.inf
    else:
        assert abs(split[2] - want) <= 1e-12


def test_tree_json_roundtrip():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(50, 2))
    y = ((x[:, 0] > 0.5) ^ (x[:, 1] > 0.7)).astype(int)
    tree = fit_dtc(x, y, 2, 3, feature_names=("gcs", "age"))
    back = DecisionTree.from_json(tree.to_json())
    np.testing.assert_array_equal(back.predict(x), tree.predict(x))
    np.testing.assert_array_equal(back.predict_proba(x), tree.predict_proba(x))
    assert all(name in ("gcs", "age") for name, _ in extract_boundaries(tree))


def test_boundary_extraction_on_planted_rule():
    gcs = np.repeat(np.arange(3, 16), 21)
    age = np.tile(np.arange(70, 91), 13)
    y = ((gcs <= 8) | (age >= 80)).astype(int)
    tree = fit_dtc(np.column_stack([gcs, age]).astype(float), y, feature_names=("gcs", "age"))
    found = extract_boundaries(tree)
    assert any(f == "gcs" and 8 < t < 9 for f, t in found)
    assert any(f == "age" and 79 < t < 80 for f, t in found)


def test_logistic_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(30, 3))
    y = rng.integers(0, 2, 30).astype(float)
    w, b = rng.normal(size=3), 0.3
    _, gw, gb = logistic_loss_grad(w, b, x, y, 0.01)
    num = central_diff(lambda: logistic_loss_grad(w, b, x, y, 0.01)[0], w)
    np.testing.assert_allclose(gw, num, rtol=1e-6, atol=1e-9)
    bb = np.array([b])
    num_b = central_diff(lambda: logistic_loss_grad(w, bb[0], x, y, 0.01)[0], bb)
    assert gb == pytest.approx(num_b[0], rel=1e-6)


def test_logistic_learns_separable_direction_and_is_deterministic():
    rng = np.random.default_rng(2)
    x = rng.uniform(size=(200, 2))
    y = (x[:, 0] + 0.2 * rng.normal(size=200) > 0.5).astype(int)
    a = fit_logistic(x, y)
    b = fit_logistic(x, y)
    np.testing.assert_array_equal(a.weights, b.weights)
    assert a.weights[0] > 1 and abs(a.weights[1]) < a.weights[0]
    assert np.mean(a.predict(x) == y) > 0.8
    assert a.history[-1] <= a.history[0]


def test_logistic_divergence_and_single_class():
    x = np.array([[1e200], [-1e200]])
    with pytest.raises(DivergenceError):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit_logistic(x, np.array([1, 0]), learning_rate=1e10, epochs=5)
    with pytest.raises(ValueError):
        fit_logistic(np.ones((3, 1)), np.ones(3))


def test_predict_tabular_contracts():
    with pytest.raises(ValueError):
        predict_tabular(None, [[1.0]])
    with pytest.raises(TypeError):
        predict_tabular(object(), [[1.0]])


def test_permutation_importance_ranks_informative_feature():
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(200, 2))
    y = (x[:, 1] > 0.5).astype(int)
    tree = fit_dtc(x, y, 2, 5)
    imp = permutation_importance(tree, x, y, 5, seed=0)
    assert imp[1] > 0.3 and abs(imp[0]) < 0.05


def test_records_csv_roundtrip(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("id,gcs,age,sbp,label\na,7,81,120,1\nb,14,40,110,0\n")
    recs = load_records_csv(p)
    assert recs[0] == TabularRecord(7, 81.0, 1, (120.0,), "a")
    x, y = records_to_matrix(recs, ("gcs", "age", "extra_0"))
    assert x.tolist() == [[7, 81, 120], [14, 40, 110]] and y.tolist() == [1, 0]
    bad = tmp_path / "bad.csv"
    bad.write_text("gcs,label\n3,1\n")
    with pytest.raises(ValueError):
        load_records_csv(bad)
