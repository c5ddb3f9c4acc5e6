import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from activeload.data import SyntheticConfig, generate_synthetic, normalize, split
from activeload.engine import accuracy
from activeload.errors import InvalidInputError
from activeload.forest import ForestConfig, RandomForest, _best_split, fit_tree, rf_baseline_loss, rf_fit, rf_predict
from activeload.nn import mse_loss


def traverse(tree, row):
    """Reference traversal: follow one row node by node."""
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if row[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return tree.value[node]


def test_single_point_single_leaf():
    forest = rf_fit([[1.0, 2.0]], [[3.0, 4.0]], ForestConfig(n_trees=5))
    for t in forest.trees:
        assert t.n_nodes == 1
    np.testing.assert_array_equal(rf_predict(forest, [[9.0, -9.0]]), [[3.0, 4.0]])


def test_separable_clusters_zero_training_loss():
    x = np.array([[0.0], [0.1], [0.2], [5.0], [5.1], [5.2]])
    y = np.array([[1.0, 2.0]] * 3 + [[7.0, -1.0]] * 3)
    forest = rf_fit(x, y, ForestConfig(n_trees=1, max_depth=1, bootstrap=False))
    assert np.mean(mse_loss(forest.predict(x), y)) == 0.0


def test_same_seed_identical_forest():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=(30, 4)), rng.normal(size=(30, 3))
    a, b = rf_fit(x, y, ForestConfig(n_trees=7, seed=2)), rf_fit(x, y, ForestConfig(n_trees=7, seed=2))
    for ta, tb in zip(a.trees, b.trees):
        assert np.array_equal(ta.threshold, tb.threshold) and np.array_equal(ta.value, tb.value)


def test_one_tree_matches_leaf_mean_and_traversal():
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(10, 3)), rng.normal(size=(10, 2))
    forest = rf_fit(x, y, ForestConfig(n_trees=1, seed=0))
    tree = forest.trees[0]
    q = rng.normal(size=(10, 3))
    expected = np.array([traverse(tree, r) for r in q])
    np.testing.assert_array_equal(forest.predict(q), expected)
    np.testing.assert_array_equal(forest.predict(q[0]), expected[0])


def test_forest_traversal_oracle_many_trees():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(10, 4)), rng.normal(size=(10, 3))
    forest = rf_fit(x, y, ForestConfig(n_trees=6, seed=4))
    q = rng.normal(size=(8, 4))
    expected = np.array([np.mean([traverse(t, r) for t in forest.trees], axis=0) for r in q])
    np.testing.assert_allclose(forest.predict(q), expected, rtol=1e-14)


def test_leaf_values_are_training_means():
    rng = np.random.default_rng(3)
    x, y = rng.normal(size=(40, 3)), rng.normal(size=(40, 2))
    tree = fit_tree(x, y, np.random.default_rng(0), min_leaf_size=3)
    leaves = tree.apply(x)
    for leaf in np.unique(leaves):
        members = leaves == leaf
        assert members.sum() >= 3
        np.testing.assert_allclose(tree.value[leaf], y[members].mean(axis=0), rtol=1e-12)
        assert tree.n_samples[leaf] == members.sum()


def test_tree_order_invariance():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(25, 3)), rng.normal(size=(25, 2))
    forest = rf_fit(x, y, ForestConfig(n_trees=5))
    flipped = RandomForest(forest.trees[::-1], forest.config)
    np.testing.assert_allclose(flipped.predict(x), forest.predict(x), rtol=1e-14)


def test_split_gain_matches_variance_oracle():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=(12, 2)), rng.normal(size=(12, 3))
    gain, f, thr = _best_split(x, y, np.arange(2), 1)
    sse = lambda a: float(np.sum((a - a.mean(axis=0)) ** 2)) if len(a) else 0.0
    mask = x[:, f] <= thr
    assert gain == pytest.approx(sse(y) - sse(y[mask]) - sse(y[~mask]), rel=1e-9)
    best = max(sse(y) - sse(y[x[:, g] <= t]) - sse(y[x[:, g] > t])
               for g in range(2) for t in x[:, g] if (x[:, g] > t).any())
    assert gain == pytest.approx(best, rel=1e-9)


def test_rf_errors():
    with pytest.raises(InvalidInputError):
        rf_fit(np.zeros((0, 2)), np.zeros((0, 1)))
    with pytest.raises(InvalidInputError):
        rf_fit(np.zeros((2, 2)), np.zeros((3, 1)))
    with pytest.raises(InvalidInputError):
        ForestConfig(n_trees=0)
    with pytest.raises(InvalidInputError):
        ForestConfig(min_leaf_size=0)


@settings(max_examples=30, deadline=None)
@given(
    x=arrays(np.float64, st.tuples(st.integers(1, 20), st.just(2)), elements=st.floats(-10, 10, width=32)),
    seed=st.integers(0, 1000),
)
def test_predictions_within_label_range(x, seed):
    y = np.random.default_rng(seed).normal(size=(len(x), 3))
    forest = rf_fit(x, y, ForestConfig(n_trees=3, seed=seed))
    p = forest.predict(np.random.default_rng(seed + 1).normal(0, 10, size=(5, 2)))
    assert np.all(p >= y.min(axis=0) - 1e-12) and np.all(p <= y.max(axis=0) + 1e-12)


def test_baseline_loss_on_shifted_data():
    data = normalize(split(generate_synthetic(SyntheticConfig(30, 100, seed=0)), seed=0))
    cfg = ForestConfig(n_trees=20)
    rf = rf_baseline_loss(data, "spatio_temporal", cfg)
    assert rf > 0
    assert accuracy(rf, rf) == 0.0
    assert rf_baseline_loss(data, "avail", cfg) <= rf
    with pytest.raises(KeyError):
        rf_baseline_loss(data, "nope", cfg)
