"""Multi-output random-forest regressor used as the common baseline.

Splits maximise the reduction of total squared error summed over all outputs.
Each tree draws its own seed from the forest seed, so results do not depend
on the order or parallelism with which trees are fit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .nn import mse_loss


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf_size: int = 1
    features_per_split: int | None = None  # None -> ceil(sqrt(n_features))
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise InvalidInputError("n_trees must be >= 1")
        if self.min_leaf_size < 1:
            raise InvalidInputError("min_leaf_size must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise InvalidInputError("max_depth must be >= 0")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise InvalidInputError("features_per_split must be >= 1")


@dataclass
class RegressionTree:
    feature: np.ndarray    # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray      # (n_nodes, n_outputs) mean label of samples routed to the node
    n_samples: np.ndarray

    @property
    def n_nodes(self):
        return len(self.feature)

    def apply(self, x):
        """Leaf index reached by each row of ``x``."""
        node = np.zeros(len(x), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = x[rows, self.feature[n]] <= self.threshold[n]
            node[rows] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] >= 0
        return node

    def predict(self, x):
        return self.value[self.apply(np.atleast_2d(x))]


def _best_split(x, y, features, min_leaf):
    """Best (gain, feature, threshold) over ``features``; gain is the SSE reduction."""
    n = len(y)
    total = y.sum(axis=0)
    base = total @ total / n
    best = (0.0, -1, 0.0)
    sizes = np.arange(1, n)
    for f in features:
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        csum = np.cumsum(y[order], axis=0)[:-1]
        right = total - csum
        gain = np.einsum("ij,ij->i", csum, csum) / sizes + np.einsum("ij,ij->i", right, right) / (n - sizes) - base
        valid = (xs[:-1] < xs[1:]) & (sizes >= min_leaf) & (n - sizes >= min_leaf)
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0]:
            thr = 0.5 * (xs[i] + xs[i + 1])
            if thr >= xs[i + 1]:  # midpoint rounded up onto the next value
                thr = xs[i]
            best = (float(gain[i]), int(f), thr)
    return best


def fit_tree(x, y, rng, max_depth=None, min_leaf_size=1, features_per_split=None):
    n_features = x.shape[1]
    m = n_features if features_per_split is None else min(features_per_split, n_features)
    feature, threshold, left, right, value, counts = [], [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(y[idx].mean(axis=0))
        counts.append(len(idx))
        return len(feature) - 1

    stack = [(new_node(np.arange(len(y))), np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if len(idx) < 2 * min_leaf_size or (max_depth is not None and depth >= max_depth):
            continue
        ys = y[idx]
        if np.all(ys == ys[0]):
            continue
        features = rng.choice(n_features, m, replace=False)
        gain, f, thr = _best_split(x[idx], ys, features, min_leaf_size)
        if f < 0 or gain <= 0:
            continue
        mask = x[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return RegressionTree(
        np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64), np.array(value), np.array(counts, dtype=np.int64),
    )


@dataclass
class RandomForest:
    trees: list
    config: ForestConfig

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None, :] if single else x
        out = sum(t.predict(xb) for t in self.trees) / len(self.trees)
        return out[0] if single else out


def rf_fit(x, y, cfg=ForestConfig()):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if len(x) == 0:
        raise InvalidInputError("cannot fit a forest on an empty training set")
    if len(x) != len(y):
        raise InvalidInputError(f"{len(x)} inputs but {len(y)} labels")
    mtry = cfg.features_per_split or math.ceil(math.sqrt(x.shape[1]))
    trees = []
    for seq in np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees):
        rng = np.random.default_rng(seq)
        idx = rng.integers(0, len(x), len(x)) if cfg.bootstrap else np.arange(len(x))
        trees.append(fit_tree(x[idx], y[idx], rng, cfg.max_depth, cfg.min_leaf_size, mtry))
    return RandomForest(trees, cfg)


def rf_predict(forest, x):
    return forest.predict(x)


def rf_baseline_loss(data, partition, cfg=ForestConfig()):
    """Mean per-point MSE on ``partition`` of a forest fit on the initial set only."""
    x, y = data[partition]
    if len(x) == 0:
        raise InvalidInputError(f"partition {partition!r} is empty")
    forest = rf_fit(*data["avail"], cfg)
    return float(np.mean(mse_loss(forest.predict(x), y)))
