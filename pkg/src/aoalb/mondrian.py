"""Aggregated Mondrian forest for online classification.

Each tree is grown by the Mondrian process: a node whose bounding box would
be extended by a new point draws a split time from an exponential with rate
equal to the total extension, and if that time falls before its children's
creation time (always, for a leaf) a new split separating the point from the
old box is inserted above it.  Leaves never split on points whose label
matches every sample they have seen.

Predictions aggregate every node on the root-to-leaf path with exponential
weights: each node carries the log of exp(-step * cumulative log-loss) of its
own sequential predictions, each subtree a log-weight mixing the node with its
children under prior 1/2, and the prediction is built bottom-up from the leaf.
Node predictions use a symmetric Dirichlet (Jeffreys, alpha = 0.5) prior.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import DimensionMismatch, InvalidSpec

N_TREES = 10
STEP = 1.0
DIRICHLET = 0.5


def log_sum_2_exp(a: float, b: float) -> float:
    """log((exp(a) + exp(b)) / 2) without overflow."""
    if a > b:
        return a + math.log1p(math.exp(b - a)) - math.log(2.0)
    return b + math.log1p(math.exp(a - b)) - math.log(2.0)


class MondrianTree:
    def __init__(self, n_classes: int, n_features: int, step=STEP, dirichlet=DIRICHLET, use_aggregation=True,
                 split_pure=False, seed=0):
        self.n_classes = n_classes
        self.n_features = n_features
        self.step = step
        self.dirichlet = dirichlet
        self.use_aggregation = use_aggregation
        self.split_pure = split_pure
        self.rng = np.random.default_rng(seed)
        self.iteration = 0
        self.size = 0
        self._alloc(16)
        self._add_node(-1, 0.0)

    def _alloc(self, cap):
        def grow(old, shape, fill, dtype=float):
            new = np.full(shape, fill, dtype=dtype)
            if old is not None:
                new[: len(old)] = old
            return new

        get = lambda name: getattr(self, name, None)
        c, d = self.n_classes, self.n_features
        self.parent = grow(get("parent"), cap, -1, np.int64)
        self.left = grow(get("left"), cap, -1, np.int64)
        self.right = grow(get("right"), cap, -1, np.int64)
        self.feature = grow(get("feature"), cap, -1, np.int64)
        self.threshold = grow(get("threshold"), cap, 0.0)
        self.time = grow(get("time"), cap, 0.0)
        self.is_leaf = grow(get("is_leaf"), cap, True, bool)
        self.n_samples = grow(get("n_samples"), cap, 0.0)
        self.counts = grow(get("counts"), (cap, c), 0.0)
        self.weight = grow(get("weight"), cap, 0.0)
        self.weight_tree = grow(get("weight_tree"), cap, 0.0)
        self.lower = grow(get("lower"), (cap, d), 0.0)
        self.upper = grow(get("upper"), (cap, d), 0.0)
        self.capacity = cap

    def _add_node(self, parent: int, time: float) -> int:
        if self.size == self.capacity:
            self._alloc(2 * self.capacity)
        i = self.size
        self.size += 1
        self.parent[i] = parent
        self.time[i] = time
        return i

    def _copy(self, src: int, dst: int):
        for name in ("left", "right", "feature", "threshold", "is_leaf", "n_samples", "weight", "weight_tree"):
            arr = getattr(self, name)
            arr[dst] = arr[src]
        self.counts[dst] = self.counts[src]
        self.lower[dst] = self.lower[src]
        self.upper[dst] = self.upper[src]

    def node_predict(self, node: int) -> np.ndarray:
        a = self.dirichlet
        return (self.counts[node] + a) / (self.n_samples[node] + a * self.n_classes)

    def _update(self, node: int, x, y: int, update_weight: bool):
        if self.n_samples[node] == 0:
            self.lower[node] = x
            self.upper[node] = x
        else:
            np.minimum(self.lower[node], x, out=self.lower[node])
            np.maximum(self.upper[node], x, out=self.upper[node])
        if update_weight and self.use_aggregation:
            # sequential log-loss of the node's prediction before it sees (x, y)
            self.weight[node] -= self.step * -math.log(self.node_predict(node)[y])
        self.n_samples[node] += 1
        self.counts[node, y] += 1

    def _split_time(self, node: int, x, y: int):
        if not self.split_pure and self.counts[node, y] == self.n_samples[node]:
            return 0.0, None
        ext = np.maximum(self.lower[node] - x, 0.0) + np.maximum(x - self.upper[node], 0.0)
        total = float(ext.sum())
        if total <= 0:
            return 0.0, None
        split_time = self.time[node] + self.rng.exponential(1.0 / total)
        if self.is_leaf[node] or split_time < self.time[self.left[node]]:
            return split_time, ext
        return 0.0, None

    def _split(self, node: int, split_time: float, x, ext):
        cum = np.cumsum(ext)
        f = int(np.searchsorted(cum, self.rng.uniform(0.0, cum[-1]), side="right"))
        f = min(f, len(ext) - 1)
        right_ext = x[f] > self.upper[node, f]
        if right_ext:
            threshold = self.rng.uniform(self.upper[node, f], x[f])
        else:
            threshold = self.rng.uniform(x[f], self.lower[node, f])
        old = self._add_node(node, split_time)
        new = self._add_node(node, split_time)
        self._copy(node, old)
        self.time[old] = split_time
        if not self.is_leaf[old]:
            self.parent[self.left[old]] = old
            self.parent[self.right[old]] = old
        self.feature[node] = f
        self.threshold[node] = threshold
        self.is_leaf[node] = False
        # the point lands in the new leaf, on the side it extended
        if right_ext:
            self.left[node], self.right[node] = old, new
        else:
            self.left[node], self.right[node] = new, old
        return new

    def child(self, node: int, x) -> int:
        return self.left[node] if x[self.feature[node]] <= self.threshold[node] else self.right[node]

    def learn_one(self, x, y: int):
        if self.iteration == 0:
            self._update(0, x, y, False)
            self.iteration += 1
            return
        node = 0
        while True:
            split_time, ext = self._split_time(node, x, y)
            if split_time > 0:
                leaf = self._split(node, split_time, x, ext)
                self._update(node, x, y, True)
                self._update(leaf, x, y, False)
                break
            self._update(node, x, y, True)
            if self.is_leaf[node]:
                leaf = node
                break
            node = self.child(node, x)
        node = leaf
        while True:
            if self.is_leaf[node]:
                self.weight_tree[node] = self.weight[node]
            else:
                self.weight_tree[node] = log_sum_2_exp(
                    self.weight[node], self.weight_tree[self.left[node]] + self.weight_tree[self.right[node]])
            if node == 0:
                break
            node = self.parent[node]
        self.iteration += 1

    def leaf(self, x) -> int:
        node = 0
        while not self.is_leaf[node]:
            node = self.child(node, x)
        return node

    def predict_proba_one(self, x) -> np.ndarray:
        node = self.leaf(x)
        scores = self.node_predict(node)
        if not self.use_aggregation:
            return scores
        while node != 0:
            node = self.parent[node]
            w = math.exp(self.weight[node] - self.weight_tree[node])
            scores = 0.5 * w * self.node_predict(node) + (1.0 - 0.5 * w) * scores
        return scores

    @property
    def n_nodes(self) -> int:
        return self.size


class AggregatedMondrianForest:
    """Average of independently seeded aggregated Mondrian trees."""

    kind = "AMF"

    def __init__(self, classes, n_estimators=N_TREES, step=STEP, dirichlet=DIRICHLET, use_aggregation=True,
                 split_pure=False, seed=0):
        if n_estimators < 1:
            raise InvalidSpec("n_estimators must be >= 1")
        if dirichlet <= 0:
            raise InvalidSpec("dirichlet must be positive")
        self.classes = [str(c) for c in classes]
        self.params = dict(step=step, dirichlet=dirichlet, use_aggregation=use_aggregation, split_pure=split_pure)
        self.n_estimators = n_estimators
        self.seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, n_estimators)
        self.trees: list[MondrianTree] = []
        self.n_features = None

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.n_features is None:
            self.n_features = len(x)
            self.trees = [MondrianTree(len(self.classes), len(x), seed=int(s), **self.params) for s in self.seeds]
        elif len(x) != self.n_features:
            raise DimensionMismatch(f"learner expects {self.n_features} features, got {len(x)}")
        return x

    def learn_one(self, x, y: int, w: float = 1.0):
        x = self._check(x)
        for tree in self.trees:
            tree.learn_one(x, y)

    def predict_proba_one(self, x) -> np.ndarray:
        if self.n_features is None:
            return np.full(len(self.classes), 1.0 / len(self.classes))
        x = self._check(x)
        return np.mean([t.predict_proba_one(x) for t in self.trees], axis=0)
