"""CART trees grown with vectorised split search.

One builder serves classification (Gini impurity, leaves hold class
distributions) and regression (squared error, leaves hold means).  A node is
split only when the best candidate strictly lowers the weighted impurity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidSpec

# gains below this fraction of the parent impurity are treated as zero
GAIN_RTOL = 1e-12


def resolve_max_features(max_features, n_features: int) -> int:
    if max_features in (None, "all"):
        return n_features
    if max_features == "sqrt":
        return max(1, int(math.sqrt(n_features)))
    if max_features == "log2":
        return max(1, int(math.log2(n_features)))
    if isinstance(max_features, (int, np.integer)) and 1 <= max_features <= n_features:
        return int(max_features)
    raise InvalidSpec(f"max_features must be sqrt, log2, all or 1..{n_features}, got {max_features!r}")


@dataclass
class Tree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``x``."""
        node = np.zeros(len(x), dtype=np.int64)
        rows = np.arange(len(x))
        active = self.feature[node] >= 0
        while np.any(active):
            r = rows[active]
            n = node[r]
            go_left = x[r, self.feature[n]] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])
            active[r] = self.feature[node[r]] >= 0
        return node

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.apply(x)]


def _impurity_terms(cum, total, counts_left, counts_right, regression):
    """Weighted impurity ``n_l * I_l + n_r * I_r`` for every split position."""
    if regression:
        s_l, q_l = cum[..., 0], cum[..., 1]
        s_r, q_r = total[0] - s_l, total[1] - q_l
        return (q_l - s_l * s_l / counts_left) + (q_r - s_r * s_r / counts_right)
    right = total - cum
    return (counts_left - np.sum(cum * cum, axis=-1) / counts_left) + (
        counts_right - np.sum(right * right, axis=-1) / counts_right
    )


def best_split(x, stats, features, min_samples_leaf, regression):
    """Best (feature, threshold, gain) over ``features`` or None.

    ``stats`` is (n, C) one-hot labels for classification or (n, 2) columns
    [y, y^2] for regression.  Ties go to the lowest feature index, then the
    lowest threshold.
    """
    n = len(x)
    total = stats.sum(axis=0)
    if regression:
        parent = total[1] - total[0] ** 2 / n
    else:
        parent = n - np.sum(total * total) / n
    if parent <= 0:
        return None
    cols = x[:, features]
    order = np.argsort(cols, axis=0, kind="stable")
    xs = np.take_along_axis(cols, order, axis=0)
    cum = np.cumsum(stats[order], axis=0)[:-1]
    counts_left = np.arange(1, n, dtype=float)[:, None]
    counts_right = n - counts_left
    child = _impurity_terms(cum, total, counts_left, counts_right, regression)
    gain = parent - child
    valid = (xs[1:] > xs[:-1]) & (counts_left >= min_samples_leaf) & (counts_right >= min_samples_leaf)
    gain = np.where(valid, gain, -np.inf)
    flat = np.argmax(gain.T)
    j, i = divmod(int(flat), n - 1)
    if not gain[i, j] > GAIN_RTOL * parent:
        return None
    lo, hi = xs[i, j], xs[i + 1, j]
    threshold = 0.5 * (lo + hi)
    if threshold >= hi:
        threshold = lo
    return int(features[j]), float(threshold), float(gain[i, j])


def grow_tree(x, target, *, n_outputs=None, regression=False, max_depth=None, min_samples_split=2,
              min_samples_leaf=1, max_features=None, rng=None) -> Tree:
    """Grow one CART tree on all rows of ``x``.

    Classification targets are integer class indices in ``range(n_outputs)``;
    regression targets are floats.  ``max_features`` features are drawn per
    node without replacement.
    """
    n, d = x.shape
    k = resolve_max_features(max_features, d)
    rng = rng if rng is not None else np.random.default_rng(0)
    if regression:
        stats = np.stack([target, target * target], axis=1)
        width = 1
    else:
        stats = np.eye(n_outputs)[target]
        width = n_outputs
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        if regression:
            value.append([float(np.mean(target[idx]))])
        else:
            value.append(stats[idx].sum(axis=0) / len(idx))
        return len(feature) - 1

    root = new_node(np.arange(n))
    stack = [(root, np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if len(idx) < max(min_samples_split, 2 * min_samples_leaf):
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        feats = np.sort(rng.choice(d, size=k, replace=False)) if k < d else np.arange(d)
        found = best_split(x[idx], stats[idx], feats, min_samples_leaf, regression)
        if found is None:
            continue
        f, t, _ = found
        mask = x[idx, f] <= t
        li, ri = idx[mask], idx[~mask]
        feature[node] = f
        threshold[node] = t
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right pushed first so the left subtree is numbered first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=float).reshape(len(feature), width),
    )


def pack_trees(trees: list[Tree]) -> dict[str, np.ndarray]:
    """Concatenate node arrays; ``offsets`` marks where each tree starts."""
    counts = [t.node_count for t in trees]
    return {
        "offsets": np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
        "feature": np.concatenate([t.feature for t in trees]),
        "threshold": np.concatenate([t.threshold for t in trees]),
        "left": np.concatenate([t.left for t in trees]),
        "right": np.concatenate([t.right for t in trees]),
        "value": np.concatenate([t.value for t in trees]),
    }


def unpack_trees(arrays: dict[str, np.ndarray]) -> list[Tree]:
    off = arrays["offsets"]
    return [
        Tree(*(arrays[name][a:b] for name in ("feature", "threshold", "left", "right", "value")))
        for a, b in zip(off[:-1], off[1:])
    ]
