"""Hoeffding trees for classification streams.

Leaves keep per-class Gaussian summaries (weighted Welford mean/variance and
range) for each feature they watch.  Split candidates are ten evenly spaced
thresholds inside the observed range; the class mass on each side comes from
the Gaussian CDF.  A leaf splits when the Gini-gain lead of its best feature
over the runner-up (or over not splitting) beats the Hoeffding bound, or when
the bound has shrunk below the tie threshold.

Leaves predict with adaptive naive Bayes: the Gaussian naive-Bayes posterior
when it has been right more often than the class-count majority at that leaf,
the normalised class counts otherwise.

The adaptive variant keeps an ADWIN monitor of the error of every node.  A rise
in error at a split node starts a background subtree there, which replaces the
node once it is significantly more accurate.
"""
from __future__ import annotations

import math

import numpy as np
from numba import vectorize

from .adwin import Adwin
from .errors import DimensionMismatch, InvalidDelta, InvalidSpec

GRACE_PERIOD = 200
SPLIT_DELTA = 1e-7
TIE_THRESHOLD = 0.05
N_THRESHOLDS = 10
VAR_FLOOR = 1e-9
# adaptive-tree settings
ADWIN_DELTA = 0.002
DRIFT_WINDOW = 300
SWITCH_SIGNIFICANCE = 0.05


def hoeffding_bound(range_r: float, delta: float, n: float) -> float:
    """Deviation that the mean of ``n`` draws with range ``range_r`` exceeds with probability <= delta."""
    if not 0 < delta < 1:
        raise InvalidDelta(f"delta must lie in (0, 1), got {delta}")
    if n < 1:
        raise InvalidSpec(f"need n >= 1, got {n}")
    return math.sqrt(range_r * range_r * math.log(1.0 / delta) / (2.0 * n))


@vectorize(["float64(float64)"], cache=True)
def normal_cdf(z):
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def gini(counts: np.ndarray, axis=-1) -> np.ndarray:
    total = counts.sum(axis=axis, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(total > 0, counts / total, 0.0)
    return 1.0 - np.sum(p * p, axis=axis)


def _normalise(v: np.ndarray) -> np.ndarray:
    s = v.sum()
    return v / s if s > 0 else np.full(len(v), 1.0 / len(v))


def _log_softmax_proba(logits: np.ndarray) -> np.ndarray:
    finite = np.isfinite(logits)
    out = np.zeros(len(logits))
    z = logits[finite] - logits[finite].max()
    e = np.exp(z)
    out[finite] = e / e.sum()
    return out


class Leaf:
    """Learning leaf watching ``features`` (global feature indices)."""

    def __init__(self, counts: np.ndarray, features: np.ndarray, depth: int):
        c, f = len(counts), len(features)
        self.counts = np.array(counts, dtype=float)
        self.features = features
        self.depth = depth
        self.obs = np.zeros(c)
        self.mean = np.zeros((c, f))
        self.m2 = np.zeros((c, f))
        self.lo = np.full((c, f), np.inf)
        self.hi = np.full((c, f), -np.inf)
        self.last_attempt = 0.0
        self.mc_correct = 0.0
        self.nb_correct = 0.0
        self.adwin = None

    @property
    def observed(self) -> float:
        return float(self.obs.sum())

    def update(self, x: np.ndarray, y: int, w: float):
        xf = x[self.features]
        self.counts[y] += w
        n_new = self.obs[y] + w
        delta = xf - self.mean[y]
        self.mean[y] += (w / n_new) * delta
        self.m2[y] += w * delta * (xf - self.mean[y])
        self.obs[y] = n_new
        np.minimum(self.lo[y], xf, out=self.lo[y])
        np.maximum(self.hi[y], xf, out=self.hi[y])

    def variance(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            var = np.where(self.obs[:, None] > 1, self.m2 / np.maximum(self.obs[:, None] - 1, 1e-300), 0.0)
        return np.maximum(var, 0.0)

    def mc_proba(self) -> np.ndarray:
        return _normalise(self.counts)

    def nb_proba(self, x: np.ndarray) -> np.ndarray:
        seen = self.obs > 0
        if not seen.any():
            return self.mc_proba()
        xf = x[self.features]
        var = np.maximum(self.variance(), VAR_FLOOR)
        total = self.counts.sum()
        logits = np.full(len(self.counts), -np.inf)
        prior_ok = seen & (self.counts > 0)
        v, m = var[prior_ok], self.mean[prior_ok]
        logits[prior_ok] = (np.log(self.counts[prior_ok] / total)
                            - 0.5 * np.sum(np.log(2 * np.pi * v) + (xf - m) ** 2 / v, axis=1))
        return _log_softmax_proba(logits)

    def proba(self, x: np.ndarray, nba: bool = True) -> np.ndarray:
        if nba and self.nb_correct >= self.mc_correct and self.observed > 0:
            return self.nb_proba(x)
        return self.mc_proba()

    def track_correctness(self, x: np.ndarray, y: int, w: float):
        if self.observed <= 0:
            return
        if int(np.argmax(self.mc_proba())) == y:
            self.mc_correct += w
        if int(np.argmax(self.nb_proba(x))) == y:
            self.nb_correct += w

    def split_candidates(self):
        """Per watched feature: (gain, threshold, left counts, right counts) of its best threshold."""
        seen = self.obs > 0
        n_c = self.obs[seen]
        mean, std = self.mean[seen], np.sqrt(self.variance()[seen])
        lo, hi = self.lo[seen], self.hi[seen]
        low, high = lo.min(axis=0), hi.max(axis=0)
        frac = np.arange(1, N_THRESHOLDS + 1) / (N_THRESHOLDS + 1)
        thr = low[:, None] + (high - low)[:, None] * frac[None, :]  # (f, k)
        with np.errstate(invalid="ignore", divide="ignore"):
            z = (thr[None] - mean[:, :, None]) / std[:, :, None]
        cdf = np.where(std[:, :, None] > 0, normal_cdf(np.nan_to_num(z)), (thr[None] >= mean[:, :, None]) * 1.0)
        left = n_c[:, None, None] * cdf
        left = np.where(thr[None] < lo[:, :, None], 0.0, left)
        left = np.where(thr[None] >= hi[:, :, None], n_c[:, None, None], left)
        right = n_c[:, None, None] - left
        total = n_c.sum()
        lw, rw = left.sum(axis=0), right.sum(axis=0)
        child = (lw * gini(left, axis=0) + rw * gini(right, axis=0)) / total
        gain = gini(n_c) - child
        gain = np.where(high[:, None] > low[:, None], gain, -np.inf)
        best = np.argmax(gain, axis=1)
        rows = np.arange(len(self.features))
        full_left = np.zeros((len(rows), len(self.obs)))
        full_right = np.zeros_like(full_left)
        full_left[:, seen] = left[:, rows, best].T
        full_right[:, seen] = right[:, rows, best].T
        return gain[rows, best], thr[rows, best], full_left, full_right


class SplitNode:
    def __init__(self, feature: int, threshold: float, children: list, depth: int):
        self.feature = feature
        self.threshold = threshold
        self.children = children
        self.depth = depth
        self.adwin = None
        self.alternate = None

    def branch(self, x: np.ndarray) -> int:
        return 0 if x[self.feature] <= self.threshold else 1


class HoeffdingTree:
    """Incremental decision tree over a fixed class space.

    ``max_features`` (None, "sqrt" or an int) draws a fresh random subset of
    features for every new leaf, as used inside random-forest ensembles.
    """

    kind = "HT"

    def __init__(self, classes, grace_period=GRACE_PERIOD, delta=SPLIT_DELTA, tie_threshold=TIE_THRESHOLD,
                 leaf_prediction="nba", max_features=None, seed=0):
        if leaf_prediction not in ("nba", "mc"):
            raise InvalidSpec(f"leaf_prediction must be nba or mc, got {leaf_prediction!r}")
        if not 0 < delta < 1:
            raise InvalidDelta(f"delta must lie in (0, 1), got {delta}")
        self.classes = [str(c) for c in classes]
        self.grace_period = grace_period
        self.delta = delta
        self.tie_threshold = tie_threshold
        self.nba = leaf_prediction == "nba"
        self.max_features = max_features
        self.rng = np.random.default_rng(seed)
        self.n_features = None
        self.root = None

    # -- structure -------------------------------------------------------------------

    def _leaf_features(self) -> np.ndarray:
        d = self.n_features
        if self.max_features is None:
            return np.arange(d)
        k = max(1, int(math.sqrt(d))) if self.max_features == "sqrt" else min(int(self.max_features), d)
        return np.sort(self.rng.choice(d, size=k, replace=False))

    def _new_leaf(self, counts, depth) -> Leaf:
        return Leaf(counts, self._leaf_features(), depth)

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.n_features is None:
            self.n_features = len(x)
            self.root = self._new_leaf(np.zeros(len(self.classes)), 0)
        elif len(x) != self.n_features:
            raise DimensionMismatch(f"learner expects {self.n_features} features, got {len(x)}")
        return x

    @staticmethod
    def sort(node, x) -> Leaf:
        while isinstance(node, SplitNode):
            node = node.children[node.branch(x)]
        return node

    def iter_nodes(self, node=None):
        node = self.root if node is None else node
        stack = [node] if node is not None else []
        while stack:
            n = stack.pop()
            yield n
            if isinstance(n, SplitNode):
                stack.extend(reversed(n.children))

    @property
    def n_splits(self) -> int:
        return sum(isinstance(n, SplitNode) for n in self.iter_nodes())

    def splits(self) -> list[tuple[int, float]]:
        return [(n.feature, n.threshold) for n in self.iter_nodes() if isinstance(n, SplitNode)]

    # -- learning --------------------------------------------------------------------

    def predict_proba_one(self, x) -> np.ndarray:
        if self.root is None:
            return np.full(len(self.classes), 1.0 / len(self.classes))
        x = self._check(x)
        return self.sort(self.root, x).proba(x, self.nba)

    def learn_one(self, x, y: int, w: float = 1.0):
        x = self._check(x)
        self.root = self._learn_leaf(self.sort(self.root, x), x, y, w, self.root)

    def _learn_leaf(self, leaf: Leaf, x, y, w, root):
        """Update ``leaf``; returns the (possibly replaced) root."""
        if self.nba:
            leaf.track_correctness(x, y, w)
        leaf.update(x, y, w)
        if leaf.observed - leaf.last_attempt >= self.grace_period:
            leaf.last_attempt = leaf.observed
            split = self._attempt_split(leaf)
            if split is not None:
                return self._replace(root, leaf, split)
        return root

    def _attempt_split(self, leaf: Leaf):
        if np.count_nonzero(leaf.counts) < 2:
            return None
        gains, thresholds, left, right = leaf.split_candidates()
        order = np.argsort(-gains, kind="stable")
        best = order[0]
        if not np.isfinite(gains[best]) or gains[best] <= 0:
            return None
        # the runner-up is the next feature or not splitting at all (gain 0)
        second = max(gains[order[1]] if len(order) > 1 else 0.0, 0.0)
        eps = hoeffding_bound(1.0, self.delta, leaf.observed)
        if gains[best] - second > eps or eps < self.tie_threshold:
            children = [self._new_leaf(left[best], leaf.depth + 1), self._new_leaf(right[best], leaf.depth + 1)]
            return SplitNode(int(leaf.features[best]), float(thresholds[best]), children, leaf.depth)
        return None

    @staticmethod
    def _replace(root, old, new):
        if root is old:
            return new
        stack = [root]
        while stack:
            n = stack.pop()
            if isinstance(n, SplitNode):
                for i, child in enumerate(n.children):
                    if child is old:
                        n.children[i] = new
                        return root
                    stack.append(child)
                if n.alternate is not None:
                    stack.append(n.alternate)
        raise RuntimeError("node to replace is not in the tree")


class HoeffdingAdaptiveTree(HoeffdingTree):
    """Hoeffding tree with ADWIN-monitored nodes and background subtrees."""

    kind = "HAT"

    def __init__(self, classes, adwin_delta=ADWIN_DELTA, drift_window=DRIFT_WINDOW,
                 switch_significance=SWITCH_SIGNIFICANCE, **kwargs):
        super().__init__(classes, **kwargs)
        self.adwin_delta = adwin_delta
        self.drift_window = drift_window
        self.switch_significance = switch_significance
        self.swaps = 0

    def _new_leaf(self, counts, depth) -> Leaf:
        leaf = super()._new_leaf(counts, depth)
        leaf.adwin = Adwin(self.adwin_delta)
        return leaf

    def learn_one(self, x, y: int, w: float = 1.0):
        x = self._check(x)
        self.root = self._learn(self.root, x, y, w)

    def _error(self, node, x, y) -> int:
        return int(int(np.argmax(self.sort(node, x).proba(x, self.nba))) != y)

    def _learn(self, node, x, y, w):
        """Learn at ``node``; returns the node that should take its place."""
        if isinstance(node, Leaf):
            node.adwin.update(self._error(node, x, y))
            if self.nba:
                node.track_correctness(x, y, w)
            node.update(x, y, w)
            if node.observed - node.last_attempt >= self.grace_period:
                node.last_attempt = node.observed
                split = self._attempt_split(node)
                if split is not None:
                    split.adwin = Adwin(self.adwin_delta)
                    return split
            return node
        replacement = None
        old = node.adwin.estimation
        drift = node.adwin.update(self._error(node, x, y))
        if drift and node.adwin.estimation > old:
            node.alternate = self._new_leaf(np.zeros(len(self.classes)), node.depth)
        elif node.alternate is not None:
            alt = node.alternate.adwin
            if alt.width > self.drift_window and node.adwin.width > self.drift_window:
                old_rate, alt_rate = node.adwin.estimation, alt.estimation
                inv_n = 1.0 / alt.width + 1.0 / node.adwin.width
                bound = math.sqrt(2.0 * old_rate * (1.0 - old_rate) * math.log(2.0 / self.switch_significance)
                                  * inv_n)
                if bound < old_rate - alt_rate:
                    replacement = node.alternate
                    self.swaps += 1
                elif bound < alt_rate - old_rate:
                    node.alternate = None
        if node.alternate is not None:
            node.alternate = self._learn(node.alternate, x, y, w)
            if replacement is not None:
                replacement = node.alternate
        b = node.branch(x)
        node.children[b] = self._learn(node.children[b], x, y, w)
        if replacement is not None:
            node.alternate = None
            return replacement
        return node
