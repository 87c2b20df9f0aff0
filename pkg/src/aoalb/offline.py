"""Offline classifiers, the two-stage region/track pipeline and tuning.

Every learner maps a feature matrix to probabilities over an ordered class
space; labels are always reported through that class space, and argmax ties
go to the lowest class index.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .artifact import ModelArtifact, register
from .dataset import Dataset, sort_labels
from .errors import (
    DegenerateDataset,
    DimensionMismatch,
    FoldTooSmall,
    InvalidSpec,
    MissingRegion,
    TooFewSamples,
    UnknownClass,
)
from .neural import softmax
from .trees import grow_tree, pack_trees, unpack_trees

KINDS = ("LR", "KNN", "DT", "RF", "GBM")
REGIONS = ("LoS", "NLoS")

DEFAULTS = {
    "LR": {"C": 1.0, "max_iter": 1000, "tol": 1e-8},
    "KNN": {"k": 5, "weights": "uniform"},
    "DT": {"max_depth": None, "min_samples_split": 2, "min_samples_leaf": 1, "max_features": "all"},
    "RF": {"n_estimators": 100, "max_depth": None, "max_features": "sqrt", "min_samples_split": 2,
           "min_samples_leaf": 1, "bootstrap": True},
    "GBM": {"n_estimators": 100, "learning_rate": 0.1, "max_depth": 3, "subsample": 1.0,
            "max_features": "all", "min_samples_split": 2, "min_samples_leaf": 1},
}


def resolve_config(kind: str, config: dict | None) -> dict:
    if kind not in DEFAULTS:
        raise InvalidSpec(f"unknown classifier kind {kind!r}")
    config = dict(config or {})
    unknown = set(config) - set(DEFAULTS[kind])
    if unknown:
        raise InvalidSpec(f"unknown {kind} options: {sorted(unknown)}")
    return {**DEFAULTS[kind], **config}


def encode_labels(labels, classes: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[str(l)] for l in labels], dtype=np.int64)
    except KeyError as exc:
        raise UnknownClass(f"label {exc.args[0]!r} is not in the class space") from None


class Classifier:
    """Shared prediction plumbing; subclasses implement ``_proba``."""

    kind = ""

    def __init__(self, classes: Sequence[str], n_features: int):
        self.classes = [str(c) for c in classes]
        self.n_features = int(n_features)

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_features:
            raise DimensionMismatch(f"model expects {self.n_features} features, got {x.shape[1]}")
        return self._proba(x)

    def predict_index(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.array(self.classes, dtype=object)[self.predict_index(x)]

    def _base_meta(self) -> dict:
        return {"classes": self.classes, "n_features": self.n_features}


@register("LR")
class LogisticRegression(Classifier):
    """Multinomial softmax regression on standardised features."""

    kind = "LR"

    def __init__(self, classes, n_features, weights=None, bias=None, mean=None, scale=None):
        super().__init__(classes, n_features)
        c = len(self.classes)
        self.weights = np.zeros((n_features, c)) if weights is None else weights
        self.bias = np.zeros(c) if bias is None else bias
        self.mean = np.zeros(n_features) if mean is None else mean
        self.scale = np.ones(n_features) if scale is None else scale
        self.iterations = 0

    def fit(self, x, y, C=1.0, max_iter=1000, tol=1e-8):
        if C <= 0:
            raise InvalidSpec("C must be positive")
        n = len(x)
        self.mean = x.mean(axis=0)
        sd = x.std(axis=0)
        self.scale = np.where(sd > 0, sd, 1.0)
        xs = (x - self.mean) / self.scale
        onehot = np.eye(len(self.classes))[y]
        lam = 1.0 / (C * n)

        def objective(w, b):
            z = xs @ w + b
            z = z - z.max(axis=1, keepdims=True)
            logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
            return -np.sum(onehot * logp) / n + 0.5 * lam * np.sum(w * w), np.exp(logp)

        w, b = self.weights.copy(), self.bias.copy()
        f, p = objective(w, b)
        step = 1.0
        for it in range(max_iter):
            g = (p - onehot) / n
            gw = xs.T @ g + lam * w
            gb = g.sum(axis=0)
            gnorm2 = float(np.sum(gw * gw) + np.sum(gb * gb))
            if math.sqrt(gnorm2) <= tol:
                break
            step = min(step * 2.0, 1e6)
            while True:
                w_new, b_new = w - step * gw, b - step * gb
                f_new, p_new = objective(w_new, b_new)
                # Armijo sufficient decrease
                if f_new <= f - 1e-4 * step * gnorm2 or step < 1e-16:
                    break
                step *= 0.5
            if f_new > f:
                break
            w, b, f, p = w_new, b_new, f_new, p_new
            self.iterations = it + 1
        self.weights, self.bias = w, b
        return self

    def _proba(self, x):
        return softmax(((x - self.mean) / self.scale) @ self.weights + self.bias)

    def to_payload(self):
        arrays = {"weights": self.weights, "bias": self.bias, "mean": self.mean, "scale": self.scale}
        return self._base_meta(), arrays, None

    @classmethod
    def from_payload(cls, meta, arrays, blob=None):
        return cls(meta["classes"], meta["n_features"], arrays["weights"], arrays["bias"],
                   arrays["mean"], arrays["scale"])


@register("KNN")
class KNearest(Classifier):
    """Euclidean k-nearest neighbours with uniform or inverse-distance votes."""

    kind = "KNN"

    def __init__(self, classes, n_features, k=5, weights="uniform", x=None, y=None):
        super().__init__(classes, n_features)
        if weights not in ("uniform", "distance"):
            raise InvalidSpec(f"weights must be uniform or distance, got {weights!r}")
        if k < 1:
            raise InvalidSpec("k must be at least 1")
        self.k = int(k)
        self.weights = weights
        self.x = x
        self.y = y

    def fit(self, x, y):
        self.x, self.y = np.array(x, dtype=float), np.array(y, dtype=np.int64)
        return self

    def _proba(self, x):
        k = min(self.k, len(self.x))
        d2 = (np.sum(x * x, axis=1)[:, None] + np.sum(self.x * self.x, axis=1)[None, :]
              - 2.0 * x @ self.x.T)
        d = np.sqrt(np.maximum(d2, 0.0))
        # stable sort: equal distances resolved by training order
        nn = np.argsort(d, axis=1, kind="stable")[:, :k]
        nd = np.take_along_axis(d, nn, axis=1)
        if self.weights == "uniform":
            w = np.ones_like(nd)
        else:
            exact = nd == 0.0
            with np.errstate(divide="ignore"):
                w = np.where(exact.any(axis=1, keepdims=True), exact.astype(float), 1.0 / nd)
        out = np.zeros((len(x), len(self.classes)))
        np.add.at(out, (np.arange(len(x))[:, None], self.y[nn]), w)
        return out / out.sum(axis=1, keepdims=True)

    def to_payload(self):
        meta = {**self._base_meta(), "k": self.k, "weights": self.weights}
        return meta, {"x": self.x, "y": self.y}, None

    @classmethod
    def from_payload(cls, meta, arrays, blob=None):
        return cls(meta["classes"], meta["n_features"], meta["k"], meta["weights"], arrays["x"], arrays["y"])


class _TreeEnsemble(Classifier):
    def __init__(self, classes, n_features, trees=None):
        super().__init__(classes, n_features)
        self.trees = trees or []

    def _proba(self, x):
        out = np.zeros((len(x), len(self.classes)))
        for tree in self.trees:
            out += tree.predict(x)
        return out / len(self.trees)

    def to_payload(self):
        return self._base_meta(), pack_trees(self.trees), None

    @classmethod
    def from_payload(cls, meta, arrays, blob=None):
        return cls(meta["classes"], meta["n_features"], unpack_trees(arrays))


@register("DT")
class DecisionTree(_TreeEnsemble):
    """A single CART tree with Gini splits."""

    kind = "DT"

    def fit(self, x, y, rng, max_depth=None, min_samples_split=2, min_samples_leaf=1, max_features="all"):
        self.trees = [grow_tree(x, y, n_outputs=len(self.classes), max_depth=max_depth,
                                min_samples_split=min_samples_split, min_samples_leaf=min_samples_leaf,
                                max_features=max_features, rng=rng)]
        return self


@register("RF")
class RandomForest(_TreeEnsemble):
    """Bagged CART trees with per-node feature subsampling."""

    kind = "RF"

    def fit(self, x, y, rng, n_estimators=100, max_depth=None, max_features="sqrt", min_samples_split=2,
            min_samples_leaf=1, bootstrap=True):
        n = len(x)
        self.trees = []
        for _ in range(int(n_estimators)):
            rows = rng.integers(0, n, n) if bootstrap else np.arange(n)
            self.trees.append(grow_tree(x[rows], y[rows], n_outputs=len(self.classes), max_depth=max_depth,
                                        min_samples_split=min_samples_split,
                                        min_samples_leaf=min_samples_leaf, max_features=max_features,
                                        rng=rng))
        return self


@register("GBM")
class GradientBoosting(Classifier):
    """Multinomial-deviance boosting with one regression tree per class per round."""

    kind = "GBM"

    def __init__(self, classes, n_features, init=None, learning_rate=0.1, trees=None):
        super().__init__(classes, n_features)
        self.init = np.zeros(len(self.classes)) if init is None else init
        self.learning_rate = float(learning_rate)
        self.trees = trees or []

    def fit(self, x, y, rng, n_estimators=100, learning_rate=0.1, max_depth=3, subsample=1.0,
            max_features="all", min_samples_split=2, min_samples_leaf=1):
        if not 0 < subsample <= 1:
            raise InvalidSpec("subsample must lie in (0, 1]")
        n, c = len(x), len(self.classes)
        self.learning_rate = float(learning_rate)
        prior = np.bincount(y, minlength=c) / n
        self.init = np.log(np.maximum(prior, 1e-12))
        onehot = np.eye(c)[y]
        raw = np.tile(self.init, (n, 1))
        self.trees = []
        size = max(1, int(round(subsample * n)))
        for _ in range(int(n_estimators)):
            p = softmax(raw)
            rows = np.sort(rng.choice(n, size=size, replace=False)) if size < n else np.arange(n)
            for k in range(c):
                residual = onehot[:, k] - p[:, k]
                tree = grow_tree(x[rows], residual[rows], regression=True, max_depth=max_depth,
                                 min_samples_split=min_samples_split, min_samples_leaf=min_samples_leaf,
                                 max_features=max_features, rng=rng)
                # one Newton step per leaf on the multinomial deviance
                leaf = tree.apply(x[rows])
                r = residual[rows]
                num = np.bincount(leaf, weights=r, minlength=tree.node_count)
                den = np.bincount(leaf, weights=np.abs(r) * (1.0 - np.abs(r)), minlength=tree.node_count)
                with np.errstate(divide="ignore", invalid="ignore"):
                    gamma = np.where(np.abs(den) > 1e-150, (c - 1) / c * num / den, 0.0)
                tree.value = gamma[:, None]
                raw[:, k] += self.learning_rate * tree.predict(x)[:, 0]
                self.trees.append(tree)
        return self

    def _raw(self, x):
        c = len(self.classes)
        raw = np.tile(self.init, (len(x), 1))
        for i, tree in enumerate(self.trees):
            raw[:, i % c] += self.learning_rate * tree.predict(x)[:, 0]
        return raw

    def _proba(self, x):
        return softmax(self._raw(x))

    def to_payload(self):
        arrays = pack_trees(self.trees) if self.trees else {}
        arrays["init"] = self.init
        return {**self._base_meta(), "learning_rate": self.learning_rate}, arrays, None

    @classmethod
    def from_payload(cls, meta, arrays, blob=None):
        trees = unpack_trees(arrays) if "offsets" in arrays else []
        return cls(meta["classes"], meta["n_features"], arrays["init"], meta["learning_rate"], trees)


def _check_training_set(x, y, classes):
    if len(x) == 0:
        raise DegenerateDataset("no training samples")
    counts = np.bincount(y, minlength=len(classes))
    if len(classes) < 2 or np.any(counts == 0):
        missing = [c for c, n in zip(classes, counts) if n == 0]
        raise DegenerateDataset(f"need >= 2 classes with >= 1 sample each; empty: {missing}")


def fit_model(kind: str, x: np.ndarray, y: np.ndarray, classes: Sequence[str], config: dict | None = None,
              seed: int = 0) -> Classifier:
    """Train ``kind`` on integer labels ``y`` indexing ``classes``."""
    config = resolve_config(kind, config)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    _check_training_set(x, y, classes)
    rng = np.random.default_rng(seed)
    d = x.shape[1]
    if kind == "LR":
        return LogisticRegression(classes, d).fit(x, y, **config)
    if kind == "KNN":
        return KNearest(classes, d, **config).fit(x, y)
    if kind == "DT":
        return DecisionTree(classes, d).fit(x, y, rng, **config)
    if kind == "RF":
        return RandomForest(classes, d).fit(x, y, rng, **config)
    return GradientBoosting(classes, d).fit(x, y, rng, **config)


def class_space(data: Dataset, label: str = "track") -> list[str]:
    return sort_labels(map(str, data.labels(label)))


def train_classifier(kind: str, data: Dataset, config: dict | None = None, seed: int = 0,
                     label: str = "track", classes: Sequence[str] | None = None) -> ModelArtifact:
    """Train on ``data``'s region or track labels and wrap the result."""
    classes = list(classes) if classes is not None else class_space(data, label)
    y = encode_labels(data.labels(label), classes)
    model = fit_model(kind, data.features, y, classes, config, seed)
    return ModelArtifact(kind, model, config=resolve_config(kind, config), seed=seed,
                         fingerprint=data.fingerprint())


def predict_proba(model, sample) -> np.ndarray:
    """Probability vector(s) for an AoaSample, a feature vector or a matrix."""
    features = getattr(sample, "features", sample)
    if isinstance(model, ModelArtifact):
        model = model.model
    out = model.predict_proba(features)
    return out[0] if np.ndim(features) == 1 else out


# --- splitting and cross-validation -------------------------------------------------


def stratified_folds(y: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold id per sample; per-class and total fold sizes differ by at most 1."""
    y = np.asarray(y)
    if folds < 2:
        raise InvalidSpec("need at least 2 folds")
    rng = np.random.default_rng(seed)
    order = []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        if len(members) < folds:
            raise FoldTooSmall(f"class {c!r} has {len(members)} samples, fewer than {folds} folds")
        order.append(rng.permutation(members))
    fold = np.empty(len(y), dtype=np.int64)
    fold[np.concatenate(order)] = np.arange(len(y)) % folds
    return fold


def stratified_split(y: np.ndarray, train_fraction: float = 0.8, seed: int = 0):
    """Per-class shuffled split; every class keeps >= 1 train and, if it can, >= 1 test sample."""
    if not 0 < train_fraction <= 1:
        raise InvalidSpec("train_fraction must lie in (0, 1]")
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(y):
        members = rng.permutation(np.flatnonzero(y == c))
        n_train = max(1, int(round(train_fraction * len(members))))
        if n_train == len(members) and len(members) > 1 and train_fraction < 1:
            n_train -= 1
        train.append(members[:n_train])
        test.append(members[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def cross_val_scores(kind: str, config: dict, x: np.ndarray, y: np.ndarray, classes: Sequence[str],
                     folds: int = 5, seed: int = 0) -> list[float]:
    fold = stratified_folds(y, folds, seed)
    scores = []
    for f in range(folds):
        tr, te = fold != f, fold == f
        model = fit_model(kind, x[tr], y[tr], classes, config, seed)
        scores.append(float(np.mean(model.predict_index(x[te]) == y[te])))
    return scores


# --- hyperparameter search ----------------------------------------------------------


@dataclass(frozen=True)
class IntRange:
    low: int
    high: int

    def sample(self, rng):
        return int(rng.integers(self.low, self.high + 1))

    def contains(self, v):
        return isinstance(v, int) and self.low <= v <= self.high


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def sample(self, rng):
        return float(rng.uniform(self.low, self.high)) if self.high > self.low else float(self.low)

    def contains(self, v):
        return self.low <= v <= self.high


@dataclass(frozen=True)
class LogUniform:
    low: float
    high: float

    def sample(self, rng):
        return float(math.exp(rng.uniform(math.log(self.low), math.log(self.high))))

    def contains(self, v):
        # exp(log(x)) can land one ulp outside the bounds
        return self.low * (1 - 1e-12) <= v <= self.high * (1 + 1e-12)


@dataclass(frozen=True)
class Choice:
    options: tuple

    def sample(self, rng):
        return self.options[int(rng.integers(len(self.options)))]

    def contains(self, v):
        return v in self.options


DEFAULT_SPACES = {
    "LR": {"C": LogUniform(1e-5, 1e2)},
    "KNN": {"k": IntRange(1, 30), "weights": Choice(("uniform", "distance"))},
    "DT": {
        "max_depth": IntRange(3, 30),
        "min_samples_split": IntRange(2, 10),
        "min_samples_leaf": IntRange(1, 10),
    },
    "RF": {
        "n_estimators": IntRange(50, 300),
        "max_depth": IntRange(3, 30),
        "max_features": Choice(("sqrt", "log2", "all")),
        "min_samples_split": IntRange(2, 10),
        "min_samples_leaf": IntRange(1, 10),
    },
    "GBM": {
        "n_estimators": IntRange(50, 300),
        "learning_rate": LogUniform(1e-3, 0.3),
        "max_depth": IntRange(3, 10),
        "subsample": Uniform(0.5, 1.0),
        "max_features": Choice(("sqrt", "log2", "all")),
    },
}


def sample_config(space: dict, rng) -> dict:
    return {name: dist.sample(rng) for name, dist in space.items()}


@dataclass
class SearchResult:
    best_config: dict
    best_score: float
    trials: list = field(default_factory=list)


def random_search(kind: str, space: dict | None, data: Dataset, trials: int = 100, folds: int = 5,
                  seed: int = 0, label: str = "track") -> SearchResult:
    """Random search maximising mean stratified k-fold accuracy; first best trial wins ties."""
    if trials < 1:
        raise InvalidSpec("trials must be >= 1")
    if space is None:
        if kind not in DEFAULT_SPACES:
            raise InvalidSpec(f"no default search space for {kind!r}; pass one explicitly")
        space = DEFAULT_SPACES[kind]
    classes = class_space(data, label)
    y = encode_labels(data.labels(label), classes)
    x = data.features
    _check_training_set(x, y, classes)
    rng = np.random.default_rng(seed)
    log = []
    best = None
    for t in range(trials):
        config = sample_config(space, rng)
        scores = cross_val_scores(kind, config, x, y, classes, folds, seed)
        mean = float(np.mean(scores))
        log.append({"trial": t, "config": config, "cv_score": mean, "fold_scores": scores})
        if best is None or mean > best[1]:
            best = (config, mean)
    return SearchResult(best[0], best[1], log)


# --- hierarchical pipeline ----------------------------------------------------------


@register("HIER")
class HierarchicalModel:
    """Stage 1 picks the region; that region's stage-2 model picks the track."""

    kind = "HIER"

    def __init__(self, stage1: Classifier, stage2: dict[str, Classifier]):
        if set(stage1.classes) != set(REGIONS):
            raise InvalidSpec("stage 1 must classify LoS vs NLoS")
        if set(stage2["LoS"].classes) & set(stage2["NLoS"].classes):
            raise InvalidSpec("stage-2 class spaces must be disjoint")
        self.stage1 = stage1
        self.stage2 = stage2
        self.classes = stage2["LoS"].classes + stage2["NLoS"].classes

    def predict(self, x, route=None, trace: list | None = None) -> np.ndarray:
        """Track labels; ``route`` forces every sample to one region's stage 2."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        regions = self.stage1.predict(x) if route is None else np.full(len(x), route, dtype=object)
        if trace is not None:
            trace.append(("stage1", None if route is not None else list(regions)))
        out = np.empty(len(x), dtype=object)
        for region in REGIONS:
            rows = np.flatnonzero(regions == region)
            if len(rows):
                out[rows] = self.stage2[region].predict(x[rows])
                if trace is not None:
                    trace.append(("stage2", region, rows.tolist()))
        return out

    def predict_region(self, x) -> np.ndarray:
        return self.stage1.predict(np.atleast_2d(np.asarray(x, dtype=float)))

    def to_payload(self):
        meta, arrays = {}, {}
        for name, model in (("stage1", self.stage1), ("LoS", self.stage2["LoS"]), ("NLoS", self.stage2["NLoS"])):
            _nest(name, model, meta, arrays)
        return meta, arrays, None

    @classmethod
    def from_payload(cls, meta, arrays, blob=None):
        return cls(_unnest("stage1", meta, arrays),
                   {"LoS": _unnest("LoS", meta, arrays), "NLoS": _unnest("NLoS", meta, arrays)})


def _nest(name, model, meta, arrays):
    m, a, _ = model.to_payload()
    meta[name] = {"kind": model.kind, "meta": m}
    for k, v in a.items():
        arrays[f"{name}.{k}"] = v


def _unnest(name, meta, arrays):
    from .artifact import _REGISTRY

    prefix = name + "."
    sub = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
    return _REGISTRY[meta[name]["kind"]].from_payload(meta[name]["meta"], sub)


def train_hierarchical(los_data: Dataset, nlos_data: Dataset, stage1_kind: str = "RF",
                       stage2_kinds: dict | str = "RF", seed: int = 0,
                       configs: dict | None = None) -> ModelArtifact:
    """Stage 1 on the union's region labels, stage 2 per region on track labels.

    ``configs`` may hold ``stage1``, ``LoS`` and ``NLoS`` entries.
    """
    if len(los_data) == 0 or len(nlos_data) == 0:
        raise MissingRegion("both LoS and NLoS samples are required")
    if not (np.all(los_data.region == "LoS") and np.all(nlos_data.region == "NLoS")):
        raise MissingRegion("region datasets contain samples from the other region")
    configs = configs or {}
    if isinstance(stage2_kinds, str):
        stage2_kinds = {"LoS": stage2_kinds, "NLoS": stage2_kinds}
    union = Dataset.concat([los_data, nlos_data])
    stage1 = fit_model(stage1_kind, union.features, encode_labels(union.region, REGIONS), list(REGIONS),
                       configs.get("stage1"), seed)
    stage2 = {}
    for region, data in (("LoS", los_data), ("NLoS", nlos_data)):
        classes = class_space(data)
        stage2[region] = fit_model(stage2_kinds[region], data.features, encode_labels(data.track_id, classes),
                                   classes, configs.get(region), seed)
    model = HierarchicalModel(stage1, stage2)
    config = {"stage1_kind": stage1_kind, "stage2_kinds": stage2_kinds, "configs": configs}
    return ModelArtifact("HIER", model, config=config, seed=seed, fingerprint=union.fingerprint())


# --- stacking -----------------------------------------------------------------------


@register("STACK")
class Stacking(Classifier):
    """Base models' probabilities feed a logistic-regression meta-learner."""

    kind = "STACK"

    def __init__(self, classes, n_features, bases: list[Classifier], meta_model: LogisticRegression):
        super().__init__(classes, n_features)
        self.bases = bases
        self.meta_model = meta_model

    def meta_features(self, x):
        return np.hstack([b.predict_proba(x) for b in self.bases])

    def _proba(self, x):
        return self.meta_model.predict_proba(self.meta_features(x))

    def to_payload(self):
        meta, arrays = self._base_meta(), {}
        meta["bases"] = len(self.bases)
        for i, b in enumerate(self.bases):
            _nest(f"base{i}", b, meta, arrays)
        _nest("meta_model", self.meta_model, meta, arrays)
        return meta, arrays, None

    @classmethod
    def from_payload(cls, meta, arrays, blob=None):
        bases = [_unnest(f"base{i}", meta, arrays) for i in range(meta["bases"])]
        return cls(meta["classes"], meta["n_features"], bases, _unnest("meta_model", meta, arrays))


def stacking_train(base_kinds: Sequence[str], data: Dataset, folds: int = 5, seed: int = 0,
                   configs: Sequence[dict | None] | None = None, label: str = "track",
                   meta_config: dict | None = None) -> ModelArtifact:
    """Out-of-fold base probabilities train the meta LR; bases are then refit on everything."""
    base_kinds = list(base_kinds)
    if not base_kinds:
        raise InvalidSpec("stacking needs at least one base model")
    configs = list(configs) if configs is not None else [None] * len(base_kinds)
    classes = class_space(data, label)
    y = encode_labels(data.labels(label), classes)
    x = data.features
    _check_training_set(x, y, classes)
    fold = stratified_folds(y, folds, seed)
    c = len(classes)
    oof = np.zeros((len(x), c * len(base_kinds)))
    for j, (kind, cfg) in enumerate(zip(base_kinds, configs)):
        for f in range(folds):
            tr, te = fold != f, fold == f
            if len(np.unique(y[tr])) < c:
                raise FoldTooSmall("a training fold lost a class")
            oof[te, j * c:(j + 1) * c] = fit_model(kind, x[tr], y[tr], classes, cfg, seed).predict_proba(x[te])
    meta_model = fit_model("LR", oof, y, classes, meta_config, seed)
    bases = [fit_model(k, x, y, classes, cfg, seed) for k, cfg in zip(base_kinds, configs)]
    model = Stacking(classes, x.shape[1], bases, meta_model)
    config = {"base_kinds": base_kinds, "configs": configs, "folds": folds, "meta_config": meta_config}
    return ModelArtifact("STACK", model, config=config, seed=seed, fingerprint=data.fingerprint())


# --- evaluation ---------------------------------------------------------------------


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def macro_f1(cm: np.ndarray) -> float:
    """Mean F1 over classes that occur in the truth or the predictions."""
    tp = np.diag(cm).astype(float)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    seen = (support + predicted) > 0
    f1 = np.where(seen, 2 * tp / np.maximum(support + predicted, 1), 0.0)
    return float(f1[seen].mean()) if np.any(seen) else 0.0


def evaluate(model, data: Dataset, label: str = "track", train_seconds: float = 0.0) -> dict:
    """Accuracy, macro F1 and confusion matrix over the model's class space."""
    if isinstance(model, ModelArtifact):
        model = model.model
    classes = model.classes
    y = encode_labels(data.labels(label), classes)
    start = time.perf_counter()
    pred = encode_labels(model.predict(data.features), classes)
    elapsed = time.perf_counter() - start
    cm = confusion_matrix(y, pred, len(classes))
    return {
        "accuracy": float(np.mean(pred == y)) if len(y) else 0.0,
        "macro_f1": macro_f1(cm),
        "confusion_matrix": cm.tolist(),
        "classes": list(classes),
        "train_seconds": float(train_seconds),
        "infer_ms_mean": 1000.0 * elapsed / max(len(y), 1),
    }


# --- retraining experiment ----------------------------------------------------------


@dataclass
class RetrainingCurve:
    strategy: str
    train_sizes: list
    mean: list
    std: list
    accuracies: np.ndarray  # (trials, batches)


def retraining_experiment(data: Dataset, kind: str = "RF", strategy: str = "cumulative", batches: int = 10,
                          trials: int = 10, seed: int = 0, config: dict | None = None,
                          label: str = "track", holdout_fraction: float = 0.2) -> RetrainingCurve:
    """Accuracy on a fixed holdout after retraining at each batch.

    ``buffer`` trains on batch b alone, ``cumulative`` on batches 1..b.  Each
    trial reshuffles which samples land in which batch; the holdout stays put.
    """
    if strategy not in ("buffer", "cumulative"):
        raise InvalidSpec(f"strategy must be buffer or cumulative, got {strategy!r}")
    classes = class_space(data, label)
    y = encode_labels(data.labels(label), classes)
    pool, holdout = stratified_split(y, 1.0 - holdout_fraction, seed)
    size = len(pool) // batches
    if batches < 1 or size < 1:
        raise TooFewSamples(f"{len(pool)} training samples cannot fill {batches} batches")
    x = data.features
    acc = np.zeros((trials, batches))
    for t in range(trials):
        order = np.random.default_rng([seed, t]).permutation(pool)[: size * batches]
        for b in range(batches):
            rows = order[b * size:(b + 1) * size] if strategy == "buffer" else order[:(b + 1) * size]
            present = np.unique(y[rows])
            if len(present) < 2:
                pred = np.full(len(holdout), present[0])
            else:
                sub = [classes[i] for i in present]
                remap = np.searchsorted(present, y[rows])
                model = fit_model(kind, x[rows], remap, sub, config, seed + t)
                pred = present[model.predict_index(x[holdout])]
            acc[t, b] = np.mean(pred == y[holdout])
    sizes = [size if strategy == "buffer" else (b + 1) * size for b in range(batches)]
    return RetrainingCurve(strategy, sizes, acc.mean(axis=0).tolist(), acc.std(axis=0).tolist(), acc)
