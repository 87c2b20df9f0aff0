"""Incremental learners and confidence-gated prequential evaluation.

Every learner works on a class space fixed at construction and exposes
``learn_one(x, y_index, w)`` and ``predict_proba_one(x)``.  The prequential
harness trains on a warm-up prefix, then for each later sample predicts
first and learns from it only when the top probability reaches ``tau``.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .adwin import Adwin
from .artifact import ModelArtifact, pickle_state, register, to_jsonable, unpickle_state
from .dataset import Dataset, sort_labels
from .errors import CorruptInput, DimensionMismatch, EmptyStream, InvalidSpec, IoError, TooShort
from .hoeffding import HoeffdingAdaptiveTree, HoeffdingTree, hoeffding_bound
from .mondrian import AggregatedMondrianForest
from .offline import encode_labels

__all__ = [
    "GaussianNaiveBayes", "HoeffdingTree", "HoeffdingAdaptiveTree", "AdaptiveRandomForest",
    "StreamingRandomPatches", "AggregatedMondrianForest", "make_learner", "learn_one", "predict_one",
    "StreamConfig", "StreamRecord", "StreamReport", "run_prequential", "forgetting_rate", "hoeffding_bound",
    "write_log", "read_log", "LEARNERS",
]

VAR_FLOOR = 1e-9
ENSEMBLE_SIZE = 10
POISSON_LAMBDA = 6.0
DRIFT_DELTA = 0.002
WARNING_DELTA = 0.01
SUBSPACE_FRACTION = 0.6
# member trees of the ensembles
MEMBER_TREE = {"grace_period": 50, "delta": 0.01, "tie_threshold": 0.05}


class GaussianNaiveBayes:
    """Per-class running mean and variance (Welford), floored variances."""

    kind = "GNB"

    def __init__(self, classes, var_floor=VAR_FLOOR, seed=0):
        self.classes = [str(c) for c in classes]
        self.var_floor = var_floor
        self.n_features = None
        c = len(self.classes)
        self.count = np.zeros(c)
        self.mean = None
        self.m2 = None

    def _check(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.n_features is None:
            self.n_features = len(x)
            self.mean = np.zeros((len(self.classes), len(x)))
            self.m2 = np.zeros_like(self.mean)
        elif len(x) != self.n_features:
            raise DimensionMismatch(f"learner expects {self.n_features} features, got {len(x)}")
        return x

    def variance(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            var = np.where(self.count[:, None] > 0, self.m2 / np.maximum(self.count[:, None], 1e-300), 0.0)
        return np.maximum(var, self.var_floor)

    def learn_one(self, x, y: int, w: float = 1.0):
        x = self._check(x)
        n_new = self.count[y] + w
        delta = x - self.mean[y]
        self.mean[y] += (w / n_new) * delta
        self.m2[y] += w * delta * (x - self.mean[y])
        self.count[y] = n_new

    def predict_proba_one(self, x) -> np.ndarray:
        c = len(self.classes)
        if self.n_features is None or self.count.sum() == 0:
            return np.full(c, 1.0 / c)
        x = self._check(x)
        seen = self.count > 0
        var = self.variance()[seen]
        logits = np.log(self.count[seen] / self.count.sum()) - 0.5 * np.sum(
            np.log(2 * np.pi * var) + (x - self.mean[seen]) ** 2 / var, axis=1)
        out = np.zeros(c)
        e = np.exp(logits - logits.max())
        out[seen] = e / e.sum()
        return out


class _Member:
    """One ensemble tree with its drift monitors and optional background tree."""

    def __init__(self, tree, patch=None):
        self.tree = tree
        self.patch = patch
        self.background = None
        self.drift = Adwin(DRIFT_DELTA)
        self.warning = None

    def view(self, x):
        return x if self.patch is None else x[self.patch]


class _DriftEnsemble:
    """Online bagging with Poisson weights and ADWIN-driven tree replacement."""

    def __init__(self, classes, n_models=ENSEMBLE_SIZE, lam=POISSON_LAMBDA, drift_delta=DRIFT_DELTA, seed=0,
                 tree_params=None):
        if n_models < 1:
            raise InvalidSpec("n_models must be >= 1")
        self.classes = [str(c) for c in classes]
        self.n_models = n_models
        self.lam = lam
        self.drift_delta = drift_delta
        self.tree_params = {**MEMBER_TREE, **(tree_params or {})}
        self.rng = np.random.default_rng(seed)
        self.members: list[_Member] = []
        self.n_features = None
        self.drifts = 0

    def _tree(self, **extra):
        seed = int(self.rng.integers(0, 2**63 - 1))
        return HoeffdingTree(self.classes, seed=seed, **self.tree_params, **extra)

    def _check(self, x):
        x = np.asarray(x, dtype=float).reshape(-1)
        if self.n_features is None:
            self.n_features = len(x)
            self.members = [self._new_member() for _ in range(self.n_models)]
        elif len(x) != self.n_features:
            raise DimensionMismatch(f"learner expects {self.n_features} features, got {len(x)}")
        return x

    def predict_proba_one(self, x) -> np.ndarray:
        c = len(self.classes)
        if self.n_features is None:
            return np.full(c, 1.0 / c)
        x = self._check(x)
        return np.mean([m.tree.predict_proba_one(m.view(x)) for m in self.members], axis=0)

    def learn_one(self, x, y: int, w: float = 1.0):
        x = self._check(x)
        for i, m in enumerate(self.members):
            xm = m.view(x)
            wrong = int(np.argmax(m.tree.predict_proba_one(xm))) != y
            k = int(self.rng.poisson(self.lam))
            if k > 0:
                m.tree.learn_one(xm, y, w * k)
                if m.background is not None:
                    m.background.learn_one(xm, y, w * k)
            self._monitor(i, m, wrong)

    def _new_member(self) -> _Member:
        raise NotImplementedError

    def _monitor(self, i, member, wrong):
        raise NotImplementedError


class AdaptiveRandomForest(_DriftEnsemble):
    """Hoeffding trees with per-leaf sqrt-size feature subsets.

    A warning-level ADWIN starts a background tree; a drift-level ADWIN
    replaces the member with it (or with a fresh tree if none is ready).
    """

    kind = "ARF"

    def __init__(self, classes, warning_delta=WARNING_DELTA, **kwargs):
        self.warning_delta = warning_delta
        super().__init__(classes, **kwargs)

    def _new_member(self):
        m = _Member(self._tree(max_features="sqrt"))
        m.drift = Adwin(self.drift_delta)
        m.warning = Adwin(self.warning_delta)
        return m

    def _monitor(self, i, m, wrong):
        if m.warning.update(wrong) and m.background is None:
            m.background = self._tree(max_features="sqrt")
        if m.drift.update(wrong):
            self.drifts += 1
            fresh = self._new_member()
            if m.background is not None:
                fresh.tree = m.background
            self.members[i] = fresh


class StreamingRandomPatches(_DriftEnsemble):
    """Hoeffding trees each trained on its own random 60% feature patch; drift resets a member."""

    kind = "SRP"

    def __init__(self, classes, subspace=SUBSPACE_FRACTION, **kwargs):
        if not 0 < subspace <= 1:
            raise InvalidSpec("subspace must lie in (0, 1]")
        self.subspace = subspace
        super().__init__(classes, **kwargs)

    def _new_member(self):
        d = self.n_features
        k = max(1, int(round(self.subspace * d)))
        patch = np.sort(self.rng.choice(d, size=k, replace=False))
        m = _Member(self._tree(), patch)
        m.drift = Adwin(self.drift_delta)
        return m

    def _monitor(self, i, m, wrong):
        if m.drift.update(wrong):
            self.drifts += 1
            self.members[i] = self._new_member()


LEARNERS = {
    "GNB": GaussianNaiveBayes,
    "HT": HoeffdingTree,
    "HAT": HoeffdingAdaptiveTree,
    "ARF": AdaptiveRandomForest,
    "SRP": StreamingRandomPatches,
    "AMF": AggregatedMondrianForest,
}


def make_learner(kind: str, classes, seed: int = 0, **params):
    try:
        cls = LEARNERS[kind]
    except KeyError:
        raise InvalidSpec(f"unknown streaming learner {kind!r}; choose from {sorted(LEARNERS)}") from None
    try:
        return cls(classes, seed=seed, **params)
    except TypeError as exc:
        raise InvalidSpec(f"bad {kind} options: {exc}") from None


def _sample_xy(model, sample):
    x = getattr(sample, "features", sample)
    return np.asarray(x, dtype=float)


def learn_one(model, sample, label=None):
    """Update ``model`` with one AoaSample (track label) or a (features, label) pair."""
    label = label if label is not None else sample.track_id
    y = encode_labels([label], model.classes)[0]
    model.learn_one(_sample_xy(model, sample), int(y))
    return model


def predict_one(model, sample) -> np.ndarray:
    return model.predict_proba_one(_sample_xy(model, sample))


# --- prequential evaluation ---------------------------------------------------------


@dataclass(frozen=True)
class StreamConfig:
    warmup_fraction: float = 0.10
    tau: float = 0.5
    seed: int = 0
    record_timing: bool = True

    def __post_init__(self):
        if not 0 <= self.warmup_fraction < 1:
            raise InvalidSpec("warmup_fraction must lie in [0, 1)")
        if self.tau < 0:
            raise InvalidSpec("tau must be >= 0")


@dataclass
class StreamRecord:
    t: int
    true: str
    pred: str
    conf: float
    accepted: bool
    correct: bool
    infer_ms: float
    update_ms: float


@dataclass
class StreamReport:
    learner: str
    n_warmup: int
    n_online: int
    warmup_accuracy: float | None
    online_accuracy: float
    acceptance_rate: float
    forgetting_rate: float
    forgetting_events: int
    mean_infer_ms: float
    total_infer_s: float
    mean_update_ms: float
    total_update_s: float

    def to_json(self) -> str:
        return json.dumps(to_jsonable(asdict(self)), indent=2, sort_keys=True) + "\n"


def forgetting_rate(log) -> float:
    """Fraction of steps where a correct prediction is followed by a wrong one."""
    correct = [bool(r.correct) for r in log]
    if len(correct) < 2:
        raise TooShort(f"forgetting rate needs >= 2 online records, got {len(correct)}")
    events = sum(1 for a, b in zip(correct[:-1], correct[1:]) if a and not b)
    return events / len(correct)


def report_from_log(learner: str, log: list[StreamRecord], n_warmup: int, warmup_accuracy) -> StreamReport:
    n = len(log)
    correct = sum(r.correct for r in log)
    accepted = sum(r.accepted for r in log)
    events = sum(1 for a, b in zip(log[:-1], log[1:]) if a.correct and not b.correct)
    infer = sum(r.infer_ms for r in log)
    update = sum(r.update_ms for r in log)
    return StreamReport(
        learner=learner,
        n_warmup=n_warmup,
        n_online=n,
        warmup_accuracy=warmup_accuracy,
        online_accuracy=correct / n if n else 0.0,
        acceptance_rate=accepted / n if n else 0.0,
        forgetting_rate=forgetting_rate(log) if n >= 2 else 0.0,
        forgetting_events=events,
        mean_infer_ms=infer / n if n else 0.0,
        total_infer_s=infer / 1000.0,
        mean_update_ms=update / accepted if accepted else 0.0,
        total_update_s=update / 1000.0,
    )


def run_prequential(model, data, config: StreamConfig = StreamConfig(), labels=None):
    """Warm up on the first ``warmup_fraction`` of ``data``, then predict-then-train.

    ``data`` is a Dataset (track labels) or a feature matrix with ``labels``.
    Returns ``(log, report)``; the log covers the online phase only.
    """
    if isinstance(data, Dataset):
        x, labels = data.features, data.track_id
    else:
        x = np.atleast_2d(np.asarray(data, dtype=float))
    if len(x) == 0:
        raise EmptyStream("stream has no samples")
    y = encode_labels(labels, model.classes)
    n_warm = int(math.floor(config.warmup_fraction * len(x)))
    for i in range(n_warm):
        model.learn_one(x[i], int(y[i]))
    warm_acc = None
    if n_warm:
        hits = [int(np.argmax(model.predict_proba_one(x[i]))) == y[i] for i in range(n_warm)]
        warm_acc = sum(hits) / n_warm
    clock = time.perf_counter if config.record_timing else (lambda: 0.0)
    log = []
    for t, i in enumerate(range(n_warm, len(x))):
        start = clock()
        p = model.predict_proba_one(x[i])
        infer = (clock() - start) * 1000.0
        k = int(np.argmax(p))
        conf = float(p[k])
        accepted = conf >= config.tau
        update = 0.0
        if accepted:
            start = clock()
            model.learn_one(x[i], int(y[i]))
            update = (clock() - start) * 1000.0
        log.append(StreamRecord(t, model.classes[y[i]], model.classes[k], conf, bool(accepted),
                                bool(k == y[i]), infer, update))
    return log, report_from_log(getattr(model, "kind", type(model).__name__), log, n_warm, warm_acc)


LOG_HEADER = ["t", "true", "pred", "conf", "accepted", "correct", "infer_ms", "update_ms"]


def write_log(path, log: list[StreamRecord]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for r in log:
                w.writerow([r.t, r.true, r.pred, repr(float(r.conf)), int(r.accepted), int(r.correct),
                            f"{r.infer_ms:.6f}", f"{r.update_ms:.6f}"])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_log(path) -> list[StreamRecord]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0] != LOG_HEADER:
        raise CorruptInput(f"{path} is not a stream log")
    try:
        return [StreamRecord(int(r[0]), r[1], r[2], float(r[3]), r[4] == "1", r[5] == "1", float(r[6]),
                             float(r[7])) for r in rows[1:]]
    except (ValueError, IndexError) as exc:
        raise CorruptInput(f"{path}: malformed log row ({exc})") from exc


# --- persistence --------------------------------------------------------------------


@register(*LEARNERS)
class _PickledLearner:
    """Artifact adapter: streaming learners are stored as pickled object graphs."""

    @staticmethod
    def from_payload(meta, arrays, blob):
        if blob is None:
            raise CorruptInput("streaming-learner artifact has no pickle payload")
        return unpickle_state(blob)


def learner_artifact(model, config=None, seed=None, fingerprint="") -> ModelArtifact:
    meta = {"classes": model.classes, "n_features": model.n_features}
    return ModelArtifact(model.kind, config=config, seed=seed, fingerprint=fingerprint, meta=meta,
                         blob=pickle_state(model))


def stream_classes(data: Dataset) -> list[str]:
    return sort_labels(map(str, data.track_id))
