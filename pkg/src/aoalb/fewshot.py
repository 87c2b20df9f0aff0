"""Prototypical-network few-shot learning.

Episodes pick ``n`` classes and ``k`` support plus ``q`` query samples per
class.  Queries are scored by negative squared Euclidean distance to the mean
support embedding of each class.  The continual variant never reuses a sample
and tracks how each update degrades accuracy on earlier episodes.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .artifact import ModelArtifact, register, to_jsonable
from .dataset import Dataset, sort_labels
from .errors import IndexMismatch, InsufficientSamples, InvalidSpec
from .neural import AdamState, Mlp, adam_step, backward, forward, softmax, softmax_xent

EMBED_DIMS = (128, 64, 32)
DROPOUT = 0.3
CONTINUAL_STEPS = 5
Z95 = 1.96


@dataclass
class Episode:
    way_n: int
    shot_k: int
    query_q: int
    classes: list[str]
    support: np.ndarray  # (n, k) row indices
    query: np.ndarray  # (n, q) row indices
    episode_index: int = 0

    def indices(self) -> np.ndarray:
        return np.concatenate([self.support.ravel(), self.query.ravel()])


def _labels(data) -> np.ndarray:
    return np.asarray(data.track_id if isinstance(data, Dataset) else data).astype(str)


def _features(data) -> np.ndarray:
    return data.features if isinstance(data, Dataset) else np.asarray(data, dtype=float)


class EpisodeSampler:
    """Draws episodes from one label array; in continual mode it never reuses an index."""

    def __init__(self, labels, n: int, k: int, q: int, seed=0, continual: bool = False):
        if n < 1 or k < 1 or q < 1:
            raise InvalidSpec("n, k and q must all be >= 1")
        labels = _labels(labels)
        self.n, self.k, self.q = n, k, q
        self.classes = sort_labels(set(labels))
        self.pools = {c: np.flatnonzero(labels == c) for c in self.classes}
        self.rng = np.random.default_rng(seed)
        self.continual = continual
        self.used: set[int] = set()
        self.count = 0

    def sample(self) -> Episode:
        need = self.k + self.q
        avail = self.pools
        if self.continual and self.used:
            taken = np.fromiter(self.used, dtype=np.int64, count=len(self.used))
            avail = {c: np.setdiff1d(p, taken, assume_unique=True) for c, p in self.pools.items()}
        eligible = [c for c in self.classes if len(avail[c]) >= need]
        if len(eligible) < self.n:
            raise InsufficientSamples(
                f"only {len(eligible)} classes hold {need} {'unused ' if self.continual else ''}samples; need {self.n}")
        chosen = [eligible[i] for i in sorted(self.rng.choice(len(eligible), self.n, replace=False))]
        support, query = [], []
        for c in chosen:
            pick = self.rng.choice(avail[c], need, replace=False)
            support.append(pick[: self.k])
            query.append(pick[self.k :])
        ep = Episode(self.n, self.k, self.q, chosen, np.array(support), np.array(query), self.count)
        if self.continual:
            self.used.update(int(i) for i in ep.indices())
        self.count += 1
        return ep


def sample_episode(data, n: int, k: int, q: int, seed=0, exclusions: set | None = None,
                   episode_index: int = 0) -> Episode:
    """One episode.  Passing an ``exclusions`` set switches to no-reuse mode and records the draw in it."""
    sampler = EpisodeSampler(data, n, k, q, seed, continual=exclusions is not None)
    if exclusions is not None:
        sampler.used = exclusions
    ep = sampler.sample()
    ep.episode_index = episode_index
    return ep


def max_episodes(counts, n: int, k: int, q: int) -> int:
    """Largest E with sum_c min(floor(count_c / (k+q)), E) >= n*E.

    This is the episode count reached when no-reuse draws keep the classes
    balanced; uniform class choice among eligible classes comes close to it.
    """
    caps = np.asarray(counts, dtype=np.int64) // (k + q)
    lo, hi = 0, int(caps.sum()) // n
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if np.minimum(caps, mid).sum() >= n * mid:
            lo = mid
        else:
            hi = mid - 1
    return lo


class ProtoNet:
    """Embedding network plus its optimizer state; prototypes live only inside an episode."""

    kind = "PROTONET"

    def __init__(self, in_dim: int = 200, dims=EMBED_DIMS, dropout: float = DROPOUT, lr: float = 1e-3, seed: int = 0):
        self.net = Mlp.from_dims([in_dim, *dims], batchnorm=True, dropout=dropout, seed=seed)
        self.opt = AdamState.for_params(self.net.params, lr=lr)
        self.rng = np.random.default_rng(seed)

    @property
    def embed_dim(self) -> int:
        return self.net.out_dim

    def embed(self, x) -> np.ndarray:
        """Eval-mode embedding (running batchnorm statistics, no dropout)."""
        mode = self.net.mode
        self.net.eval()
        out, _ = forward(self.net, np.atleast_2d(np.asarray(x, dtype=float)))
        self.net.mode = mode
        return out

    def to_payload(self):
        meta = {"layers": self.net.layer_config(), "lr": self.opt.lr, "adam_step": self.opt.step}
        arrays = dict(self.net.state())
        arrays.update({f"adam.m.{k}": v for k, v in self.opt.m.items()})
        arrays.update({f"adam.v.{k}": v for k, v in self.opt.v.items()})
        return meta, arrays, None

    @classmethod
    def from_payload(cls, meta, arrays, blob):
        layers = meta["layers"]
        model = cls(layers[0]["in_dim"], [l["out_dim"] for l in layers], layers[0]["dropout"], meta["lr"])
        model.net.load_state({k: v for k, v in arrays.items() if not k.startswith("adam.")})
        model.opt.m = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        model.opt.v = {k[7:]: v for k, v in arrays.items() if k.startswith("adam.v.")}
        model.opt.step = meta["adam_step"]
        return model


register(ProtoNet.kind)(ProtoNet)


def proto_logits(support_emb: np.ndarray, query_emb: np.ndarray):
    """support_emb (n, k, d), query_emb (m, d) -> prototypes (n, d), logits (m, n)."""
    protos = support_emb.mean(axis=1)
    diff = query_emb[:, None, :] - protos[None, :, :]
    return protos, -np.sum(diff * diff, axis=2)


@dataclass
class EpisodeResult:
    loss: float
    accuracy: float
    probabilities: np.ndarray
    grads: dict
    input_grad: np.ndarray  # w.r.t. the stacked [support; query] inputs


def episode_loss(model: ProtoNet, episode: Episode, data, seed=None) -> EpisodeResult:
    """Cross-entropy of the query set against the episode prototypes, with gradients.

    Support and query are embedded in one forward batch in the network's
    current mode; the gradient reaches support samples through the prototypes.
    """
    x = _features(data)
    n, k, q = episode.way_n, episode.shot_k, episode.query_q
    batch = x[episode.indices()]
    emb, cache = forward(model.net, batch, seed=seed)
    s_emb = emb[: n * k].reshape(n, k, -1)
    q_emb = emb[n * k :]
    protos, logits = proto_logits(s_emb, q_emb)
    labels = np.repeat(np.arange(n), q)
    loss, g_logits = softmax_xent(logits, labels)
    diff = q_emb[:, None, :] - protos[None, :, :]  # (m, n, d)
    g_query = -2.0 * np.einsum("mn,mnd->md", g_logits, diff)
    g_protos = 2.0 * np.einsum("mn,mnd->nd", g_logits, diff)
    g_support = np.repeat(g_protos[:, None, :] / k, k, axis=1).reshape(n * k, -1)
    grads, input_grad = backward(model.net, cache, np.concatenate([g_support, g_query]))
    probs = softmax(logits)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return EpisodeResult(loss, acc, probs, grads, input_grad)


def train_step(model: ProtoNet, episode: Episode, data) -> EpisodeResult:
    model.net.train()
    res = episode_loss(model, episode, data, seed=int(model.rng.integers(0, 2**63 - 1)))
    model.net.params = adam_step(model.opt, model.net.params, res.grads)
    return res


def evaluate_episodes(model: ProtoNet, support: np.ndarray, query: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Eval-mode query accuracy of many episodes at once.

    support (E, n, k) and query (E, n, q) index ``x``; each distinct row is embedded once.
    """
    rows, inverse = np.unique(np.concatenate([support.ravel(), query.ravel()]), return_inverse=True)
    emb = model.embed(x[rows])[inverse]
    e, n, k = support.shape
    q = query.shape[2]
    s_emb = emb[: support.size].reshape(e, n, k, -1)
    q_emb = emb[support.size :].reshape(e, n * q, -1)
    protos = s_emb.mean(axis=2)
    dist = np.sum((q_emb[:, :, None, :] - protos[:, None, :, :]) ** 2, axis=3)
    labels = np.repeat(np.arange(n), q)
    return np.mean(np.argmin(dist, axis=2) == labels[None, :], axis=1)


def meta_train(model: ProtoNet, data, episodes: int = 1000, n: int = 3, k: int = 5, q: int = 5, lr: float = 1e-3,
               seed: int = 0) -> list[float]:
    """Standard episodic training (indices may repeat across episodes); returns the loss curve."""
    model.opt.lr = lr
    sampler = EpisodeSampler(data, n, k, q, seed)
    return [train_step(model, sampler.sample(), data).loss for _ in range(episodes)]


def meta_test(model: ProtoNet, data, episodes: int = 200, n: int = 3, k: int = 5, q: int = 5,
              seed: int = 0) -> tuple[float, float]:
    """Mean eval-mode query accuracy over fresh episodes and its 95% half-width."""
    if episodes < 1:
        raise InvalidSpec("episodes must be >= 1")
    sampler = EpisodeSampler(data, n, k, q, seed)
    eps = [sampler.sample() for _ in range(episodes)]
    acc = evaluate_episodes(model, np.stack([e.support for e in eps]), np.stack([e.query for e in eps]),
                            _features(data))
    return float(acc.mean()), confidence_interval(acc)


def confidence_interval(values) -> float:
    values = np.asarray(values, dtype=float)
    return float(Z95 * values.std() / math.sqrt(len(values))) if len(values) else 0.0


def episode_forgetting(acc_before, acc_after, e: int) -> float:
    """FR(e): mean positive accuracy drop on episodes 1..e-1 caused by update e."""
    before = np.asarray(acc_before, dtype=float).reshape(-1)
    after = np.asarray(acc_after, dtype=float).reshape(-1)
    if e < 2:
        raise IndexMismatch("episode forgetting is defined for e >= 2")
    if len(before) != e - 1 or len(after) != e - 1:
        raise IndexMismatch(f"need {e - 1} accuracies before and after, got {len(before)} and {len(after)}")
    return math.fsum(np.maximum(0.0, before - after)) / (e - 1)


@dataclass
class ContinualResult:
    k: int
    n: int
    q: int
    E: int
    final_accuracy: float
    ci95: float
    fr_trace: list[float]
    accuracy_trace: list[float]
    mean_infer_ms: float
    mean_update_ms: float
    final_fr: float = 0.0
    mean_fr: float = 0.0
    episode_accuracy: list[float] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(to_jsonable(asdict(self)), indent=2, sort_keys=True) + "\n"


def continual_run(model: ProtoNet, data, n: int = 3, k: int = 1, q: int = 3, seed: int = 0,
                  steps: int = CONTINUAL_STEPS, lr: float = 1e-3, max_episodes: int | None = None,
                  record_timing: bool = True) -> ContinualResult:
    """Draw no-reuse episodes until exhaustion, updating after each one.

    For every episode the model first predicts its queries (inference), then
    takes ``steps`` Adam steps on it.  After each update all episodes seen so
    far are re-evaluated; the previous evaluation gives the before-accuracies
    of FR(e).  ``lr == 0`` or ``steps == 0`` freezes the model entirely.
    """
    x = _features(data)
    model.opt.lr = lr
    frozen = lr == 0 or steps == 0
    sampler = EpisodeSampler(data, n, k, q, seed, continual=True)
    clock = time.perf_counter if record_timing else (lambda: 0.0)
    supports, queries = [], []
    prev = np.empty(0)
    fr_trace, acc_trace, infer, update = [], [], [], []
    while max_episodes is None or len(supports) < max_episodes:
        try:
            ep = sampler.sample()
        except InsufficientSamples:
            break
        supports.append(ep.support)
        queries.append(ep.query)
        start = clock()
        evaluate_episodes(model, ep.support[None], ep.query[None], x)
        infer.append((clock() - start) * 1000.0)
        start = clock()
        if not frozen:
            for _ in range(steps):
                train_step(model, ep, x)
        update.append((clock() - start) * 1000.0)
        cur = evaluate_episodes(model, np.stack(supports), np.stack(queries), x)
        e = len(supports)
        if e >= 2:
            fr_trace.append(episode_forgetting(prev, cur[:-1], e))
        acc_trace.append(float(cur.mean()))
        prev = cur
    if not supports:
        raise InsufficientSamples("not a single episode could be drawn")
    return ContinualResult(
        k=k, n=n, q=q, E=len(supports),
        final_accuracy=float(prev.mean()),
        ci95=confidence_interval(prev),
        fr_trace=fr_trace,
        accuracy_trace=acc_trace,
        mean_infer_ms=float(np.mean(infer)),
        mean_update_ms=float(np.mean(update)),
        final_fr=fr_trace[-1] if fr_trace else 0.0,
        mean_fr=float(np.mean(fr_trace)) if fr_trace else 0.0,
        episode_accuracy=[float(a) for a in prev],
    )


def protonet_artifact(model: ProtoNet, config=None, seed=None, fingerprint="") -> ModelArtifact:
    return ModelArtifact(model.kind, model, config=config, seed=seed, fingerprint=fingerprint)
