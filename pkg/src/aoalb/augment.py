"""Conditional VAE augmentation for AoA feature vectors.

The encoder maps a standardized feature vector and a one-hot class condition
to a Gaussian posterior; the decoder maps a latent draw and the condition back
to features.  Training minimizes mean squared reconstruction error plus
``beta`` times the KL divergence to the standard-normal prior.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .artifact import ModelArtifact, register
from .dataset import AoaSample, Dataset, sort_labels
from .errors import (
    ClassSpaceMismatch, DegenerateDataset, InvalidSpec, TooManyClasses, UncoveredClass, UnknownClass,
)
from .neural import AdamState, LayerSpec, Mlp, adam_step, backward, forward, gaussian_kl, mse
from .offline import confusion_matrix, encode_labels

CONDITION_DIM = 20
LATENT_DIM = 64
ENCODER_HIDDEN = (256, 128)
DECODER_HIDDEN = (128, 256)
AOA_LIMIT = 90.0
STD_FLOOR = 1e-8


def _relu_stack(dims, last_linear=True):
    specs = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        linear = last_linear and i == len(dims) - 2
        specs.append(LayerSpec(a, b, activation=None if linear else "relu"))
    return specs


class Cvae:
    """Encoder trunk, a joint (mu, log-variance) head and a decoder, with the feature scaler."""

    kind = "CVAE"

    def __init__(self, classes, dim: int = 200, latent: int = LATENT_DIM, condition_dim: int = CONDITION_DIM,
                 beta: float = 1.0, seed: int = 0, region: str = "", estimator: str = ""):
        classes = [str(c) for c in classes]
        if len(classes) > condition_dim:
            raise TooManyClasses(f"{len(classes)} classes do not fit a {condition_dim}-slot condition")
        if beta < 0:
            raise InvalidSpec("beta must be >= 0")
        self.classes = classes
        self.dim, self.latent, self.condition_dim, self.beta = dim, latent, condition_dim, beta
        self.region, self.estimator = region, estimator
        self.trunk = Mlp(_relu_stack([dim + condition_dim, *ENCODER_HIDDEN], last_linear=False), seed=seed)
        self.head = Mlp([LayerSpec(ENCODER_HIDDEN[-1], 2 * latent)], seed=seed + 1)
        self.decoder = Mlp(_relu_stack([latent + condition_dim, *DECODER_HIDDEN, dim]), seed=seed + 2)
        self.mean = np.zeros(dim)
        self.scale = np.ones(dim)

    @property
    def nets(self):
        return {"trunk": self.trunk, "head": self.head, "decoder": self.decoder}

    def condition(self, labels) -> np.ndarray:
        idx = encode_labels(labels, self.classes)
        c = np.zeros((len(idx), self.condition_dim))
        c[np.arange(len(idx)), idx] = 1.0
        return c

    def standardize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def encode(self, xs: np.ndarray, c: np.ndarray):
        h, c1 = forward(self.trunk, np.hstack([xs, c]))
        out, c2 = forward(self.head, h)
        return out[:, : self.latent], out[:, self.latent :], (c1, c2)

    def decode(self, z: np.ndarray, c: np.ndarray):
        """Decoded features in standardized units plus the backward cache."""
        return forward(self.decoder, np.hstack([z, c]))

    def reconstruct_mean(self, x, labels) -> np.ndarray:
        """decode(mu(x, c), c) in feature units: the zero-noise reconstruction."""
        c = self.condition(labels)
        mu, _, _ = self.encode(self.standardize(x), c)
        out, _ = self.decode(mu, c)
        return out * self.scale + self.mean

    def params(self) -> dict:
        return {f"{name}.{k}": v for name, net in self.nets.items() for k, v in net.params.items()}

    def set_params(self, flat: dict):
        for name, net in self.nets.items():
            net.params = {k[len(name) + 1 :]: v for k, v in flat.items() if k.startswith(name + ".")}

    def to_payload(self):
        meta = {"classes": self.classes, "dim": self.dim, "latent": self.latent,
                "condition_dim": self.condition_dim, "beta": self.beta, "region": self.region,
                "estimator": self.estimator}
        arrays = dict(self.params())
        arrays["scaler.mean"] = self.mean
        arrays["scaler.scale"] = self.scale
        return meta, arrays, None

    @classmethod
    def from_payload(cls, meta, arrays, blob):
        model = cls(meta["classes"], meta["dim"], meta["latent"], meta["condition_dim"], meta["beta"],
                    region=meta["region"], estimator=meta["estimator"])
        model.set_params({k: v for k, v in arrays.items() if not k.startswith("scaler.")})
        model.mean = arrays["scaler.mean"]
        model.scale = arrays["scaler.scale"]
        return model


register(Cvae.kind)(Cvae)


@dataclass
class StepLoss:
    total: float
    reconstruction: float
    kl: float


def elbo_step(model: Cvae, xs: np.ndarray, c: np.ndarray, eps: np.ndarray, with_grads: bool = True):
    """Loss terms for one batch and, optionally, gradients for every parameter."""
    mu, log_var, (c1, c2) = model.encode(xs, c)
    std = np.exp(0.5 * log_var)
    z = mu + std * eps
    recon, dcache = model.decode(z, c)
    rec_loss, g_rec = mse(recon, xs)
    kl, g_mu_kl, g_lv_kl = gaussian_kl(mu, log_var)
    loss = StepLoss(rec_loss + model.beta * kl, rec_loss, kl)
    if not with_grads:
        return loss, None
    g_dec, g_in = backward(model.decoder, dcache, g_rec)
    g_z = g_in[:, : model.latent]
    g_mu = g_z + model.beta * g_mu_kl
    g_lv = g_z * eps * 0.5 * std + model.beta * g_lv_kl
    g_head, g_h = backward(model.head, c2, np.hstack([g_mu, g_lv]))
    g_trunk, _ = backward(model.trunk, c1, g_h)
    grads = {f"trunk.{k}": v for k, v in g_trunk.items()}
    grads.update({f"head.{k}": v for k, v in g_head.items()})
    grads.update({f"decoder.{k}": v for k, v in g_dec.items()})
    return loss, grads


@dataclass
class TrainingLog:
    steps: list[StepLoss] = field(default_factory=list)
    train_elbo: list[float] = field(default_factory=list)
    val_elbo: list[float] = field(default_factory=list)
    best_epoch: int = -1


def cvae_train(data: Dataset, beta: float = 1.0, epochs: int = 200, batch: int = 64, lr: float = 1e-3,
               seed: int = 0, val_fraction: float = 0.1, classes=None, latent: int = LATENT_DIM,
               condition_dim: int = CONDITION_DIM) -> tuple[Cvae, TrainingLog]:
    """Fit a CVAE on ``data``'s track labels; keeps the epoch with the best validation ELBO."""
    if len(data) < 2:
        raise DegenerateDataset("need at least two samples to train a CVAE")
    if batch < 1 or epochs < 0:
        raise InvalidSpec("batch must be >= 1 and epochs >= 0")
    classes = list(classes) if classes is not None else sort_labels(map(str, data.track_id))
    if len(classes) > condition_dim:
        raise TooManyClasses(f"{len(classes)} classes do not fit a {condition_dim}-slot condition")
    region = ",".join(sort_labels(set(map(str, data.region))))
    estimator = ",".join(sort_labels(set(map(str, data.estimator))))
    model = Cvae(classes, data.dim, latent, condition_dim, beta, seed, region, estimator)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(data))
    n_val = int(round(val_fraction * len(data))) if len(data) >= 10 else 0
    val, train = order[:n_val], order[n_val:]
    x = data.features
    model.mean = x[train].mean(axis=0)
    std = x[train].std(axis=0)
    model.scale = np.where(std > STD_FLOOR, std, 1.0)
    xs_all = model.standardize(x)
    c_all = model.condition(data.track_id)
    val_eps = np.random.default_rng([seed, 1]).standard_normal((len(val), latent))
    opt = AdamState.for_params(model.params(), lr=lr)
    log = TrainingLog()
    best, best_params = np.inf, model.params()
    for epoch in range(epochs):
        perm = rng.permutation(train)
        totals = []
        for start in range(0, len(perm), batch):
            rows = perm[start : start + batch]
            eps = rng.standard_normal((len(rows), latent))
            loss, grads = elbo_step(model, xs_all[rows], c_all[rows], eps)
            model.set_params(adam_step(opt, model.params(), grads))
            log.steps.append(loss)
            totals.append(loss.total * len(rows))
        log.train_elbo.append(float(np.sum(totals) / len(train)))
        if n_val:
            score = elbo_step(model, xs_all[val], c_all[val], val_eps, with_grads=False)[0].total
        else:
            score = log.train_elbo[-1]
        log.val_elbo.append(score)
        if score < best:
            best, best_params, log.best_epoch = score, model.params(), epoch
    model.set_params(best_params)
    return model, log


def cvae_generate(model: Cvae, class_label, count: int, seed: int = 0) -> tuple[np.ndarray, int]:
    """``count`` decoded feature rows for one class and the number of clamped values."""
    if str(class_label) not in model.classes:
        raise UnknownClass(f"class {class_label!r} is not in the model's condition space")
    if count <= 0:
        return np.zeros((0, model.dim)), 0
    z = np.random.default_rng(seed).standard_normal((count, model.latent))
    out, _ = model.decode(z, model.condition([class_label] * count))
    out = out * model.scale + model.mean
    clamped = int(np.sum(np.abs(out) > AOA_LIMIT))
    return np.clip(out, -AOA_LIMIT, AOA_LIMIT), clamped


def cvae_sample(model: Cvae, class_label, count: int, seed: int = 0) -> list[AoaSample]:
    feats, _ = cvae_generate(model, class_label, count, seed)
    region = model.region if "," not in model.region else ""
    estimator = model.estimator if "," not in model.estimator else ""
    return [AoaSample(f, region, str(class_label), -1, estimator, True, "synthetic") for f in feats]


def synthetic_dataset(model: Cvae, per_class: int, seed: int = 0, classes=None) -> tuple[Dataset, int]:
    """``per_class`` generated rows for every class (each class from its own child seed)."""
    parts, clamped = [], 0
    for i, c in enumerate(classes if classes is not None else model.classes):
        feats, k = cvae_generate(model, c, per_class, seed=np.random.SeedSequence([seed, i]).generate_state(1)[0])
        clamped += k
        parts.append(_synthetic_rows(model, feats, c))
    return Dataset.concat(parts) if parts else Dataset.empty(model.dim), clamped


def _synthetic_rows(model: Cvae, feats: np.ndarray, label) -> Dataset:
    n = len(feats)
    region = model.region if "," not in model.region else ""
    estimator = model.estimator if "," not in model.estimator else ""
    return Dataset(feats, [region] * n, [str(label)] * n, np.full(n, -1), [estimator] * n, [True] * n,
                   ["synthetic"] * n)


def expand_to(real: Dataset, model: Cvae, per_class: int, seed: int = 0) -> Dataset:
    """Real rows plus synthetic rows topping every class up to ``per_class``."""
    parts = [real]
    labels = real.track_id.astype(str)
    for i, c in enumerate(model.classes):
        missing = per_class - int(np.sum(labels == c))
        if missing > 0:
            feats, _ = cvae_generate(model, c, missing, seed=np.random.SeedSequence([seed, i]).generate_state(1)[0])
            parts.append(_synthetic_rows(model, feats, c))
    return Dataset.concat(parts)


class ReplayBuffer:
    """Bounded FIFO store of labelled samples."""

    def __init__(self, capacity: int, classes=None):
        if capacity < 1:
            raise InvalidSpec("capacity must be >= 1")
        self.capacity = capacity
        self.classes = None if classes is None else [str(c) for c in classes]
        self.items: deque[AoaSample] = deque(maxlen=capacity)

    def add(self, sample: AoaSample) -> None:
        if self.classes is not None and str(sample.track_id) not in self.classes:
            raise UnknownClass(f"label {sample.track_id!r} is outside the buffer's class space")
        self.items.append(sample)

    def extend(self, samples) -> None:
        for s in samples:
            self.add(s)

    def __len__(self) -> int:
        return len(self.items)

    def dataset(self, dim: int = 200) -> Dataset:
        return Dataset.from_samples(list(self.items), dim)


def upsample_buffer(buffer: ReplayBuffer, model: Cvae, target_per_class: int, seed: int = 0,
                    classes=None) -> Dataset:
    """Buffer contents plus synthetic rows bringing each class up to ``target_per_class``."""
    if not len(buffer):
        raise InvalidSpec("replay buffer is empty")
    real = buffer.dataset(model.dim)
    wanted = [str(c) for c in (classes if classes is not None else model.classes)]
    missing = sorted(set(map(str, real.track_id)) - set(model.classes))
    if missing:
        raise UncoveredClass(f"the CVAE cannot generate classes {missing}")
    parts = [real]
    labels = real.track_id.astype(str)
    for c in wanted:
        if c not in model.classes:
            raise UncoveredClass(f"the CVAE cannot generate class {c!r}")
        need = target_per_class - int(np.sum(labels == c))
        if need > 0:
            i = model.classes.index(c)
            feats, _ = cvae_generate(model, c, need, seed=np.random.SeedSequence([seed, i]).generate_state(1)[0])
            parts.append(_synthetic_rows(model, feats, c))
    return Dataset.concat(parts)


def augment_eval(real_model, synthetic: Dataset) -> dict:
    """Score a real-data classifier on synthetic rows, taking the conditioning label as truth."""
    model = real_model.model if isinstance(real_model, ModelArtifact) else real_model
    classes = list(model.classes)
    unknown = sorted(set(map(str, synthetic.track_id)) - set(classes))
    if unknown:
        raise ClassSpaceMismatch(f"synthetic classes {unknown} are unknown to the classifier")
    y = encode_labels(synthetic.track_id, classes)
    pred = encode_labels(model.predict(synthetic.features), classes)
    cm = confusion_matrix(y, pred, len(classes))
    present = np.flatnonzero(cm.sum(axis=1) > 0)
    tp = np.diag(cm).astype(float)[present]
    support = cm.sum(axis=1)[present]
    predicted = cm.sum(axis=0)[present]
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 0.0)
    recall = tp / support
    f1 = np.where(precision + recall > 0, 2 * precision * recall / np.maximum(precision + recall, 1e-300), 0.0)
    return {
        "accuracy": float(np.mean(pred == y)) if len(y) else 0.0,
        "precision": float(precision.mean()) if len(present) else 0.0,
        "recall": float(recall.mean()) if len(present) else 0.0,
        "f1": float(f1.mean()) if len(present) else 0.0,
        "confusion_matrix": cm.tolist(),
        "classes": classes,
    }


def cvae_artifact(model: Cvae, config=None, seed=None, fingerprint="") -> ModelArtifact:
    return ModelArtifact(model.kind, model, config=config, seed=seed, fingerprint=fingerprint)
