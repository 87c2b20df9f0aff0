"""Small dense networks with hand-written backward passes.

Only what the few-shot embedding and the conditional VAE need: linear layers
with optional batch normalisation, ReLU and inverted dropout, three losses and
Adam.  Parameters live in a flat ``{name: ndarray}`` dict so optimiser and
serialisation code can treat every network the same way.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    LabelOutOfRange,
    NonFiniteInput,
    ShapeMismatch,
    StaleCache,
)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    batchnorm: bool = False
    activation: str | None = None
    dropout: float = 0.0

    def __post_init__(self):
        if self.activation not in (None, "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.dropout}")


class Mlp:
    """Feed-forward stack of :class:`LayerSpec` blocks.

    Each block computes linear -> batchnorm -> activation -> dropout, skipping
    the parts it does not enable.
    """

    def __init__(self, layers: Sequence[LayerSpec], seed: int = 0):
        layers = list(layers)
        if not layers:
            raise DimensionMismatch("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise DimensionMismatch(
                    f"layer output {prev.out_dim} does not feed input {nxt.in_dim}"
                )
        self.layers = layers
        self.mode = "train"
        self._version = 0
        rng = np.random.default_rng(seed)
        params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        for i, spec in enumerate(layers):
            limit = np.sqrt(6.0 / (spec.in_dim + spec.out_dim))
            params[f"W{i}"] = rng.uniform(-limit, limit, (spec.in_dim, spec.out_dim))
            params[f"b{i}"] = np.zeros(spec.out_dim)
            if spec.batchnorm:
                params[f"gamma{i}"] = np.ones(spec.out_dim)
                params[f"beta{i}"] = np.zeros(spec.out_dim)
                self.buffers[f"mean{i}"] = np.zeros(spec.out_dim)
                self.buffers[f"var{i}"] = np.ones(spec.out_dim)
        self._params = params

    @classmethod
    def from_dims(
        cls,
        dims: Sequence[int],
        *,
        batchnorm: bool = False,
        dropout: float = 0.0,
        seed: int = 0,
    ) -> "Mlp":
        """Hidden layers get batchnorm/ReLU/dropout; the last layer is linear."""
        specs = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            hidden = i < len(dims) - 2
            specs.append(
                LayerSpec(
                    a,
                    b,
                    batchnorm=batchnorm and hidden,
                    activation="relu" if hidden else None,
                    dropout=dropout if hidden else 0.0,
                )
            )
        return cls(specs, seed=seed)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def params(self) -> dict[str, np.ndarray]:
        return self._params

    @params.setter
    def params(self, new: dict[str, np.ndarray]) -> None:
        if new.keys() != self._params.keys():
            raise ShapeMismatch("parameter names differ from the network's")
        for name, value in new.items():
            if value.shape != self._params[name].shape:
                raise ShapeMismatch(f"{name}: {value.shape} != {self._params[name].shape}")
        self._params = dict(new)
        self._version += 1

    def train(self) -> "Mlp":
        self.mode = "train"
        return self

    def eval(self) -> "Mlp":
        self.mode = "eval"
        return self

    def state(self) -> dict[str, np.ndarray]:
        out = {f"param.{k}": v for k, v in self._params.items()}
        out.update({f"buffer.{k}": v for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.params = {k[6:]: np.array(v) for k, v in state.items() if k.startswith("param.")}
        for k, v in state.items():
            if k.startswith("buffer."):
                self.buffers[k[7:]] = np.array(v)

    def layer_config(self) -> list[dict]:
        return [spec.__dict__.copy() for spec in self.layers]


@dataclass
class ForwardCache:
    net_id: int
    version: int
    mode: str
    steps: list = field(default_factory=list)


def forward(net: Mlp, batch: np.ndarray, seed=None) -> tuple[np.ndarray, ForwardCache]:
    """Run ``batch`` through ``net``; returns the output and a cache for backward.

    In train mode batchnorm uses batch statistics (and updates the running
    averages) and dropout masks are drawn from ``seed``.
    """
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise DimensionMismatch(f"expected (batch, {net.in_dim}) input, got {x.shape}")
    train = net.mode == "train"
    rng = np.random.default_rng(seed) if train else None
    cache = ForwardCache(id(net), net._version, net.mode)
    p = net.params
    for i, spec in enumerate(net.layers):
        step = {"x": x}
        h = x @ p[f"W{i}"] + p[f"b{i}"]
        if spec.batchnorm:
            if train:
                mean = h.mean(axis=0)
                var = h.var(axis=0)
                n = h.shape[0]
                unbiased = var * n / (n - 1) if n > 1 else var
                net.buffers[f"mean{i}"] = (1 - BN_MOMENTUM) * net.buffers[f"mean{i}"] + BN_MOMENTUM * mean
                net.buffers[f"var{i}"] = (1 - BN_MOMENTUM) * net.buffers[f"var{i}"] + BN_MOMENTUM * unbiased
            else:
                mean = net.buffers[f"mean{i}"]
                var = net.buffers[f"var{i}"]
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (h - mean) * inv_std
            step["xhat"] = xhat
            step["inv_std"] = inv_std
            h = p[f"gamma{i}"] * xhat + p[f"beta{i}"]
        if spec.activation == "relu":
            step["active"] = h > 0
            h = np.where(step["active"], h, 0.0)
        if spec.dropout > 0 and train:
            mask = (rng.random(h.shape) >= spec.dropout) / (1.0 - spec.dropout)
            step["mask"] = mask
            h = h * mask
        cache.steps.append(step)
        x = h
    return x, cache


def backward(net: Mlp, cache: ForwardCache, upstream: np.ndarray) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input."""
    if cache.net_id != id(net) or cache.version != net._version or cache.mode != net.mode:
        raise StaleCache("cache does not belong to the network's current parameters")
    g = np.asarray(upstream, dtype=float)
    p = net.params
    grads: dict[str, np.ndarray] = {}
    for i in range(len(net.layers) - 1, -1, -1):
        spec = net.layers[i]
        step = cache.steps[i]
        if "mask" in step:
            g = g * step["mask"]
        if "active" in step:
            g = np.where(step["active"], g, 0.0)
        if spec.batchnorm:
            xhat = step["xhat"]
            grads[f"gamma{i}"] = (g * xhat).sum(axis=0)
            grads[f"beta{i}"] = g.sum(axis=0)
            dxhat = g * p[f"gamma{i}"]
            if cache.mode == "train":
                n = g.shape[0]
                g = step["inv_std"] / n * (
                    n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
                )
            else:
                g = dxhat * step["inv_std"]
        grads[f"W{i}"] = step["x"].T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        g = g @ p[f"W{i}"].T
    return grads, g


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        zeros = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(lr=lr, m=zeros, v={k: np.zeros_like(v) for k, v in params.items()}, **kw)


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update.  Returns new parameter arrays."""
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        raise ShapeMismatch("parameter, gradient and state names differ")
    for k in params:
        if params[k].shape != grads[k].shape or params[k].shape != state.m[k].shape:
            raise ShapeMismatch(f"{k}: shapes {params[k].shape} / {grads[k].shape} differ")
    state.step += 1
    t = state.step
    correct1 = 1.0 - state.beta1**t
    correct2 = 1.0 - state.beta2**t
    out = {}
    for k, value in params.items():
        g = grads[k]
        state.m[k] = state.beta1 * state.m[k] + (1 - state.beta1) * g
        state.v[k] = state.beta2 * state.v[k] + (1 - state.beta2) * g * g
        m_hat = state.m[k] / correct1
        v_hat = state.v[k] / correct2
        out[k] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= c):
        raise LabelOutOfRange(f"labels must be {n} integers in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / n


def mse(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over every element, with gradient."""
    if pred.shape != target.shape:
        raise ShapeMismatch(f"{pred.shape} != {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def gaussian_kl(mu: np.ndarray, log_var: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """KL(N(mu, exp(log_var)) || N(0, I)) summed over dims, averaged over rows."""
    mu = np.asarray(mu, dtype=float)
    log_var = np.asarray(log_var, dtype=float)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(log_var))):
        raise NonFiniteInput("gaussian_kl received non-finite input")
    if mu.shape != log_var.shape:
        raise ShapeMismatch(f"{mu.shape} != {log_var.shape}")
    n = mu.shape[0]
    var = np.exp(log_var)
    kl = 0.5 * np.sum(mu * mu + var - log_var - 1.0) / n
    return float(kl), mu / n, 0.5 * (var - 1.0) / n
