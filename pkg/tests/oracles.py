"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np

from aoalb.neural import LayerSpec, Mlp, backward, forward


def random_config(rng):
    depth = int(rng.integers(1, 5))
    dims = [int(d) for d in rng.integers(2, 11, size=depth + 1)]
    layers = [
        LayerSpec(
            dims[i],
            dims[i + 1],
            batchnorm=bool(rng.random() < 0.5),
            activation="relu" if rng.random() < 0.7 else None,
            dropout=float(rng.uniform(0.1, 0.5)) if rng.random() < 0.4 else 0.0,
        )
        for i in range(depth)
    ]
    return layers, int(rng.integers(3, 9)), bool(rng.random() < 0.25)


def gradient_check(layers, batch, eval_mode, seed, samples=25, h=1e-5, head=None):
    """Compare backward against central differences on randomly chosen entries.

    ``head(out) -> (loss, d loss / d out)`` puts a loss on top of the network;
    without one the loss is a fixed random weighting of the outputs.
    Returns the largest relative error seen (input gradient included).
    """
    rng = np.random.default_rng(seed)
    net = Mlp(layers, seed=seed)
    # non-zero biases keep dropped-out rows off the ReLU kink at exactly 0
    for name in net.params:
        if name.startswith(("gamma", "beta", "b")):
            net.params[name][...] = rng.uniform(0.5, 1.5, net.params[name].shape)
    if eval_mode:
        for name in net.buffers:
            net.buffers[name] = rng.uniform(0.5, 1.5, net.buffers[name].shape)
        net.eval()
    x = rng.standard_normal((batch, layers[0].in_dim))
    weights = rng.standard_normal((batch, layers[-1].out_dim))
    drop_seed = int(rng.integers(2**31))

    if head is None:
        head = lambda out: (float(np.sum(out * weights)), weights)

    def loss():
        out, cache = forward(net, x, seed=drop_seed)
        pattern = [step["active"] for step in cache.steps if "active" in step]
        return head(out)[0], pattern

    def central(arr, idx):
        old = arr[idx]
        arr[idx] = old + h
        up, p_up = loss()
        arr[idx] = old - h
        down, p_down = loss()
        arr[idx] = old
        # a ReLU switching state inside [-h, h] makes the difference meaningless
        smooth = all(np.array_equal(a, b) for a, b in zip(p_up, p_down))
        return (up - down) / (2 * h), smooth, abs(up) + abs(down)

    out, cache = forward(net, x, seed=drop_seed)
    grads, gx = backward(net, cache, head(out)[1])
    names = sorted(net.params)
    worst = 0.0
    checked = 0
    while checked < samples:
        name = names[int(rng.integers(len(names)))]
        arr = net.params[name]
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        numeric, smooth, scale = central(arr, idx)
        if smooth:
            worst = max(worst, _rel(grads[name][idx], numeric, scale))
            checked += 1
    checked = 0
    while checked < 5:
        idx = tuple(int(rng.integers(s)) for s in x.shape)
        numeric, smooth, scale = central(x, idx)
        if smooth:
            worst = max(worst, _rel(gx[idx], numeric, scale))
            checked += 1
    return worst


def _rel(analytic, numeric, loss_scale):
    # the floor keeps exact-zero gradients (bias feeding a train-mode
    # batchnorm) from being judged against finite-difference round-off,
    # which grows with the magnitude of the loss
    floor = 1e-5 * max(1.0, loss_scale)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def naive_forward_eval(net, x):
    """Per-neuron loop evaluation of an eval-mode network."""
    out = []
    for row in x:
        act = list(row)
        for i, spec in enumerate(net.layers):
            w = net.params[f"W{i}"]
            b = net.params[f"b{i}"]
            nxt = []
            for j in range(spec.out_dim):
                s = b[j]
                for k in range(spec.in_dim):
                    s += act[k] * w[k, j]
                if spec.batchnorm:
                    mean = net.buffers[f"mean{i}"][j]
                    var = net.buffers[f"var{i}"][j]
                    s = (s - mean) / np.sqrt(var + 1e-5)
                    s = net.params[f"gamma{i}"][j] * s + net.params[f"beta{i}"][j]
                if spec.activation == "relu":
                    s = max(s, 0.0)
                nxt.append(s)
            act = nxt
        out.append(act)
    return np.array(out)
