"""Independent oracles shared by the test modules."""

import numpy as np

from ptlf.network import Activation, DenseLayer, Network, Role, backward, forward


def central_diff(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. every entry of x (in place)."""
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-8)
    return float(np.max(np.abs(a - b), initial=0.0) / scale)


def random_net(rng, dims, activations, roles=None) -> Network:
    roles = roles or [Role.BACKBONE] * (len(dims) - 1)
    layers = []
    for i, (din, dout) in enumerate(zip(dims, dims[1:])):
        layers.append(DenseLayer(rng.normal(0, 0.7, (dout, din)), rng.normal(0, 0.3, dout), activations[i], roles[i]))
    return Network(layers)


def naive_forward(net: Network, x) -> np.ndarray:
    """Per-sample loops; no shared code with the library forward."""
    out = []
    for row in np.atleast_2d(x):
        v = list(row)
        for layer in net.layers:
            nxt = []
            for j in range(layer.out_dim):
                s = layer.bias[j]
                for k in range(layer.in_dim):
                    s += layer.weight[j, k] * v[k]
                if layer.activation is Activation.RELU:
                    s = max(s, 0.0)
                elif layer.activation is Activation.TANH:
                    s = float(np.tanh(s))
                nxt.append(s)
            v = nxt
        out.append(v)
    return np.array(out)


def min_abs_preact(net: Network, x) -> float:
    """Distance of any ReLU pre-activation from its kink (FD validity)."""
    v = np.asarray(x, dtype=float)
    low = np.inf
    for layer in net.layers:
        z = v @ layer.weight.T + layer.bias
        if layer.activation is Activation.RELU:
            low = min(low, float(np.min(np.abs(z))))
        v = np.maximum(z, 0) if layer.activation is Activation.RELU else (np.tanh(z) if layer.activation is Activation.TANH else z)
    return low


def flat_params(net: Network):
    for layer in net.layers:
        yield layer.weight
        yield layer.bias


ACTS = [Activation.RELU, Activation.TANH, Activation.IDENTITY]


def linear_probe_loss(net, x, w_out):
    return float(np.sum(forward(net, x, Role.BACKBONE, cache=False) * w_out))


def fd_check(seed: int) -> float:
    """Max relative error of backward vs central differences for one random
    network (skipping draws that put a ReLU input near its kink)."""
    r = np.random.default_rng(seed)
    while True:
        depth = int(r.integers(2, 6))
        dims = [int(d) for d in r.integers(2, 7, size=depth + 1)]
        acts = [ACTS[int(i)] for i in r.integers(0, 3, size=depth)]
        net = random_net(r, dims, acts)
        x = r.standard_normal((int(r.integers(1, 5)), dims[0]))
        if min_abs_preact(net, x) > 1e-3:
            break
    frozen = r.random(depth) < 0.3
    net.set_frozen(frozen)
    w_out = r.standard_normal((len(x), dims[-1]))
    forward(net, x, Role.BACKBONE)
    grads = backward(net, w_out)
    worst = 0.0
    for i, layer in enumerate(net.layers):
        if layer.frozen:
            assert not grads.applied[i]
            continue
        for analytic, param in ((grads.weights[i], layer.weight), (grads.biases[i], layer.bias)):
            numeric = central_diff(lambda: linear_probe_loss(net, x, w_out), param)
            worst = max(worst, rel_err(analytic, numeric))
    return worst
