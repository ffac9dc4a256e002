"""Small ReLU multilayer perceptrons in plain numpy.

Hidden layers use ReLU, the output layer is affine.  Besides evaluation this
module provides reverse-mode gradients, interval bound propagation (IBP) and
the layer-wise l1 Lipschitz bound.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .errors import InvalidInput


@dataclass
class Mlp:
    weights: List[np.ndarray]  # each (out, in)
    biases: List[np.ndarray]   # each (out,)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInput("need one bias per weight matrix and at least one layer")
        self.weights = [np.array(w, dtype=float, ndmin=2) for w in self.weights]
        self.biases = [np.array(b, dtype=float).reshape(-1) for b in self.biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != b.size:
                raise InvalidInput(f"layer {i}: weight rows {w.shape[0]} != bias size {b.size}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise InvalidInput(f"layer {i}: input dim {w.shape[1]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise InvalidInput(f"layer {i}: non-finite parameters")

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Mlp":
        return Mlp([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __call__(self, x):
        return forward(self, x)


def init_mlp(sizes: Sequence[int], rng: np.random.Generator, bias=0.0) -> Mlp:
    """He-initialized network with the given layer sizes, e.g. ``[2, 128, 1]``."""
    ws, bs = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        ws.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)))
        bs.append(np.full(n_out, float(bias)))
    return Mlp(ws, bs)


def constant_mlp(sizes: Sequence[int], c: float) -> Mlp:
    """All weights zero and output bias ``c``: the constant function ``c``."""
    ws = [np.zeros((o, i)) for i, o in zip(sizes[:-1], sizes[1:])]
    bs = [np.zeros(o) for o in sizes[1:]]
    bs[-1][:] = c
    return Mlp(ws, bs)


def _as_batch(net: Mlp, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.in_dim:
        raise InvalidInput(f"input has dimension {x.shape[-1]}, network expects {net.in_dim}")
    return x


def forward(net: Mlp, x) -> np.ndarray:
    h = _as_batch(net, x)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w.T + b
        if i < last:
            h = np.maximum(h, 0.0)
    return h


def forward_cache(net: Mlp, x):
    """Forward pass keeping layer inputs and pre-activations for :func:`backward`."""
    h = _as_batch(net, x)
    inputs, pre = [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    return h, (inputs, pre)


def backward(net: Mlp, cache, grad_out):
    """Pull ``grad_out`` (same shape as the output) back through the network.

    Returns ``(grads, grad_input)`` where ``grads`` alternates weight and bias
    gradients in :meth:`Mlp.params` order.  Leading batch axes are summed.
    The ReLU derivative at exactly 0 is taken as 0.
    """
    inputs, pre = cache
    g = np.asarray(grad_out, dtype=float)
    grads = [None] * (2 * len(net.weights))
    for i in range(len(net.weights) - 1, -1, -1):
        if i < len(net.weights) - 1:
            g = g * (pre[i] > 0.0)
        a = inputs[i].reshape(-1, inputs[i].shape[-1])
        gg = g.reshape(-1, g.shape[-1])
        grads[2 * i] = gg.T @ a
        grads[2 * i + 1] = gg.sum(axis=0)
        g = g @ net.weights[i]
    return grads, g


def gradient(net: Mlp, x, grad_out):
    """Parameter gradients of ``sum(grad_out * forward(net, x))``."""
    _, cache = forward_cache(net, x)
    return backward(net, cache, grad_out)[0]


def ibp_forward(net: Mlp, lo, hi):
    """Interval bound propagation of the box ``[lo, hi]`` (batched)."""
    lo = _as_batch(net, lo)
    hi = _as_batch(net, hi)
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        wp = np.maximum(w, 0.0)
        wn = np.minimum(w, 0.0)
        lo, hi = lo @ wp.T + hi @ wn.T + b, hi @ wp.T + lo @ wn.T + b
        if i < last:
            lo = np.maximum(lo, 0.0)
            hi = np.maximum(hi, 0.0)
    return lo, hi


def l1_operator_norm(w: np.ndarray) -> float:
    """Induced l1 norm: maximum absolute column sum."""
    return float(np.abs(w).sum(axis=0).max())


def lipschitz_l1(net: Mlp) -> float:
    """Global l1 -> l1 Lipschitz bound: product of per-layer induced norms."""
    out = 1.0
    for w in net.weights:
        out *= l1_operator_norm(w)
    return out


def lipschitz_l1_grad(net: Mlp):
    """Subgradient of :func:`lipschitz_l1` w.r.t. the parameters.

    Each layer norm is differentiated through its first maximizing column.
    """
    norms = [l1_operator_norm(w) for w in net.weights]
    grads = []
    for i, w in enumerate(net.weights):
        others = float(np.prod(norms[:i] + norms[i + 1:]))
        col = int(np.argmax(np.abs(w).sum(axis=0)))
        gw = np.zeros_like(w)
        gw[:, col] = np.sign(w[:, col]) * others
        grads += [gw, np.zeros_like(net.biases[i])]
    return grads


class Adam:
    """Adam with bias correction over a list of parameter arrays (in-place)."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
