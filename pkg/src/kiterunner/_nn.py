"""Small fully-connected networks with manual backprop and Adam.

Both trainable models in the package (the diffusion noise predictor and the
per-cell traversability classifier) are tiny, so plain numpy is fast enough
and keeps training bit-reproducible.
"""
from __future__ import annotations

import numpy as np


def silu(x):
    return x / (1.0 + np.exp(-x))


def _silu_grad(x):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


class MLP:
    """Dense network: SiLU on hidden layers, identity on the output layer."""

    def __init__(self, sizes, rng=None, params=None):
        self.sizes = [int(s) for s in sizes]
        if params is not None:
            self.params = [np.array(p, dtype=np.float64) for p in params]
            return
        rng = np.random.default_rng(rng)
        self.params = []
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.params.append(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def forward(self, x, cache=False):
        pre = []
        acts = [x]
        h = x
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i < self.n_layers - 1:
                pre.append(z)
                h = silu(z)
                acts.append(h)
            else:
                h = z
        if cache:
            return h, (pre, acts)
        return h

    def backward(self, cache, grad_out):
        pre, acts = cache
        grads = [None] * len(self.params)
        g = grad_out
        for i in reversed(range(self.n_layers)):
            W = self.params[2 * i]
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0:
                g = (g @ W.T) * _silu_grad(pre[i - 1])
        return grads

    def copy(self):
        return MLP(self.sizes, params=[p.copy() for p in self.params])


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return ([m.copy() for m in self.m], [v.copy() for v in self.v], self.t, self.lr)

    def restore(self, state):
        m, v, t, lr = state
        self.m = [a.copy() for a in m]
        self.v = [a.copy() for a in v]
        self.t = t
        self.lr = lr


def train_monotone(net, objective, run_epoch, epochs, lr, shrink=0.7, grow=1.1, min_lr=1e-7):
    """Epoch loop that only accepts epochs which do not raise ``objective``.

    ``objective(net)`` evaluates a fixed (deterministic) training loss;
    ``run_epoch(net, opt, epoch)`` performs the parameter updates for one
    epoch. Rejected epochs are rolled back and the step size shrinks, so
    the returned per-epoch loss history is non-increasing by construction.
    """
    opt = Adam(net.params, lr=lr)
    best = objective(net)
    history = [best]
    for epoch in range(epochs):
        saved_params = [p.copy() for p in net.params]
        saved_opt = opt.state()
        run_epoch(net, opt, epoch)
        loss = objective(net)
        if np.isfinite(loss) and loss <= best:
            best = loss
            opt.lr = saved_opt[3] * grow
        else:
            for p, s in zip(net.params, saved_params):
                p[...] = s
            opt.restore(saved_opt)
            opt.lr = max(opt.lr * shrink, min_lr)
        history.append(best)
    return history
