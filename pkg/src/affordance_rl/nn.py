"""Small feedforward networks with hand-written backprop, plus Adam."""

from __future__ import annotations

import numpy as np

ACTIVATIONS = ("tanh", "relu")


class MLP:
    """Fully connected network: tanh/relu hidden layers, linear output.

    Parameters live in ``self.params`` as a flat list ``[W0, b0, W1, b1, ...]``
    with ``W`` of shape (fan_in, fan_out).
    """

    def __init__(self, sizes, activation="tanh", rng=None, out_scale=1.0):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.activation = activation
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = []
        n_layers = len(sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            # orthogonal-ish scaled Gaussian init; small output layer
            scale = np.sqrt(1.0 / fan_in) * (out_scale if i == n_layers - 1 else 1.0)
            self.params.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def _act(self, z):
        return np.tanh(z) if self.activation == "tanh" else np.maximum(z, 0.0)

    def _act_grad(self, a, z):
        return 1.0 - a * a if self.activation == "tanh" else (z > 0.0).astype(z.dtype)

    def forward(self, x, cache=False):
        x = np.asarray(x, dtype=np.float64)
        acts = [x]
        pre = []
        n_layers = len(self.params) // 2
        h = x
        for i in range(n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i < n_layers - 1:
                pre.append(z)
                h = self._act(z)
                acts.append(h)
            else:
                h = z
        if cache:
            return h, (acts, pre)
        return h

    def backward(self, grad_out, cache):
        """Gradients of ``sum(grad_out * output)`` w.r.t. params and input."""
        acts, pre = cache
        n_layers = len(self.params) // 2
        grads = [None] * len(self.params)
        g = np.asarray(grad_out, dtype=np.float64)
        for i in reversed(range(n_layers)):
            W = self.params[2 * i]
            h = acts[i]
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ W.T
            if i > 0:
                g = g * self._act_grad(acts[i], pre[i - 1])
        return grads, g

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        i = 0
        for p in self.params:
            p[...] = flat[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "MLP":
        other = MLP.__new__(MLP)
        other.sizes = list(self.sizes)
        other.activation = self.activation
        other.params = [p.copy() for p in self.params]
        return other

    def describe(self) -> dict:
        return {"sizes": self.sizes, "activation": self.activation}


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm):
    norm = global_norm(grads)
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = [g * scale for g in grads]
    return grads, norm


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": [a.copy() for a in self.m], "v": [a.copy() for a in self.v]}
