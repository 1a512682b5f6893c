"""Minimal numpy layers with hand-written backward passes.

Every layer keeps ``params`` and ``grads`` dicts with matching keys; the
optimizer walks them in a fixed order. Computations run in float64 so the
finite-difference checks in the tests are meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def sigmoid(x):
    return expit(x)


def glorot(rng, n_in, n_out):
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def orthogonal(rng, n, m):
    a = rng.standard_normal((max(n, m), min(n, m)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return q if n >= m else q.T


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def zero_grad(self):
        # in place: the optimizer holds references to these arrays
        for k, v in self.params.items():
            if k in self.grads:
                self.grads[k].fill(0.0)
            else:
                self.grads[k] = np.zeros_like(v)


class Dense(Layer):
    """Affine map on the last axis."""

    def __init__(self, n_in, n_out, rng):
        super().__init__()
        self.params = {"W": glorot(rng, n_in, n_out), "b": np.zeros(n_out)}
        self.zero_grad()

    def forward(self, x, training=False, rng=None):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        x = self._x.reshape(-1, self._x.shape[-1])
        d = dy.reshape(-1, dy.shape[-1])
        self.grads["W"] += x.T @ d
        self.grads["b"] += d.sum(axis=0)
        return dy @ self.params["W"].T


class Tanh(Layer):
    def forward(self, x, training=False, rng=None):
        self._y = np.tanh(x)
        return self._y

    def backward(self, dy):
        return dy * (1.0 - self._y ** 2)


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        self.rate = rate

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (rng.random(x.shape) < keep) / keep
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class GRU(Layer):
    """Gated recurrent layer over (batch, time, features); returns every hidden state.

    Gates are packed as [update | reset | candidate] in ``W``, ``U`` and ``b``.
    """

    def __init__(self, n_in, n_units, rng):
        super().__init__()
        H = n_units
        self.n_units = H
        U = np.concatenate([orthogonal(rng, H, H) for _ in range(3)], axis=1)
        self.params = {"W": glorot(rng, n_in, 3 * H), "U": U, "b": np.zeros(3 * H)}
        self.zero_grad()

    def forward(self, x, training=False, rng=None):
        B, T, _ = x.shape
        H = self.n_units
        W, U, b = self.params["W"], self.params["U"], self.params["b"]
        x = np.ascontiguousarray(x)
        # one 2-D product for every step keeps numpy on the BLAS path
        xw = (x.reshape(B * T, -1) @ W + b).reshape(B, T, 3 * H)
        Uzr, Un = np.ascontiguousarray(U[:, : 2 * H]), np.ascontiguousarray(U[:, 2 * H:])
        h = np.zeros((B, H))
        hs = np.empty((B, T, H))
        cache = []
        for t in range(T):
            zr = sigmoid(xw[:, t, : 2 * H] + h @ Uzr)
            z, r = zr[:, :H], zr[:, H:]
            rh = r * h
            n = np.tanh(xw[:, t, 2 * H:] + rh @ Un)
            h_new = (1.0 - z) * n + z * h
            cache.append((h, z, r, rh, n))
            h = h_new
            hs[:, t] = h
        self._x, self._cache = x, cache
        return hs

    def backward(self, dhs):
        x, cache = self._x, self._cache
        B, T, D = x.shape
        H = self.n_units
        W, U = self.params["W"], self.params["U"]
        Uzr, Un = np.ascontiguousarray(U[:, : 2 * H]), np.ascontiguousarray(U[:, 2 * H:])
        dW, dU, db = self.grads["W"], self.grads["U"], self.grads["b"]
        dxw_all = np.empty((B, T, 3 * H))
        dh_next = np.zeros((B, H))
        for t in reversed(range(T)):
            h_prev, z, r, rh, n = cache[t]
            dh = dhs[:, t] + dh_next
            dn_pre = dh * (1.0 - z) * (1.0 - n ** 2)
            dz_pre = dh * (h_prev - n) * z * (1.0 - z)
            dh_prev = dh * z
            drh = dn_pre @ Un.T
            dU[:, 2 * H:] += rh.T @ dn_pre
            dr_pre = drh * h_prev * r * (1.0 - r)
            dh_prev += drh * r
            dzr = np.concatenate([dz_pre, dr_pre], axis=1)
            dU[:, : 2 * H] += h_prev.T @ dzr
            dh_prev += dzr @ Uzr.T
            dxw_all[:, t, : 2 * H] = dzr
            dxw_all[:, t, 2 * H:] = dn_pre
            dh_next = dh_prev
        flat = dxw_all.reshape(B * T, 3 * H)
        dW += x.reshape(B * T, D).T @ flat
        db += flat.sum(axis=0)
        return (flat @ W.T).reshape(B, T, D)


class LastStep(Layer):
    def forward(self, x, training=False, rng=None):
        self._shape = x.shape
        return x[:, -1]

    def backward(self, dy):
        out = np.zeros(self._shape)
        out[:, -1] = dy
        return out


class Network:
    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, training=False, rng=None):
        for layer in self.layers:
            x = layer.forward(x, training=training, rng=rng)
        return x

    def backward(self, dy):
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_params(self):
        """(key, param array, grad array) in a fixed order."""
        out = []
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                out.append((f"{i}.{name}", layer.params[name], layer.grads[name]))
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.copy() for k, p, _ in self.named_params()}

    def load_state(self, state):
        for k, p, _ in self.named_params():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p[...] = state[k]


class Adam:
    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-7):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.params = params
        self.m = [np.zeros_like(p) for _, p, _ in params]
        self.v = [np.zeros_like(p) for _, p, _ in params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for (_, p, g), m, v in zip(self.params, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# Losses return (mean loss, gradient w.r.t. the network output)


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, y, w):
    p = softmax(logits)
    n = len(y)
    idx = np.arange(n)
    loss = -np.sum(w * np.log(np.clip(p[idx, y], 1e-300, None))) / n
    d = p.copy()
    d[idx, y] -= 1.0
    return loss, d * (w / n)[:, None]


def sigmoid_bce(logit, y, w):
    z = logit[:, 0]
    # log(1 + exp(-|z|)) form is stable on both tails
    loss_i = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    n = len(y)
    d = (sigmoid(z) - y) * w / n
    return float(np.sum(w * loss_i) / n), d[:, None]


def mse(out, target):
    diff = out - target
    return float(np.sum(diff ** 2) / diff.size), 2.0 * diff / diff.size
