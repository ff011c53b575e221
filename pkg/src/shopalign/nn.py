"""Minimal batched GRU with manual backpropagation, softmax cross-entropy and Adam.

Arrays are time-major: inputs ``(T, B, n_in)``, hidden states ``(T, B, n_h)``,
masks ``(T, B)`` with 1 for real steps. A masked step carries the previous
hidden state through unchanged.

Cell, with gates stacked as ``[z | r | n]`` along the last axis::

    z = sigmoid(x Wz + h Uz + bz)
    r = sigmoid(x Wr + h Ur + br)
    n = tanh(x Wn + (r * h) Un + bn)
    h' = (1 - z) * n + z * h
"""

from __future__ import annotations

import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_init(n_in: int, n_h: int, rng: np.random.Generator, prefix: str = "") -> dict[str, np.ndarray]:
    s_in, s_h = 1.0 / np.sqrt(n_in), 1.0 / np.sqrt(n_h)
    return {
        prefix + "Wx": rng.uniform(-s_in, s_in, (n_in, 3 * n_h)),
        prefix + "Wh": rng.uniform(-s_h, s_h, (n_h, 3 * n_h)),
        prefix + "b": np.zeros(3 * n_h),
    }


def gru_forward(X, h0, mask, params, prefix: str = ""):
    """Run the cell over ``X``; returns ``(H, cache)`` with ``H[t]`` the state after step t."""
    Wx, Wh, b = params[prefix + "Wx"], params[prefix + "Wh"], params[prefix + "b"]
    T, B, _ = X.shape
    n_h = Wh.shape[0]
    H = np.empty((T, B, n_h))
    gates = np.empty((T, B, 3 * n_h))
    prev = np.empty((T, B, n_h))
    xproj = X @ Wx + b
    h = h0
    for t in range(T):
        prev[t] = h
        a = xproj[t].copy()
        a[:, :2 * n_h] += h @ Wh[:, :2 * n_h]
        z = _sigmoid(a[:, :n_h])
        r = _sigmoid(a[:, n_h:2 * n_h])
        n = np.tanh(a[:, 2 * n_h:] + (r * h) @ Wh[:, 2 * n_h:])
        new = (1.0 - z) * n + z * h
        m = mask[t][:, None]
        h = m * new + (1.0 - m) * h
        gates[t, :, :n_h], gates[t, :, n_h:2 * n_h], gates[t, :, 2 * n_h:] = z, r, n
        H[t] = h
    return H, (X, mask, gates, prev)


def gru_backward(dH, dh_last, cache, params, prefix: str = ""):
    """Gradients given ``dH`` (loss w.r.t. each ``H[t]``) and ``dh_last`` (w.r.t. the final state).

    Returns ``(grads, dX, dh0)``.
    """
    X, mask, gates, prev = cache
    Wx, Wh = params[prefix + "Wx"], params[prefix + "Wh"]
    T, B, _ = X.shape
    n_h = Wh.shape[0]
    Whz, Whn = Wh[:, :2 * n_h], Wh[:, 2 * n_h:]
    dWh = np.zeros_like(Wh)
    da_all = np.empty((T, B, 3 * n_h))
    dh = np.zeros((B, n_h)) if dh_last is None else dh_last.copy()
    for t in range(T - 1, -1, -1):
        dh = dh + dH[t]
        m = mask[t][:, None]
        h = prev[t]
        z, r, n = gates[t, :, :n_h], gates[t, :, n_h:2 * n_h], gates[t, :, 2 * n_h:]
        dnew = dh * m
        dz = dnew * (h - n)
        dn = dnew * (1.0 - z)
        dan = dn * (1.0 - n * n)
        drh = dan @ Whn.T
        dr = drh * h
        daz = dz * z * (1.0 - z)
        dar = dr * r * (1.0 - r)
        da = np.concatenate([daz, dar, dan], axis=1)
        da_all[t] = da
        dWh[:, :2 * n_h] += h.T @ da[:, :2 * n_h]
        dWh[:, 2 * n_h:] += (r * h).T @ dan
        dh = dh * (1.0 - m) + dnew * z + drh * r + da[:, :2 * n_h] @ Whz.T
    flat_da = da_all.reshape(T * B, -1)
    grads = {
        prefix + "Wx": X.reshape(T * B, -1).T @ flat_da,
        prefix + "Wh": dWh,
        prefix + "b": flat_da.sum(0),
    }
    dX = (flat_da @ Wx.T).reshape(X.shape)
    return grads, dX, dh


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_xent(logits, targets, mask):
    """Mean cross-entropy over unmasked positions and its gradient w.r.t. ``logits``."""
    logp = log_softmax(logits)
    count = max(float(mask.sum()), 1.0)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -float((picked * mask).sum()) / count
    d = np.exp(logp)
    np.put_along_axis(d, targets[..., None], np.take_along_axis(d, targets[..., None], axis=-1) - 1.0, axis=-1)
    return loss, d * (mask[..., None] / count)


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-2, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, clip: float = 5.0):
        self.lr, self.beta1, self.beta2, self.eps, self.clip = lr, beta1, beta2, eps, clip
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        scale = self.clip / norm if self.clip and norm > self.clip else 1.0
        self.t += 1
        c1, c2 = 1.0 - self.beta1 ** self.t, 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            g = g * scale
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            params[k] -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def pad(sequences, value: int = 0, max_len: int | None = None):
    """Time-major padded index matrix ``(T, B)`` and mask for integer sequences."""
    T = max(len(s) for s in sequences) if max_len is None else max_len
    out = np.full((T, len(sequences)), value, dtype=np.int64)
    mask = np.zeros((T, len(sequences)))
    for j, s in enumerate(sequences):
        s = list(s)[:T]
        out[:len(s), j] = s
        mask[:len(s), j] = 1.0
    return out, mask
