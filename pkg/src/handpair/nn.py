"""Minimal dense-network toolkit: layers with explicit backward passes.

Parameters live in a flat dict[str, np.ndarray] (float64); each layer owns a
name prefix. Forward passes optionally record caches keyed by prefix so the
matching backward pass can accumulate into a grads dict. Everything is
deterministic given the generators passed in; dropout is active only when a
generator is supplied to a training-mode forward.
"""

from __future__ import annotations

import numpy as np


def rng_stream(seed: int, tag: int) -> np.random.Generator:
    """Counter-based generator keyed on (seed, tag); independent per tag."""
    return np.random.Generator(np.random.Philox(key=[seed % 2**64, tag % 2**64]))


# Tag spaces for derived streams (keep disjoint from small step counters).
TAG_INIT = 1 << 62
TAG_SAMPLE = 1 << 61
TAG_DATA = 1 << 60
TAG_SPLIT = 1 << 59
TAG_SURFACE = 1 << 58
TAG_METRIC = 1 << 57
TAG_REG = 1 << 56


class Linear:
    def __init__(self, name: str, d_in: int, d_out: int):
        self.name = name
        self.d_in = d_in
        self.d_out = d_out

    def init(self, params: dict, rng: np.random.Generator,
             bias_scale: float = 0.0) -> None:
        scale = np.sqrt(2.0 / self.d_in)
        params[self.name + ".W"] = rng.normal(0.0, scale, (self.d_in, self.d_out))
        if bias_scale > 0.0:
            params[self.name + ".b"] = rng.normal(0.0, bias_scale, self.d_out)
        else:
            params[self.name + ".b"] = np.zeros(self.d_out)

    def forward(self, params, x, cache=None):
        y = x @ params[self.name + ".W"] + params[self.name + ".b"]
        if cache is not None:
            cache[self.name] = x
        return y

    def backward(self, params, grads, dy, cache):
        x = cache[self.name]
        x2 = x.reshape(-1, self.d_in)
        dy2 = dy.reshape(-1, self.d_out)
        _acc(grads, self.name + ".W", x2.T @ dy2)
        _acc(grads, self.name + ".b", dy2.sum(axis=0))
        return dy @ params[self.name + ".W"].T


class LayerNorm:
    def __init__(self, name: str, d: int, eps: float = 1e-5):
        self.name = name
        self.d = d
        self.eps = eps

    def init(self, params, rng) -> None:
        params[self.name + ".g"] = np.ones(self.d)
        params[self.name + ".b"] = np.zeros(self.d)

    def forward(self, params, x, cache=None):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu) * inv
        if cache is not None:
            cache[self.name] = (xhat, inv)
        return xhat * params[self.name + ".g"] + params[self.name + ".b"]

    def backward(self, params, grads, dy, cache):
        xhat, inv = cache[self.name]
        g = params[self.name + ".g"]
        _acc(grads, self.name + ".g", np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1))))
        _acc(grads, self.name + ".b", np.sum(dy, axis=tuple(range(dy.ndim - 1))))
        dxhat = dy * g
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        return inv * (dxhat - m1 - xhat * m2)


def swish_forward(x, name, cache=None):
    s = 1.0 / (1.0 + np.exp(-x))
    if cache is not None:
        cache[name] = (x, s)
    return x * s


def swish_backward(dy, name, cache):
    x, s = cache[name]
    return dy * (s + x * s * (1.0 - s))


def relu_forward(x, name, cache=None):
    y = np.maximum(x, 0.0)
    if cache is not None:
        cache[name] = x > 0
    return y


def relu_backward(dy, name, cache):
    return dy * cache[name]


def dropout_forward(x, rate, name, cache=None, rng=None):
    """Inverted dropout; identity when no generator is supplied."""
    if rng is None or rate <= 0.0:
        if cache is not None:
            cache[name] = None
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    if cache is not None:
        cache[name] = mask
    return x * mask


def dropout_backward(dy, name, cache):
    mask = cache[name]
    return dy if mask is None else dy * mask


class SelfAttention:
    """Multi-head self-attention over short token sequences (B, S, d)."""

    def __init__(self, name: str, d: int, heads: int):
        assert d % heads == 0
        self.name = name
        self.d = d
        self.h = heads
        self.dh = d // heads
        self.wq = Linear(name + ".q", d, d)
        self.wk = Linear(name + ".k", d, d)
        self.wv = Linear(name + ".v", d, d)
        self.wo = Linear(name + ".o", d, d)

    def init(self, params, rng) -> None:
        for lin in (self.wq, self.wk, self.wv, self.wo):
            lin.init(params, rng)

    def _split(self, x):
        B, S, _ = x.shape
        return x.reshape(B, S, self.h, self.dh).transpose(0, 2, 1, 3)

    def forward(self, params, x, cache=None):
        q = self._split(self.wq.forward(params, x, cache))
        k = self._split(self.wk.forward(params, x, cache))
        v = self._split(self.wv.forward(params, x, cache))
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(self.dh)
        scores -= scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        att = e / e.sum(axis=-1, keepdims=True)
        ctx = att @ v                              # (B,H,S,dh)
        B, H, S, dh = ctx.shape
        merged = ctx.transpose(0, 2, 1, 3).reshape(B, S, self.d)
        if cache is not None:
            cache[self.name] = (q, k, v, att)
        return self.wo.forward(params, merged, cache)

    def backward(self, params, grads, dy, cache):
        q, k, v, att = cache[self.name]
        dmerged = self.wo.backward(params, grads, dy, cache)
        B, S, _ = dmerged.shape
        dctx = dmerged.reshape(B, S, self.h, self.dh).transpose(0, 2, 1, 3)
        datt = dctx @ v.transpose(0, 1, 3, 2)
        dv = att.transpose(0, 1, 3, 2) @ dctx
        dscores = att * (datt - np.sum(datt * att, axis=-1, keepdims=True))
        dscores /= np.sqrt(self.dh)
        dq = dscores @ k
        dk = dscores.transpose(0, 1, 3, 2) @ q
        merge = lambda z: z.transpose(0, 2, 1, 3).reshape(B, S, self.d)  # noqa: E731
        dx = self.wq.backward(params, grads, merge(dq), cache)
        dx += self.wk.backward(params, grads, merge(dk), cache)
        dx += self.wv.backward(params, grads, merge(dv), cache)
        return dx


class TransformerBlock:
    """Post-LN block: residual MHA then residual FFN, dropout on sublayers."""

    def __init__(self, name: str, d: int, heads: int, d_ff: int, drop_rate: float):
        self.name = name
        self.attn = SelfAttention(name + ".attn", d, heads)
        self.ln1 = LayerNorm(name + ".ln1", d)
        self.ff1 = Linear(name + ".ff1", d, d_ff)
        self.ff2 = Linear(name + ".ff2", d_ff, d)
        self.ln2 = LayerNorm(name + ".ln2", d)
        self.drop_rate = drop_rate

    def init(self, params, rng) -> None:
        for part in (self.attn, self.ln1, self.ff1, self.ff2, self.ln2):
            part.init(params, rng)

    def forward(self, params, x, cache=None, rng=None):
        a = self.attn.forward(params, x, cache)
        a = dropout_forward(a, self.drop_rate, self.name + ".d1", cache, rng)
        h = self.ln1.forward(params, x + a, cache)
        f = self.ff1.forward(params, h, cache)
        f = relu_forward(f, self.name + ".relu", cache)
        f = self.ff2.forward(params, f, cache)
        f = dropout_forward(f, self.drop_rate, self.name + ".d2", cache, rng)
        return self.ln2.forward(params, h + f, cache)

    def backward(self, params, grads, dy, cache):
        dhf = self.ln2.backward(params, grads, dy, cache)
        df = dropout_backward(dhf, self.name + ".d2", cache)
        df = self.ff2.backward(params, grads, df, cache)
        df = relu_backward(df, self.name + ".relu", cache)
        dh = dhf + self.ff1.backward(params, grads, df, cache)
        dxa = self.ln1.backward(params, grads, dh, cache)
        da = dropout_backward(dxa, self.name + ".d1", cache)
        return dxa + self.attn.backward(params, grads, da, cache)


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name in sorted(grads):
            g = grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / corr1
            vhat = self.v[name] / corr2
            params[name] -= lr * mhat / (np.sqrt(vhat) + self.eps)


def sinusoidal_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    """Half sine / half cosine with a geometric frequency ladder, base 10000."""
    t = np.asarray(t, dtype=float).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _acc(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] += value
    else:
        grads[name] = value
