"""Layers with explicit forward/backward passes on float64 numpy arrays.

Every ``forward`` returns ``(output, cache)`` and keeps no state on the
module, so frozen models are reentrant. ``backward(dout, cache)`` returns the
input gradient(s) and accumulates parameter gradients into ``Parameter.grad``.
Time is the second-to-last axis of sequence inputs.
"""
from __future__ import annotations

import numpy as np


class Parameter:
    def __init__(self, value, trainable=True):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.trainable = trainable

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter(shape={self.value.shape})"


class Module:
    """Container that discovers parameters and submodules by attribute."""

    def named_parameters(self, prefix=""):
        out = []
        for name, attr in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(attr, Parameter):
                out.append((full, attr))
            elif isinstance(attr, Module):
                out.extend(attr.named_parameters(full + "."))
            elif isinstance(attr, (list, tuple)):
                for i, item in enumerate(attr):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def state_dict(self):
        return {n: p.value.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise KeyError(f"parameter set mismatch: {missing[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.value.shape}")
            p.value[...] = value


def _glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# -- elementwise activations ------------------------------------------------

def relu(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    z = x - np.max(x, axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(dout, probs, axis=-1):
    return probs * (dout - np.sum(dout * probs, axis=axis, keepdims=True))


# -- layers -----------------------------------------------------------------

class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, zero_init=False):
        w = np.zeros((n_in, n_out)) if zero_init else _glorot(rng, n_in, n_out, (n_in, n_out))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        y = x @ self.weight.value
        if self.bias is not None:
            y = y + self.bias.value
        return y, x

    def backward(self, dout, x):
        n_in = x.shape[-1]
        self.weight.grad += x.reshape(-1, n_in).T @ dout.reshape(-1, dout.shape[-1])
        if self.bias is not None:
            self.bias.grad += dout.reshape(-1, dout.shape[-1]).sum(axis=0)
        return dout @ self.weight.value.T


class Embedding(Module):
    def __init__(self, n_symbols, dim, rng, scale=None):
        scale = dim ** -0.5 if scale is None else scale
        self.table = Parameter(rng.normal(0.0, scale, size=(n_symbols, dim)))

    def forward(self, ids):
        return embedding_lookup(self.table.value, ids), np.asarray(ids)

    def backward(self, dout, ids):
        np.add.at(self.table.grad, ids, dout)


def embedding_lookup(table, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    return table[ids]


def sinusoidal_positional_encoding(length, dim):
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dim, got {dim}")
    pos = np.arange(length)[:, None]
    rate = 10000.0 ** (np.arange(0, dim, 2) / dim)
    pe = np.empty((length, dim))
    pe[:, 0::2] = np.sin(pos / rate)
    pe[:, 1::2] = np.cos(pos / rate)
    return pe


class Conv1d(Module):
    """1-D convolution over the time axis with kernel shape ``(K, C_in, C_out)``.

    ``padding`` is ``"same"`` (odd K only), ``"causal"``, or an explicit
    ``(left, right)`` pair.
    """

    def __init__(self, n_in, n_out, kernel_size, rng, padding="same", dilation=1,
                 bias=True, zero_init=False):
        if padding == "same" and kernel_size % 2 == 0:
            raise ValueError(f"same padding needs an odd kernel, got {kernel_size}")
        span = (kernel_size - 1) * dilation
        if padding == "same":
            self.pad = (span // 2, span // 2)
        elif padding == "causal":
            self.pad = (span, 0)
        else:
            self.pad = tuple(padding)
            if sum(self.pad) != span:
                raise ValueError(f"explicit padding {self.pad} must total {span}")
        self.dilation = dilation
        shape = (kernel_size, n_in, n_out)
        w = np.zeros(shape) if zero_init else _glorot(rng, kernel_size * n_in, n_out, shape)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    def _padded(self, x):
        widths = [(0, 0)] * (x.ndim - 2) + [self.pad, (0, 0)]
        return np.pad(x, widths)

    def forward(self, x):
        xp = self._padded(x)
        T = x.shape[-2]
        w = self.weight.value
        y = sum(xp[..., k * self.dilation:k * self.dilation + T, :] @ w[k]
                for k in range(w.shape[0]))
        if self.bias is not None:
            y = y + self.bias.value
        return y, xp

    def backward(self, dout, xp):
        w = self.weight.value
        T = dout.shape[-2]
        dxp = np.zeros_like(xp)
        d2 = dout.reshape(-1, dout.shape[-1])
        for k in range(w.shape[0]):
            sl = slice(k * self.dilation, k * self.dilation + T)
            xk = xp[..., sl, :]
            self.weight.grad[k] += xk.reshape(-1, xk.shape[-1]).T @ d2
            dxp[..., sl, :] += dout @ w[k].T
        if self.bias is not None:
            self.bias.grad += d2.sum(axis=0)
        left, right = self.pad
        return dxp[..., left:dxp.shape[-2] - right, :]


LN_EPS = 1e-5


def layer_norm(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain + bias


class LayerNorm(Module):
    def __init__(self, dim):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + LN_EPS)
        xhat = xc * inv
        return xhat * self.gain.value + self.bias.value, (xhat, inv)

    def backward(self, dout, cache):
        xhat, inv = cache
        D = xhat.shape[-1]
        self.gain.grad += (dout * xhat).reshape(-1, D).sum(axis=0)
        self.bias.grad += dout.reshape(-1, D).sum(axis=0)
        g = dout * self.gain.value
        return inv * (g - g.mean(axis=-1, keepdims=True)
                      - xhat * (g * xhat).mean(axis=-1, keepdims=True))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``heads`` subspaces.

    ``mask`` is a boolean ``(T_q, T_k)`` array, True where attention is
    forbidden.
    """

    def __init__(self, dim, heads, rng):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        # a key bias only shifts each query's scores uniformly; softmax ignores it
        self.k = Linear(dim, dim, rng, bias=False)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x):
        T, D = x.shape
        return x.reshape(T, self.heads, D // self.heads).transpose(1, 0, 2)

    def forward(self, query, key, value, mask=None):
        if query.shape[-1] != key.shape[-1] or key.shape[0] != value.shape[0]:
            raise ValueError(f"attention shape mismatch: q{query.shape} k{key.shape} "
                             f"v{value.shape}")
        q, cq = self.q.forward(query)
        k, ck = self.k.forward(key)
        v, cv = self.v.forward(value)
        qh, kh, vh = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / np.sqrt(qh.shape[-1])
        scores = qh @ kh.transpose(0, 2, 1) * scale
        if mask is not None:
            if np.any(np.all(mask, axis=-1)):
                raise ValueError("mask blocks every key for some query")
            scores = np.where(mask[None], -np.inf, scores)
        attn = softmax(scores)
        ctx = (attn @ vh).transpose(1, 0, 2).reshape(query.shape[0], -1)
        y, co = self.out.forward(ctx)
        return y, (cq, ck, cv, co, qh, kh, vh, attn, scale)

    def backward(self, dout, cache):
        cq, ck, cv, co, qh, kh, vh, attn, scale = cache
        dctx = self.out.backward(dout, co)
        T = dctx.shape[0]
        dctx_h = self._split(dctx)
        dattn = dctx_h @ vh.transpose(0, 2, 1)
        dvh = attn.transpose(0, 2, 1) @ dctx_h
        dscores = softmax_backward(dattn, attn) * scale
        dqh = dscores @ kh
        dkh = dscores.transpose(0, 2, 1) @ qh
        merge = lambda h: h.transpose(1, 0, 2).reshape(h.shape[1], -1)
        dq = self.q.backward(merge(dqh), cq)
        dk = self.k.backward(merge(dkh), ck)
        dv = self.v.backward(merge(dvh), cv)
        assert dq.shape[0] == T
        return dq, dk, dv


class MaxPool1d(Module):
    """Size-2, stride-1 max pooling that preserves sequence length."""

    def forward(self, x):
        nxt = np.concatenate([x[1:], x[-1:]], axis=0)
        take_next = nxt > x
        return np.where(take_next, nxt, x), take_next

    def backward(self, dout, take_next):
        dx = np.where(take_next, 0.0, dout)
        shifted = np.where(take_next, dout, 0.0)
        dx[1:] += shifted[:-1]
        dx[-1] += shifted[-1]
        return dx


class Highway(Module):
    def __init__(self, dim, rng):
        self.h = Linear(dim, dim, rng)
        self.t = Linear(dim, dim, rng)
        self.t.bias.value[:] = -1.0

    def forward(self, x):
        hp, ch = self.h.forward(x)
        h, hmask = relu(hp)
        tp, ct = self.t.forward(x)
        t = sigmoid(tp)
        return h * t + x * (1.0 - t), (x, h, hmask, t, ch, ct)

    def backward(self, dout, cache):
        x, h, hmask, t, ch, ct = cache
        dh = dout * t
        dt = dout * (h - x)
        dx = dout * (1.0 - t)
        dx = dx + self.h.backward(relu_backward(dh, hmask), ch)
        dx = dx + self.t.backward(dt * t * (1.0 - t), ct)
        return dx


class GRU(Module):
    """Single-direction GRU over a ``(T, n_in)`` sequence, zero initial state."""

    def __init__(self, n_in, hidden, rng):
        self.hidden = hidden
        self.w_in = Parameter(_glorot(rng, n_in, 3 * hidden, (n_in, 3 * hidden)))
        self.w_hid = Parameter(_glorot(rng, hidden, 3 * hidden, (hidden, 3 * hidden)))
        self.b_in = Parameter(np.zeros(3 * hidden))
        self.b_hid = Parameter(np.zeros(3 * hidden))

    def forward(self, x):
        H = self.hidden
        xp = x @ self.w_in.value + self.b_in.value
        T = x.shape[0]
        hs = np.zeros((T + 1, H))
        gates = np.zeros((T, 4, H))  # r, z, n, hidden-side candidate term
        wh, bh = self.w_hid.value, self.b_hid.value
        for t in range(T):
            hp = hs[t] @ wh + bh
            r = sigmoid(xp[t, :H] + hp[:H])
            z = sigmoid(xp[t, H:2 * H] + hp[H:2 * H])
            n = np.tanh(xp[t, 2 * H:] + r * hp[2 * H:])
            hs[t + 1] = (1.0 - z) * n + z * hs[t]
            gates[t] = r, z, n, hp[2 * H:]
        return hs[1:], (x, hs, gates)

    def backward(self, dout, cache):
        x, hs, gates = cache
        H = self.hidden
        T = x.shape[0]
        wh = self.w_hid.value
        dxp = np.zeros((T, 3 * H))
        dhp_all = np.zeros((T, 3 * H))
        dh = np.zeros(H)
        for t in reversed(range(T)):
            r, z, n, hn = gates[t]
            dh = dh + dout[t]
            dn = dh * (1.0 - z)
            dz = dh * (hs[t] - n)
            dn_pre = dn * (1.0 - n ** 2)
            dr = dn_pre * hn
            dr_pre = dr * r * (1.0 - r)
            dz_pre = dz * z * (1.0 - z)
            dxp[t] = np.concatenate([dr_pre, dz_pre, dn_pre])
            dhp = np.concatenate([dr_pre, dz_pre, dn_pre * r])
            dhp_all[t] = dhp
            dh = dh * z + wh @ dhp
        self.w_in.grad += x.T @ dxp
        self.b_in.grad += dxp.sum(axis=0)
        self.w_hid.grad += hs[:-1].T @ dhp_all
        self.b_hid.grad += dhp_all.sum(axis=0)
        return dxp @ self.w_in.value.T


class BiGRU(Module):
    def __init__(self, n_in, hidden, rng):
        self.fwd = GRU(n_in, hidden, rng)
        self.bwd = GRU(n_in, hidden, rng)

    def forward(self, x):
        yf, cf = self.fwd.forward(x)
        yb, cb = self.bwd.forward(x[::-1])
        return np.concatenate([yf, yb[::-1]], axis=-1), (cf, cb)

    def backward(self, dout, cache):
        cf, cb = cache
        H = self.fwd.hidden
        dx = self.fwd.backward(dout[:, :H], cf)
        dx = dx + self.bwd.backward(dout[::-1, H:], cb)[::-1]
        return dx
