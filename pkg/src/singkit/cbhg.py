"""CBHG mel-to-linear converter.

Convolution bank (kernels 1..8) -> size-2 max pool -> two projection convs ->
residual -> four highway layers -> bidirectional GRU -> linear to 513 bins.
Targets are normalized log-magnitude spectrograms in [-4, 4].
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import dsp
from .frontend import DEFAULT_BAND, loss_weighted_abs
from .neural import (
    Adam, BiGRU, Conv1d, Highway, Linear, MaxPool1d, Module, load_checkpoint, relu,
    relu_backward, save_checkpoint,
)


class CBHGNet(Module):
    def __init__(self, n_in, n_out, rng, bank_size=8, bank_channels=32, proj_channels=64,
                 highway_dim=64, n_highway=4, gru_hidden=32):
        self.bank = [Conv1d(n_in, bank_channels, k, rng, padding=(k // 2, k - 1 - k // 2))
                     for k in range(1, bank_size + 1)]
        self.pool = MaxPool1d()
        self.proj1 = Conv1d(bank_size * bank_channels, proj_channels, 3, rng)
        self.proj2 = Conv1d(proj_channels, n_in, 3, rng)
        self.pre_highway = Linear(n_in, highway_dim, rng, bias=False)
        self.highways = [Highway(highway_dim, rng) for _ in range(n_highway)]
        self.gru = BiGRU(highway_dim, gru_hidden, rng)
        self.out = Linear(2 * gru_hidden, n_out, rng)

    def forward(self, x):
        outs, bank_c = [], []
        for conv in self.bank:
            y, c = conv.forward(x)
            y, m = relu(y)
            outs.append(y)
            bank_c.append((c, m))
        b = np.concatenate(outs, axis=-1)
        p, cpool = self.pool.forward(b)
        h, cp1 = self.proj1.forward(p)
        h, m1 = relu(h)
        h, cp2 = self.proj2.forward(h)
        r = h + x
        z, cpre = self.pre_highway.forward(r)
        chw = []
        for hw in self.highways:
            z, c = hw.forward(z)
            chw.append(c)
        g, cg = self.gru.forward(z)
        y, co = self.out.forward(g)
        return y, (bank_c, cpool, cp1, m1, cp2, cpre, chw, cg, co)

    def backward(self, dout, cache):
        bank_c, cpool, cp1, m1, cp2, cpre, chw, cg, co = cache
        d = self.gru.backward(self.out.backward(dout, co), cg)
        for hw, c in zip(reversed(self.highways), reversed(chw)):
            d = hw.backward(d, c)
        dr = self.pre_highway.backward(d, cpre)
        dx = dr.copy()
        d = relu_backward(self.proj2.backward(dr, cp2), m1)
        d = self.pool.backward(self.proj1.backward(d, cp1), cpool)
        width = d.shape[-1] // len(self.bank)
        for i, (conv, (c, m)) in enumerate(zip(self.bank, bank_c)):
            dx += conv.backward(relu_backward(d[:, i * width:(i + 1) * width], m), c)
        return dx


class CBHG(BaseEstimator):
    """Mel (``(T, 80)``, normalized) to normalized log-linear (``(T, 513)``)."""

    def __init__(self, steps=500, lr=1e-3, batch_size=4, highway_dim=128, gru_hidden=64,
                 band=DEFAULT_BAND, band_weight=1.0, crop=100, seed=0):
        self.steps = steps
        self.batch_size = batch_size
        self.highway_dim = highway_dim
        self.gru_hidden = gru_hidden
        self.lr = lr
        self.band = band
        self.band_weight = band_weight
        self.crop = crop
        self.seed = seed

    def _init(self):
        self.net_ = CBHGNet(dsp.N_MELS, dsp.N_BINS, np.random.default_rng(self.seed),
                            highway_dim=self.highway_dim, gru_hidden=self.gru_hidden)
        self.optimizer_ = Adam(self.net_.named_parameters(), beta1=0.9, beta2=0.999, eps=1e-9)
        self.loss_curve_ = []

    def loss(self, mel, linear, backward=False):
        pred, cache = self.net_.forward(mel)
        value, grad = loss_weighted_abs(pred, linear, tuple(self.band), self.band_weight)
        if backward:
            self.net_.backward(grad, cache)
        return value

    def fit(self, X, y):
        mels = [np.asarray(m, dtype=float) for m in X]
        lins = [np.asarray(t, dtype=float) for t in y]
        for m, t in zip(mels, lins):
            if m.shape[0] != t.shape[0] or m.shape[1] != dsp.N_MELS or t.shape[1] != dsp.N_BINS:
                raise ValueError(f"paired shapes {m.shape} / {t.shape} are incompatible")
        self._init()
        rng = np.random.default_rng(self.seed + 1)
        for step in range(self.steps):
            self.net_.zero_grad()
            value = 0.0
            for _ in range(self.batch_size):
                k = rng.integers(len(mels))
                start = int(rng.integers(0, max(1, mels[k].shape[0] - self.crop + 1)))
                sl = slice(start, start + self.crop)
                value += self.loss(mels[k][sl], lins[k][sl], backward=True) / self.batch_size
            for p in self.net_.parameters():
                p.grad /= self.batch_size
            self.optimizer_.step(self.lr)
            self.loss_curve_.append((step + 1, value, self.lr))
        return self

    def predict(self, X):
        check_is_fitted(self, "net_")
        return [np.clip(self.net_.forward(np.asarray(m, dtype=float))[0],
                        -dsp.NORM_LIMIT, dsp.NORM_LIMIT) for m in X]

    def arch_config(self):
        return {"highway_dim": self.highway_dim, "gru_hidden": self.gru_hidden}

    def save(self, path):
        check_is_fitted(self, "net_")
        save_checkpoint(path, self.net_.state_dict(), self.arch_config(), "cbhg")

    def load(self, path):
        state, _ = load_checkpoint(path, "cbhg", self.arch_config())
        self._init()
        self.net_.load_state_dict(state)
        return self


def cbhg_mel_to_linear(model, mel):
    return model.predict([mel])[0]
