"""Griffin-Lim phase reconstruction and a pitch-conditioned WaveNet."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import dsp
from .frontend import N_PITCH, expand_pitch_to_frames
from .neural import (
    Adam, Conv1d, Embedding, Linear, Module, load_checkpoint, log_softmax, read_manifest, relu,
    relu_backward, save_checkpoint, sigmoid, softmax,
)

__all__ = [
    "griffin_lim", "spectral_convergence", "expand_pitch_to_frames", "WaveNetConfig",
    "WaveNetNet", "WaveNetVocoder", "synthesize_waveform", "VALID_PAIRS",
]


# -- Griffin-Lim --------------------------------------------------------------

def istft(spectrum):
    """Least-squares overlap-add inverse of :func:`dsp.stft`."""
    n_frames = spectrum.shape[0]
    win = dsp.hann_window()
    frames = np.fft.irfft(spectrum, n=dsp.N_FFT, axis=-1)[:, :dsp.FRAME_LENGTH] * win
    length = (n_frames - 1) * dsp.HOP_LENGTH + dsp.FRAME_LENGTH
    out = np.zeros(length)
    norm = np.zeros(length)
    for i in range(n_frames):
        s = i * dsp.HOP_LENGTH
        out[s:s + dsp.FRAME_LENGTH] += frames[i]
        norm[s:s + dsp.FRAME_LENGTH] += win ** 2
    return out / np.where(norm > 1e-10, norm, 1.0)


def spectral_convergence(samples, magnitude):
    target = np.linalg.norm(magnitude)
    if target == 0:
        return 0.0
    return float(np.linalg.norm(np.abs(dsp.stft(samples)) - magnitude) / target)


def griffin_lim(magnitude, iters=60, history=None):
    """Reconstruct a waveform of ``(F - 1) * 160 + 800`` samples from magnitudes.

    Starts from zero phase. If ``history`` is a list, the spectral
    convergence after each iteration is appended to it.
    """
    mag = dsp.check_linear_spectrogram(magnitude)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    spectrum = mag.astype(complex)
    for _ in range(iters):
        y = istft(spectrum)
        rebuilt = dsp.stft(y)
        spectrum = mag * np.exp(1j * np.angle(rebuilt))
        if history is not None:
            history.append(spectral_convergence(istft(spectrum), mag))
    return istft(spectrum)


# -- WaveNet ------------------------------------------------------------------

@dataclass(frozen=True)
class WaveNetConfig:
    n_layers: int = 10
    dilation_cycle: int = 10
    residual_channels: int = 32
    skip_channels: int = 64
    kernel_size: int = 2
    levels: int = 256
    feature_dim: int = dsp.N_MELS
    pitch_dim: int = 32
    use_pitch: bool = True

    def __post_init__(self):
        if self.levels != 256:
            raise ValueError("quantization levels must be 256 (8-bit mu-law)")

    @property
    def dilations(self):
        return [2 ** (i % self.dilation_cycle) for i in range(self.n_layers)]

    @property
    def receptive_field(self):
        return 1 + sum((self.kernel_size - 1) * d for d in self.dilations)


class ResidualLayer(Module):
    def __init__(self, cfg, dilation, rng):
        R, S = cfg.residual_channels, cfg.skip_channels
        self.conv = Conv1d(R, 2 * R, cfg.kernel_size, rng, padding="causal", dilation=dilation)
        self.cond_feat = Linear(cfg.feature_dim, 2 * R, rng, bias=False)
        # zero-initialised: a pitch-conditioned net starts identical to an unconditioned one
        self.cond_pitch = (Linear(cfg.pitch_dim, 2 * R, rng, bias=False, zero_init=True)
                           if cfg.use_pitch else None)
        self.res = Linear(R, R, rng)
        self.skip = Linear(R, S, rng)

    def condition(self, feats, pitch_emb):
        """Frame-rate gate condition ``(..., F, 2R)`` (linear, so hold commutes)."""
        c, cf = self.cond_feat.forward(feats)
        cp = None
        if self.cond_pitch is not None:
            p, cp = self.cond_pitch.forward(pitch_emb)
            c = c + p
        return c, (cf, cp)

    def condition_backward(self, dc, cache):
        cf, cp = cache
        dfeat = self.cond_feat.backward(dc, cf)
        dpitch = self.cond_pitch.backward(dc, cp) if cp is not None else None
        return dfeat, dpitch

    def forward(self, x, cond):
        R = x.shape[-1]
        a, cc = self.conv.forward(x)
        a = a + cond
        t = np.tanh(a[..., :R])
        s = sigmoid(a[..., R:])
        z = t * s
        r, cr = self.res.forward(z)
        sk, cs = self.skip.forward(z)
        return x + r, sk, (cc, t, s, cr, cs)

    def backward(self, dx_out, dskip, cache):
        cc, t, s, cr, cs = cache
        dz = self.res.backward(dx_out, cr) + self.skip.backward(dskip, cs)
        da = np.concatenate([dz * s * (1 - t ** 2), dz * t * s * (1 - s)], axis=-1)
        dx = dx_out + self.conv.backward(da, cc)
        return dx, da


class WaveNetNet(Module):
    def __init__(self, cfg, rng, zero_init_output=True):
        self.cfg = cfg
        self.input_embedding = Embedding(cfg.levels, cfg.residual_channels, rng, scale=1.0)
        self.layers = [ResidualLayer(cfg, d, rng) for d in cfg.dilations]
        self.post1 = Linear(cfg.skip_channels, cfg.skip_channels, rng)
        self.post2 = Linear(cfg.skip_channels, cfg.levels, rng, zero_init=zero_init_output)
        # drawn last so the shared weights match the unconditioned variant
        self.pitch_embedding = (Embedding(N_PITCH, cfg.pitch_dim, rng, scale=1.0)
                                if cfg.use_pitch else None)

    def conditions(self, feats, pitch):
        pe, cpe = (self.pitch_embedding.forward(pitch) if self.pitch_embedding is not None
                   else (None, None))
        conds, caches = [], []
        for layer in self.layers:
            c, cc = layer.condition(feats, pe)
            conds.append(c)
            caches.append(cc)
        return conds, (cpe, caches)

    def forward(self, inputs, feats, pitch):
        """Logits for each sample position.

        ``inputs`` are the previous-sample codes, shape ``(..., 160 F)``;
        ``feats`` ``(..., F, feature_dim)`` and ``pitch`` ``(..., F)`` are
        frame-rate and held over 160 samples.
        """
        T = inputs.shape[-1]
        F = feats.shape[-2]
        if T != F * dsp.HOP_LENGTH or pitch.shape[-1] != F:
            raise ValueError(f"length mismatch after upsampling: {T} samples vs {F} frames "
                             f"({pitch.shape[-1]} pitch frames)")
        conds, ccache = self.conditions(feats, pitch)
        x, cin = self.input_embedding.forward(inputs)
        skip = 0.0
        caches = []
        for layer, c in zip(self.layers, conds):
            held = np.repeat(c, dsp.HOP_LENGTH, axis=-2)
            x, sk, cl = layer.forward(x, held)
            skip = skip + sk
            caches.append(cl)
        h1, m1 = relu(skip)
        h2, c1 = self.post1.forward(h1)
        h3, m2 = relu(h2)
        logits, c2 = self.post2.forward(h3)
        return logits, (cin, ccache, caches, m1, c1, m2, c2)

    def backward(self, dlogits, cache):
        cin, (cpe, ccaches), caches, m1, c1, m2, c2 = cache
        d = relu_backward(self.post2.backward(dlogits, c2), m2)
        dskip = relu_backward(self.post1.backward(d, c1), m1)
        dx = np.zeros(dskip.shape[:-1] + (self.cfg.residual_channels,))
        dpe = None
        for layer, cl, cc in zip(reversed(self.layers), reversed(caches), reversed(ccaches)):
            dx, da = layer.backward(dx, dskip, cl)
            shape = da.shape[:-2] + (-1, dsp.HOP_LENGTH, da.shape[-1])
            dc = da.reshape(shape).sum(axis=-2)
            _, dp = layer.condition_backward(dc, cc)
            if dp is not None:
                dpe = dp if dpe is None else dpe + dp
        self.input_embedding.backward(dx, cin)
        if dpe is not None:
            self.pitch_embedding.backward(dpe, cpe)


def shift_inputs(codes, first=128):
    """Previous-sample codes: ``inputs[t] = codes[t - 1]``."""
    codes = np.asarray(codes)
    pad = np.full(codes.shape[:-1] + (1,), first, dtype=codes.dtype)
    return np.concatenate([pad, codes[..., :-1]], axis=-1)


def categorical_nll(logits, targets):
    logp = log_softmax(logits)
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    return nll, np.exp(logp)


SILENCE_MEL = -dsp.NORM_LIMIT


class WaveNetVocoder(BaseEstimator):
    """Mel(+pitch)-conditioned WaveNet over 8-bit mu-law codes.

    ``fit`` takes a list of ``(audio, mel, frame_pitch)`` with
    ``len(audio) == 160 * len(mel)``.
    """

    def __init__(self, n_layers=10, dilation_cycle=10, residual_channels=32,
                 skip_channels=64, pitch_dim=32, use_pitch=True, steps=1000, lr=1e-3,
                 batch_size=4, segment_frames=8, seed=0, warm_start=False):
        self.n_layers = n_layers
        self.dilation_cycle = dilation_cycle
        self.residual_channels = residual_channels
        self.skip_channels = skip_channels
        self.pitch_dim = pitch_dim
        self.use_pitch = use_pitch
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.segment_frames = segment_frames
        self.seed = seed
        self.warm_start = warm_start

    @property
    def config(self):
        return WaveNetConfig(n_layers=self.n_layers, dilation_cycle=self.dilation_cycle,
                             residual_channels=self.residual_channels,
                             skip_channels=self.skip_channels, pitch_dim=self.pitch_dim,
                             use_pitch=self.use_pitch)

    def _init(self):
        self.net_ = WaveNetNet(self.config, np.random.default_rng(self.seed))
        self.optimizer_ = Adam(self.net_.named_parameters(), beta1=0.9, beta2=0.999, eps=1e-9)
        self.loss_curve_ = []
        self.batch_rng_ = np.random.default_rng(self.seed + 1)

    @property
    def context_frames(self):
        return -(-self.config.receptive_field // dsp.HOP_LENGTH)

    def _prepare(self, audio, mel, pitch):
        """Prepend silent context frames so every sample sees a full history."""
        audio = np.asarray(audio, dtype=float)
        mel = np.asarray(mel, dtype=float)
        pitch = np.asarray(pitch, dtype=np.int64)
        F = mel.shape[0]
        if len(audio) != F * dsp.HOP_LENGTH or len(pitch) != F:
            raise ValueError(f"length mismatch after upsampling: {len(audio)} samples, "
                             f"{F} feature frames, {len(pitch)} pitch frames")
        c = self.context_frames
        codes = np.concatenate([np.full(c * dsp.HOP_LENGTH, 128), dsp.mu_law_encode(audio)])
        mel = np.concatenate([np.full((c, mel.shape[1]), SILENCE_MEL), mel])
        pitch = np.concatenate([np.zeros(c, dtype=np.int64), pitch])
        return codes, mel, pitch

    def _segment_batch(self, data, rng):
        c, n = self.context_frames, self.segment_frames
        hop = dsp.HOP_LENGTH
        codes, mels, pitches = [], [], []
        for _ in range(self.batch_size):
            k = rng.integers(len(data))
            cd, mel, pitch = data[k]
            F = mel.shape[0] - c
            f0 = c + int(rng.integers(0, max(1, F - n + 1)))
            lo, hi = f0 - c, min(f0 + n, mel.shape[0])
            seg = cd[lo * hop:hi * hop]
            want = (c + n) * hop
            codes.append(np.pad(seg, (0, want - len(seg)), constant_values=128))
            mels.append(np.pad(mel[lo:hi], ((0, c + n - (hi - lo)), (0, 0)),
                               constant_values=SILENCE_MEL))
            pitches.append(np.pad(pitch[lo:hi], (0, c + n - (hi - lo))))
        return np.stack(codes), np.stack(mels), np.stack(pitches)

    def batch_loss(self, codes, mels, pitches, backward=False, skip_samples=0):
        net = self.net_
        logits, cache = net.forward(shift_inputs(codes), mels, pitches)
        nll, probs = categorical_nll(logits[..., skip_samples:, :], codes[..., skip_samples:])
        value = float(nll.mean())
        if backward:
            grad = np.zeros_like(logits)
            onehot = np.zeros_like(probs)
            np.put_along_axis(onehot, codes[..., skip_samples:, None], 1.0, axis=-1)
            grad[..., skip_samples:, :] = (probs - onehot) / nll.size
            net.backward(grad, cache)
        return value

    def fit(self, X, y=None):
        data = [self._prepare(*item) for item in X]
        if not (self.warm_start and hasattr(self, "net_")):
            self._init()
        rng = self.batch_rng_
        skip = self.context_frames * dsp.HOP_LENGTH
        done = len(self.loss_curve_)
        for step in range(done, done + self.steps):
            codes, mels, pitches = self._segment_batch(data, rng)
            self.net_.zero_grad()
            value = self.batch_loss(codes, mels, pitches, backward=True, skip_samples=skip)
            self.optimizer_.step(self.lr)
            self.loss_curve_.append((step + 1, value, self.lr))
        return self

    def nll(self, audio, mel, pitch):
        """Per-sample negative log-likelihood of ``audio`` (nats)."""
        check_is_fitted(self, "net_")
        codes, m, p = self._prepare(audio, mel, pitch)
        logits, _ = self.net_.forward(shift_inputs(codes), m, p)
        skip = self.context_frames * dsp.HOP_LENGTH
        return categorical_nll(logits[skip:], codes[skip:])[0]

    def generate(self, mel, pitch, seed=0, return_codes=False):
        """Autoregressive sampling at temperature 1; returns ``160 * F`` samples.

        The silent context used in training is replayed first, so sampled
        probabilities equal those of :meth:`nll` on the same codes.
        """
        check_is_fitted(self, "net_")
        net = self.net_
        mel = np.asarray(mel, dtype=float)
        pitch = np.asarray(pitch, dtype=np.int64)
        if len(pitch) != mel.shape[0]:
            raise ValueError(f"{len(pitch)} pitch frames for {mel.shape[0]} feature frames")
        rng = np.random.default_rng(seed)
        n_out = mel.shape[0] * dsp.HOP_LENGTH
        codes, mel, pitch = self._prepare(np.zeros(n_out), mel, pitch)
        n_ctx = len(codes) - n_out
        conds, _ = net.conditions(mel, pitch)
        R = self.residual_channels
        layers = net.layers
        w_prev = [l.conv.weight.value[0] for l in layers]
        w_cur = [l.conv.weight.value[1] for l in layers]
        conv_b = [l.conv.bias.value for l in layers]
        res_w = [(l.res.weight.value, l.res.bias.value) for l in layers]
        skip_w = [(l.skip.weight.value, l.skip.bias.value) for l in layers]
        buffers = [np.zeros((d, R)) for d in self.config.dilations]
        emb = net.input_embedding.table.value
        levels = self.config.levels
        prev = 128
        for t in range(len(codes)):
            f = t // dsp.HOP_LENGTH
            x = emb[prev]
            skip = 0.0
            for i in range(len(layers)):
                buf = buffers[i]
                slot = t % buf.shape[0]
                a = buf[slot] @ w_prev[i] + x @ w_cur[i] + conv_b[i] + conds[i][f]
                buf[slot] = x
                z = np.tanh(a[:R]) * sigmoid(a[R:])
                skip = skip + z @ skip_w[i][0] + skip_w[i][1]
                x = x + z @ res_w[i][0] + res_w[i][1]
            if t < n_ctx:
                prev = int(codes[t])
                continue
            h = np.maximum(skip, 0.0) @ net.post1.weight.value + net.post1.bias.value
            logits = np.maximum(h, 0.0) @ net.post2.weight.value + net.post2.bias.value
            cdf = np.cumsum(softmax(logits))
            prev = min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")),
                       levels - 1)
            codes[t] = prev
        out = codes[n_ctx:]
        return out if return_codes else dsp.mu_law_decode(out)

    def predict(self, X):
        return [self.generate(mel, pitch, seed=self.seed) for mel, pitch in X]

    def save(self, path):
        check_is_fitted(self, "net_")
        save_checkpoint(path, self.net_.state_dict(), asdict(self.config), "wavenet")

    @classmethod
    def from_checkpoint(cls, path):
        cfg = read_manifest(path)["config"]
        keys = ("n_layers", "dilation_cycle", "residual_channels", "skip_channels",
                "pitch_dim", "use_pitch")
        return cls(**{k: cfg[k] for k in keys}).load(path)

    def load(self, path):
        state, _ = load_checkpoint(path, "wavenet", asdict(self.config))
        self._init()
        self.net_.load_state_dict(state)
        return self


# -- dispatch -----------------------------------------------------------------

VALID_PAIRS = {("mel", "imel+gl"), ("mel", "wavenet"), ("linear", "gl")}


def synthesize_waveform(features, head, vocoder, frame_pitch=None, wavenet=None,
                        iters=60, seed=0):
    """Turn frame-level features into ``160 * F`` samples.

    ``head`` is ``"mel"`` (normalized mel) or ``"linear"`` (normalized
    log-linear); ``vocoder`` is ``"imel+gl"``, ``"gl"`` or ``"wavenet"``.
    """
    if (head, vocoder) not in VALID_PAIRS:
        pairs = ", ".join(f"({h}, {v})" for h, v in sorted(VALID_PAIRS))
        raise ValueError(f"unsupported head/vocoder pair ({head}, {vocoder}); "
                         f"valid pairs: {pairs}")
    features = np.asarray(features, dtype=float)
    if vocoder == "wavenet":
        if wavenet is None or frame_pitch is None:
            raise ValueError("the wavenet vocoder needs a trained model and a frame pitch track")
        return wavenet.generate(features, frame_pitch, seed=seed)
    if vocoder == "imel+gl":
        magnitude = dsp.imel_project(features)
    else:
        magnitude = np.maximum(dsp.denormalize_log(features) - dsp.LOG_FLOOR, 0.0)
    y = dsp.trim_synthesis(griffin_lim(magnitude, iters))
    return np.clip(y, -1.0, 1.0)
