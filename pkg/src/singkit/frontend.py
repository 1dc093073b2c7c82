"""Encoder / length-regulator / decoder acoustic model.

The model maps phone, pitch and duration streams to frame-level acoustic
features (mel, normalized log-linear, or BFCC+pitch). Pitch can condition
the encoder, the decoder or both.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import dsp
from .neural import (
    Adam, Conv1d, Embedding, LayerNorm, Linear, Module, MultiHeadAttention,
    load_checkpoint, noam_lr, read_manifest, relu, relu_backward, save_checkpoint,
    sinusoidal_positional_encoding,
)
from .score import PHONES, PITCH_MAX

logger = logging.getLogger(__name__)

PLACEMENTS = ("encoder", "decoder", "both")
HEAD_DIMS = {"mel": dsp.N_MELS, "linear": dsp.N_BINS, "bfcc": dsp.N_BARK + 1}
N_PITCH = PITCH_MAX + 1
GAUSSIAN_SIGMA = 1.0


def gaussian_kernel(sigma=GAUSSIAN_SIGMA):
    w = np.exp(-0.5 * (np.array([-1.0, 0.0, 1.0]) / sigma) ** 2)
    return w / w.sum()


@dataclass
class Utterance:
    """One training example: aligned phone-level inputs plus a frame target."""

    phone_ids: np.ndarray
    pitch: np.ndarray
    durations: np.ndarray
    target: np.ndarray
    speaker: int = 0
    linear: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.phone_ids = np.asarray(self.phone_ids, dtype=np.int64)
        self.pitch = np.asarray(self.pitch, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.target = np.asarray(self.target, dtype=float)
        n = len(self.phone_ids)
        if len(self.pitch) != n or len(self.durations) != n:
            raise ValueError(f"stream length mismatch: phones {n}, pitch {len(self.pitch)}, "
                             f"durations {len(self.durations)}")
        if self.target.shape[0] != self.durations.sum():
            raise ValueError(f"target has {self.target.shape[0]} frames but durations sum "
                             f"to {self.durations.sum()}")


# -- sequence plumbing --------------------------------------------------------

def length_regulate(encoded, durations):
    """Repeat row ``i`` of ``encoded`` ``durations[i]`` times."""
    durations = np.asarray(durations, dtype=np.int64)
    if len(durations) != encoded.shape[0]:
        raise ValueError(f"{len(durations)} durations for {encoded.shape[0]} phones")
    if np.any(durations < 0):
        raise ValueError("durations must be non-negative")
    if durations.sum() == 0:
        raise ValueError("durations sum to zero")
    return encoded[np.repeat(np.arange(len(durations)), durations)]


def length_regulate_backward(dout, durations):
    idx = np.repeat(np.arange(len(durations)), durations)
    d = np.zeros((len(durations),) + dout.shape[1:])
    np.add.at(d, idx, dout)
    return d


def boundary_frames(durations):
    """Frame indices that open or close a phone span."""
    durations = np.asarray(durations, dtype=np.int64)
    ends = np.cumsum(durations)
    starts = ends - durations
    keep = durations > 0
    return np.unique(np.concatenate([starts[keep], ends[keep] - 1]))


def smooth_boundaries(expanded, durations, kernel=None):
    """Apply the 3-tap kernel at phone-boundary frames only (replicate edges)."""
    kernel = gaussian_kernel() if kernel is None else np.asarray(kernel, dtype=float)
    T = expanded.shape[0]
    b = boundary_frames(durations)
    prev = np.maximum(b - 1, 0)
    nxt = np.minimum(b + 1, T - 1)
    out = expanded.copy()
    out[b] = kernel[0] * expanded[prev] + kernel[1] * expanded[b] + kernel[2] * expanded[nxt]
    return out


def smooth_boundaries_backward(dout, durations, kernel=None):
    kernel = gaussian_kernel() if kernel is None else np.asarray(kernel, dtype=float)
    T = dout.shape[0]
    b = boundary_frames(durations)
    prev = np.maximum(b - 1, 0)
    nxt = np.minimum(b + 1, T - 1)
    dx = dout.copy()
    dx[b] = 0.0
    np.add.at(dx, prev, kernel[0] * dout[b])
    np.add.at(dx, b, kernel[1] * dout[b])
    np.add.at(dx, nxt, kernel[2] * dout[b])
    return dx


def expand_pitch_to_frames(pitch, durations):
    pitch = np.asarray(pitch, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    if len(pitch) != len(durations):
        raise ValueError(f"{len(pitch)} pitches for {len(durations)} durations")
    return np.repeat(pitch, durations)


# -- losses -------------------------------------------------------------------

def loss_mse(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


DEFAULT_BAND = (0, 192)


def loss_weighted_abs(pred, target, band=DEFAULT_BAND, weight=1.0):
    """Mean absolute error plus ``weight`` times the error on a priority band.

    ``band`` is a half-open range of frequency bins on the last axis.
    """
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    lo, hi = band
    if not 0 <= lo < hi <= pred.shape[-1]:
        raise ValueError(f"empty or invalid priority band {band}")
    diff = pred - target
    sign = np.sign(diff)
    loss = np.mean(np.abs(diff))
    grad = sign / diff.size
    band_diff = diff[..., lo:hi]
    loss += weight * np.mean(np.abs(band_diff))
    grad[..., lo:hi] += weight * sign[..., lo:hi] / band_diff.size
    return float(loss), grad


# -- network blocks -----------------------------------------------------------

class FFTBlock(Module):
    """Self-attention then a two-layer convolution, each with residual + norm."""

    def __init__(self, dim, heads, kernel_size, filter_dim, rng):
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.conv1 = Conv1d(dim, filter_dim, kernel_size, rng)
        self.conv2 = Conv1d(filter_dim, dim, 1, rng)
        self.norm2 = LayerNorm(dim)

    def forward(self, x):
        a, ca = self.attn.forward(x, x, x)
        h1, cn1 = self.norm1.forward(x + a)
        c1, cc1 = self.conv1.forward(h1)
        r, rmask = relu(c1)
        c2, cc2 = self.conv2.forward(r)
        h2, cn2 = self.norm2.forward(h1 + c2)
        return h2, (ca, cn1, cc1, rmask, cc2, cn2)

    def backward(self, dout, cache):
        ca, cn1, cc1, rmask, cc2, cn2 = cache
        d = self.norm2.backward(dout, cn2)
        dh1 = d + self.conv1.backward(relu_backward(self.conv2.backward(d, cc2), rmask), cc1)
        dx = self.norm1.backward(dh1, cn1)
        dq, dk, dv = self.attn.backward(dx, ca)
        return dx + dq + dk + dv


class DurationPredictor(Module):
    def __init__(self, dim, kernel_size, rng):
        self.conv1 = Conv1d(dim, dim, kernel_size, rng)
        self.norm1 = LayerNorm(dim)
        self.conv2 = Conv1d(dim, dim, kernel_size, rng)
        self.norm2 = LayerNorm(dim)
        self.proj = Linear(dim, 1, rng)

    def forward(self, x):
        c1, cc1 = self.conv1.forward(x)
        r1, m1 = relu(c1)
        n1, cn1 = self.norm1.forward(r1)
        c2, cc2 = self.conv2.forward(n1)
        r2, m2 = relu(c2)
        n2, cn2 = self.norm2.forward(r2)
        y, cp = self.proj.forward(n2)
        return y[:, 0], (cc1, m1, cn1, cc2, m2, cn2, cp)

    def backward(self, dout, cache):
        cc1, m1, cn1, cc2, m2, cn2, cp = cache
        d = self.proj.backward(dout[:, None], cp)
        d = relu_backward(self.norm2.backward(d, cn2), m2)
        d = relu_backward(self.norm1.backward(self.conv2.backward(d, cc2), cn1), m1)
        return self.conv1.backward(d, cc1)


class PostNet(Module):
    """Five same-padded convolutions predicting a residual correction."""

    def __init__(self, n_feat, channels, rng, kernel_size=5):
        dims = [n_feat] + [channels] * 4 + [n_feat]
        self.convs = [Conv1d(dims[i], dims[i + 1], kernel_size, rng, zero_init=(i == 4))
                      for i in range(5)]

    def forward(self, x):
        h, caches = x, []
        for i, conv in enumerate(self.convs):
            h, c = conv.forward(h)
            if i < 4:
                h = np.tanh(h)
            caches.append((c, h))
        return x + h, caches

    def backward(self, dout, caches):
        d = dout
        for i in reversed(range(5)):
            c, h = caches[i]
            if i < 4:
                d = d * (1.0 - h ** 2)
            d = self.convs[i].backward(d, c)
        return dout + d


class AcousticModel(Module):
    def __init__(self, cfg, rng):
        D = cfg["model_dim"]
        filt = 2 * D
        self.cfg = dict(cfg)
        self.phone_embedding = Embedding(len(PHONES), D, rng, scale=1.0)
        self.speaker_embedding = Embedding(cfg["speaker_count"], D, rng, scale=1.0)
        placement = cfg["pitch_placement"]
        self.encoder_pitch = (Embedding(N_PITCH, D, rng, scale=1.0)
                              if placement in ("encoder", "both") else None)
        self.decoder_pitch = (Embedding(N_PITCH, D, rng, scale=1.0)
                              if placement in ("decoder", "both") else None)
        self.encoder = [FFTBlock(D, cfg["heads"], cfg["kernel_size"], filt, rng)
                        for _ in range(cfg["layers"])]
        self.duration_predictor = DurationPredictor(D, cfg["kernel_size"], rng)
        self.decoder = [FFTBlock(D, cfg["heads"], cfg["kernel_size"], filt, rng)
                        for _ in range(cfg["layers"])]
        n_out = HEAD_DIMS[cfg["output_head"]]
        self.projection = Linear(D, n_out, rng)
        self.postnet = PostNet(n_out, D, rng) if cfg["use_postnet"] else None

    @property
    def uses_decoder_pitch(self):
        return self.decoder_pitch is not None

    def encode(self, phone_ids, pitch, speaker=0):
        phone_ids = np.asarray(phone_ids)
        if len(pitch) != len(phone_ids):
            raise ValueError(f"pitch stream has {len(pitch)} entries for "
                             f"{len(phone_ids)} phones")
        T = len(phone_ids)
        D = self.cfg["model_dim"]
        x, ce = self.phone_embedding.forward(phone_ids)
        x = x + sinusoidal_positional_encoding(T, D)
        cp = None
        if self.encoder_pitch is not None:
            p, cp = self.encoder_pitch.forward(pitch)
            x = x + p
        s, cs = self.speaker_embedding.forward(np.array([speaker]))
        x = x + s
        caches = []
        for block in self.encoder:
            x, c = block.forward(x)
            caches.append(c)
        return x, (ce, cp, cs, caches)

    def encode_backward(self, dout, cache):
        ce, cp, cs, caches = cache
        d = dout
        for block, c in zip(reversed(self.encoder), reversed(caches)):
            d = block.backward(d, c)
        self.phone_embedding.backward(d, ce)
        if cp is not None:
            self.encoder_pitch.backward(d, cp)
        self.speaker_embedding.backward(d.sum(axis=0, keepdims=True), cs)

    def decode(self, frames, frame_pitch=None, durations=None):
        """Decoder blocks and output projection over frame-rate inputs."""
        T, D = frames.shape
        x = frames + sinusoidal_positional_encoding(T, D)
        cp = None
        if self.decoder_pitch is not None:
            if frame_pitch is None:
                raise ValueError("decoder pitch placement needs a frame pitch track")
            if len(frame_pitch) != T:
                raise ValueError(f"frame pitch has {len(frame_pitch)} frames, expected {T}")
            p, cp = self.decoder_pitch.forward(frame_pitch)
            if durations is not None:
                p = smooth_boundaries(p, durations)
            x = x + p
        caches = []
        for block in self.decoder:
            x, c = block.forward(x)
            caches.append(c)
        y, cproj = self.projection.forward(x)
        out, cpost = y, None
        if self.postnet is not None:
            out, cpost = self.postnet.forward(y)
        return y, out, (cp, durations, caches, cproj, cpost)

    def decode_backward(self, dy, dout, cache):
        cp, durations, caches, cproj, cpost = cache
        if self.postnet is not None:
            dy = dy + self.postnet.backward(dout, cpost)
        d = self.projection.backward(dy, cproj)
        for block, c in zip(reversed(self.decoder), reversed(caches)):
            d = block.backward(d, c)
        if cp is not None:
            dp = d if durations is None else smooth_boundaries_backward(d, durations)
            self.decoder_pitch.backward(dp, cp)
        return d

    def forward_train(self, utt):
        enc, cenc = self.encode(utt.phone_ids, utt.pitch, utt.speaker)
        logdur, cdur = self.duration_predictor.forward(enc)
        frames = smooth_boundaries(length_regulate(enc, utt.durations), utt.durations)
        frame_pitch = expand_pitch_to_frames(utt.pitch, utt.durations)
        y, out, cdec = self.decode(frames, frame_pitch, utt.durations)
        return (logdur, y, out), (cenc, cdur, cdec)

    def backward_train(self, dlogdur, dy, dout, cache):
        cenc, cdur, cdec = cache
        durations = cdec[1]
        dframes = self.decode_backward(dy, dout, cdec)
        denc = length_regulate_backward(smooth_boundaries_backward(dframes, durations), durations)
        denc = denc + self.duration_predictor.backward(dlogdur, cdur)
        self.encode_backward(denc, cenc)


def durations_from_log(logdur):
    return np.maximum(1, np.round(np.expm1(logdur))).astype(np.int64)


# -- estimator ----------------------------------------------------------------

ARCH_KEYS = ("layers", "model_dim", "heads", "kernel_size", "pitch_placement",
             "output_head", "use_postnet", "use_cbhg", "speaker_count")


class FrontEnd(BaseEstimator):
    """Score-to-feature acoustic model with an sklearn-style interface.

    ``fit`` takes a list of :class:`Utterance`; ``predict`` takes phone-level
    inputs and returns frame-level features.
    """

    def __init__(self, layers=2, model_dim=64, heads=2, kernel_size=3,
                 pitch_placement="encoder", output_head="mel", use_postnet=False,
                 use_cbhg=False, speaker_count=1, steps=2000, warmup=400, lr_scale=0.3,
                 batch_size=4, duration_weight=1.0, band=DEFAULT_BAND, band_weight=1.0,
                 seed=0, cbhg_steps=500, log_every=0):
        self.layers = layers
        self.model_dim = model_dim
        self.heads = heads
        self.kernel_size = kernel_size
        self.pitch_placement = pitch_placement
        self.output_head = output_head
        self.use_postnet = use_postnet
        self.use_cbhg = use_cbhg
        self.speaker_count = speaker_count
        self.steps = steps
        self.warmup = warmup
        self.lr_scale = lr_scale
        self.batch_size = batch_size
        self.duration_weight = duration_weight
        self.band = band
        self.band_weight = band_weight
        self.seed = seed
        self.cbhg_steps = cbhg_steps
        self.log_every = log_every

    def arch_config(self):
        cfg = {k: getattr(self, k) for k in ARCH_KEYS}
        if cfg["pitch_placement"] not in PLACEMENTS:
            raise ValueError(f"pitch_placement must be one of {PLACEMENTS}")
        if cfg["output_head"] not in HEAD_DIMS:
            raise ValueError(f"output_head must be one of {tuple(HEAD_DIMS)}")
        if cfg["model_dim"] % cfg["heads"]:
            raise ValueError("model_dim must be divisible by heads")
        if cfg["use_postnet"] and cfg["output_head"] != "mel":
            raise ValueError("the post-net refines mel output only")
        if cfg["use_cbhg"] and cfg["output_head"] != "mel":
            raise ValueError("the CBHG head converts mel output only")
        return cfg

    def _init_model(self):
        self.model_ = AcousticModel(self.arch_config(), np.random.default_rng(self.seed))
        self.optimizer_ = Adam(self.model_.named_parameters(), beta1=0.9, beta2=0.98, eps=1e-9)
        self.loss_curve_ = []

    def _feature_loss(self, pred, target):
        if self.output_head == "linear":
            return loss_weighted_abs(pred, target, tuple(self.band), self.band_weight)
        return loss_mse(pred, target)

    def _utterance_loss(self, utt, backward=True, scale=1.0):
        model = self.model_
        (logdur, y, out), cache = model.forward_train(utt)
        feat_loss, dy = self._feature_loss(y, utt.target)
        dout = np.zeros_like(out)
        post_loss = 0.0
        if model.postnet is not None:
            post_loss, dout = self._feature_loss(out, utt.target)
        dur_target = np.log1p(utt.durations.astype(float))
        dur_loss, dlog = loss_mse(logdur, dur_target)
        total = feat_loss + post_loss + self.duration_weight * dur_loss
        if backward:
            model.backward_train(scale * self.duration_weight * dlog, scale * dy,
                                 scale * dout, cache)
        return {"loss": total, "feature": feat_loss, "postnet": post_loss,
                "duration": dur_loss}

    def loss(self, batch):
        """Mean losses over ``batch`` without touching gradients or weights."""
        parts = [self._utterance_loss(u, backward=False) for u in batch]
        return {k: float(np.mean([p[k] for p in parts])) for k in parts[0]}

    def train_step(self, batch, batch_id=None):
        """One teacher-forced Adam step on ``batch``; returns mean losses."""
        if not hasattr(self, "model_"):
            self._init_model()
        self.model_.zero_grad()
        scale = 1.0 / len(batch)
        parts = [self._utterance_loss(u, scale=scale) for u in batch]
        losses = {k: float(np.mean([p[k] for p in parts])) for k in parts[0]}
        if not np.isfinite(losses["loss"]):
            raise FloatingPointError(f"non-finite loss on batch {batch_id}")
        step = self.optimizer_.step_count + 1
        lr = self.lr_scale * noam_lr(step, self.model_dim, self.warmup)
        self.optimizer_.step(lr)
        losses["lr"] = lr
        losses["step"] = step
        self.loss_curve_.append((step, losses["loss"], lr))
        return losses

    def fit(self, X, y=None):
        utts = list(X)
        if not utts:
            raise ValueError("no training utterances")
        for u in utts:
            if u.target.shape[1] != HEAD_DIMS[self.output_head]:
                raise ValueError(f"target has {u.target.shape[1]} columns, "
                                 f"{self.output_head} head needs {HEAD_DIMS[self.output_head]}")
        self._init_model()
        order_rng = np.random.default_rng(self.seed + 1)
        bs = min(self.batch_size, len(utts))
        order = []
        for step in range(self.steps):
            if len(order) < bs:
                order.extend(order_rng.permutation(len(utts)).tolist())
            batch_idx, order = order[:bs], order[bs:]
            losses = self.train_step([utts[i] for i in batch_idx], batch_id=step)
            if self.log_every and (step + 1) % self.log_every == 0:
                logger.info("step %d loss %.5f lr %.2e", losses["step"], losses["loss"],
                            losses["lr"])
        if self.use_cbhg:
            from .cbhg import CBHG
            pairs = [u for u in utts if u.linear is not None]
            if not pairs:
                raise ValueError("use_cbhg needs utterances with linear targets")
            self.cbhg_ = CBHG(steps=self.cbhg_steps, seed=self.seed).fit(
                [u.target for u in pairs], [u.linear for u in pairs])
        return self

    def encode(self, phone_ids, pitch, speaker=0):
        check_is_fitted(self, "model_")
        return self.model_.encode(phone_ids, pitch, speaker)[0]

    def predict_durations(self, phone_ids, pitch, speaker=0):
        check_is_fitted(self, "model_")
        enc = self.encode(phone_ids, pitch, speaker)
        return durations_from_log(self.model_.duration_predictor.forward(enc)[0])

    def synthesize(self, phone_ids, pitch, speaker=0, durations=None):
        """Full inference.

        Returns ``(features, frame_pitch, durations)``; ``durations`` are
        predicted unless given. Mel output is clamped to [-4, 4]; with
        ``use_cbhg`` the CBHG head's normalized log-linear output is returned.
        """
        check_is_fitted(self, "model_")
        model = self.model_
        enc, _ = model.encode(phone_ids, pitch, speaker)
        if durations is None:
            durations = durations_from_log(model.duration_predictor.forward(enc)[0])
        durations = np.asarray(durations, dtype=np.int64)
        frames = smooth_boundaries(length_regulate(enc, durations), durations)
        frame_pitch = expand_pitch_to_frames(pitch, durations)
        _, out, _ = model.decode(frames, frame_pitch, durations)
        if self.output_head == "mel":
            out = np.clip(out, -dsp.NORM_LIMIT, dsp.NORM_LIMIT)
            if self.use_cbhg:
                out = self.cbhg_.predict([out])[0]
        return out, frame_pitch, durations

    def predict(self, X):
        """Features for each ``(phone_ids, pitch)`` or ``(phone_ids, pitch, durations)``."""
        out = []
        for item in X:
            durations = item[2] if len(item) > 2 else None
            out.append(self.synthesize(item[0], item[1], durations=durations)[0])
        return out

    def _checkpoint_config(self):
        cfg = self.arch_config()
        if self.use_cbhg:
            from .cbhg import CBHG
            cfg["cbhg"] = CBHG(seed=self.seed).arch_config()
        return cfg

    def save(self, path):
        check_is_fitted(self, "model_")
        state = self.model_.state_dict()
        if self.use_cbhg:
            check_is_fitted(self, "cbhg_")
            state.update({f"cbhg/{k}": v for k, v in self.cbhg_.net_.state_dict().items()})
        save_checkpoint(path, state, self._checkpoint_config(), "frontend")

    @classmethod
    def from_checkpoint(cls, path):
        """Rebuild an estimator from the architecture stored in ``path``."""
        cfg = read_manifest(path)["config"]
        return cls(**{k: cfg[k] for k in ARCH_KEYS}).load(path)

    def load(self, path):
        state, _ = load_checkpoint(path, "frontend", self._checkpoint_config())
        self._init_model()
        self.model_.load_state_dict({k: v for k, v in state.items()
                                     if not k.startswith("cbhg/")})
        if self.use_cbhg:
            from .cbhg import CBHG
            self.cbhg_ = CBHG(seed=self.seed)
            self.cbhg_._init()
            self.cbhg_.net_.load_state_dict({k[5:]: v for k, v in state.items()
                                             if k.startswith("cbhg/")})
        return self
