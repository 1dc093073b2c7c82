"""Framing, spectral features, F0 estimation, mu-law codec and WAV I/O.

All audio is 16 kHz mono. Frames are 800 samples (50 ms) with a 160 sample
(10 ms) hop and a 1024-point FFT, giving 513 magnitude bins.
"""
from __future__ import annotations

import json
import warnings
import wave
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import get_window

SAMPLE_RATE = 16000
FRAME_LENGTH = 800
HOP_LENGTH = 160
N_FFT = 1024
N_BINS = N_FFT // 2 + 1
N_MELS = 80
N_BARK = 18
LOG_FLOOR = 1e-5
LOG_CEIL = 1e3
NORM_LIMIT = 4.0
F0_MIN, F0_MAX = 55.0, 1000.0
VOICING_THRESHOLD = 0.3
MU = 255

# Bark-like band centres in Hz (LPCNet-style 18 band layout)
BARK_CENTRES = np.array([0, 200, 400, 600, 800, 1000, 1200, 1400, 1600, 2000,
                         2400, 2800, 3200, 4000, 4800, 5600, 6800, 8000], dtype=float)


class AudioFormatError(ValueError):
    pass


def hann_window():
    return get_window("hann", FRAME_LENGTH, fftbins=True)


def num_frames(n_samples):
    if n_samples < FRAME_LENGTH:
        raise ValueError(f"signal of {n_samples} samples is shorter than one "
                         f"{FRAME_LENGTH}-sample frame")
    return 1 + (n_samples - FRAME_LENGTH) // HOP_LENGTH


def frame_signal(samples, window=True):
    """Slice a signal into overlapping frames, dropping the incomplete tail.

    Returns an array of shape ``(n_frames, 800)``, Hann-windowed unless
    ``window`` is false.
    """
    x = np.asarray(samples, dtype=float)
    n = num_frames(len(x))
    idx = np.arange(FRAME_LENGTH)[None, :] + HOP_LENGTH * np.arange(n)[:, None]
    frames = x[idx]
    if window:
        frames = frames * hann_window()
    return frames


def stft_magnitude(frames):
    return np.abs(np.fft.rfft(frames, n=N_FFT, axis=-1))


def stft(samples):
    return np.fft.rfft(frame_signal(samples), n=N_FFT, axis=-1)


def pad_for_analysis(samples):
    """Pad so frame ``f`` is centred on sample ``160 f + 80``.

    A signal of ``160 F`` samples then yields exactly ``F`` frames, each frame
    covering the hop it is held over when upsampled back to sample rate.
    """
    pad = (FRAME_LENGTH - HOP_LENGTH) // 2
    return np.pad(np.asarray(samples, dtype=float), (pad, pad))


def trim_synthesis(samples):
    pad = (FRAME_LENGTH - HOP_LENGTH) // 2
    return np.asarray(samples)[pad:len(samples) - pad]


def linear_spectrogram(samples):
    """Magnitude spectrogram of a centred-analysis signal, ``(F, 513)``."""
    return stft_magnitude(frame_signal(pad_for_analysis(samples)))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=float) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=float) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def _mel_filterbank():
    freqs = np.arange(N_BINS) * SAMPLE_RATE / N_FFT
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(SAMPLE_RATE / 2), N_MELS + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (centre - lower)
    falling = (upper - freqs) / (upper - centre)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_filterbank():
    """Triangular mel filterbank, shape ``(80, 513)``, peak weight 1."""
    return _mel_filterbank()


@lru_cache(maxsize=None)
def _mel_pinv():
    p = np.linalg.pinv(_mel_filterbank())
    p.setflags(write=False)
    return p


_LOG_LO, _LOG_HI = np.log(LOG_FLOOR), np.log(LOG_CEIL)


def normalize_log(magnitude):
    """Natural log with floor, affinely mapped to [-4, 4] and clamped."""
    logm = np.log(np.maximum(magnitude, LOG_FLOOR))
    scaled = (logm - _LOG_LO) / (_LOG_HI - _LOG_LO) * 2 * NORM_LIMIT - NORM_LIMIT
    return np.clip(scaled, -NORM_LIMIT, NORM_LIMIT)


def denormalize_log(values):
    logm = (np.asarray(values) + NORM_LIMIT) / (2 * NORM_LIMIT) * (_LOG_HI - _LOG_LO) + _LOG_LO
    return np.exp(logm)


def mel_spectrogram(spec):
    spec = check_linear_spectrogram(spec)
    return normalize_log(spec @ _mel_filterbank().T)


def imel_project(mel):
    """Recover a non-negative linear spectrogram estimate from a mel spectrogram."""
    energies = denormalize_log(mel)
    # the log floor stands for silence; remove it before inversion
    energies = np.maximum(energies - LOG_FLOOR, 0.0)
    return np.maximum(energies @ _mel_pinv().T, 0.0)


@lru_cache(maxsize=None)
def _bark_filterbank():
    freqs = np.arange(N_BINS) * SAMPLE_RATE / N_FFT
    fb = np.zeros((N_BARK, N_BINS))
    c = BARK_CENTRES
    for i in range(N_BARK):
        if i > 0:
            m = (freqs >= c[i - 1]) & (freqs <= c[i])
            fb[i, m] = (freqs[m] - c[i - 1]) / (c[i] - c[i - 1])
        if i < N_BARK - 1:
            m = (freqs >= c[i]) & (freqs <= c[i + 1])
            fb[i, m] = np.maximum(fb[i, m], (c[i + 1] - freqs[m]) / (c[i + 1] - c[i]))
    fb.setflags(write=False)
    return fb


def bark_filterbank():
    return _bark_filterbank()


BFCC_LOG_FLOOR = 1e-10


def bfcc_extract(spec):
    """Bark band power -> natural log -> orthonormal DCT-II, 18 coefficients."""
    spec = check_linear_spectrogram(spec)
    energies = (spec ** 2) @ _bark_filterbank().T
    return dct(np.log(np.maximum(energies, BFCC_LOG_FLOOR)), type=2, norm="ortho", axis=-1)


def _nccf(frames, lags):
    n = frames.shape[1] - lags[-1]
    head = frames[:, :n]
    e0 = np.einsum("ij,ij->i", head, head)
    out = np.zeros((frames.shape[0], len(lags)))
    for j, lag in enumerate(lags):
        tail = frames[:, lag:lag + n]
        num = np.einsum("ij,ij->i", head, tail)
        den = np.sqrt(e0 * np.einsum("ij,ij->i", tail, tail))
        out[:, j] = np.where(den > 1e-12, num / np.maximum(den, 1e-300), 0.0)
    return out


def estimate_f0(samples, sample_rate=SAMPLE_RATE, centered=False):
    """Per-frame F0 by normalized cross-correlation peak picking.

    Frames follow :func:`frame_signal` geometry (or the centred analysis
    geometry when ``centered``); unvoiced frames are 0.
    """
    if sample_rate != SAMPLE_RATE:
        raise AudioFormatError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate}")
    x = pad_for_analysis(samples) if centered else np.asarray(samples, dtype=float)
    frames = frame_signal(x, window=False)
    frames = frames - frames.mean(axis=1, keepdims=True)
    lag_min = int(np.floor(SAMPLE_RATE / F0_MAX))
    lag_max = int(np.ceil(SAMPLE_RATE / F0_MIN))
    lags = np.arange(lag_min - 1, lag_max + 2)
    r = _nccf(frames, lags)
    f0 = np.zeros(len(frames))
    for i, row in enumerate(r):
        inner = row[1:-1]
        peaks = np.flatnonzero((inner > row[:-2]) & (inner >= row[2:])) + 1
        if len(peaks) == 0:
            continue
        best = row[peaks].max()
        if best < VOICING_THRESHOLD:
            continue
        # earliest strong peak avoids sub-octave picks
        k = peaks[np.argmax(row[peaks] >= 0.85 * best)]
        a, b, c = row[k - 1], row[k], row[k + 1]
        denom = a - 2 * b + c
        shift = 0.5 * (a - c) / denom if denom < 0 else 0.0
        freq = SAMPLE_RATE / (lags[k] + shift)
        if F0_MIN <= freq <= F0_MAX:
            f0[i] = freq
    return f0


def mu_law_encode(x):
    x = np.asarray(x, dtype=float)
    if np.any(np.abs(x) > 1):
        warnings.warn("mu-law input outside [-1, 1] clamped", stacklevel=2)
        x = np.clip(x, -1.0, 1.0)
    y = np.sign(x) * np.log1p(MU * np.abs(x)) / np.log1p(MU)
    return np.floor((y + 1) / 2 * MU + 0.5).astype(np.int64)


def mu_law_decode(code):
    y = 2 * np.asarray(code, dtype=float) / MU - 1
    return np.sign(y) * np.expm1(np.abs(y) * np.log1p(MU)) / MU


def check_waveform(samples, sample_rate=SAMPLE_RATE):
    if sample_rate != SAMPLE_RATE:
        raise AudioFormatError(f"expected {SAMPLE_RATE} Hz audio, got {sample_rate}")
    x = np.asarray(samples, dtype=float)
    if x.ndim != 1:
        raise AudioFormatError(f"expected mono audio, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise AudioFormatError("waveform contains non-finite samples")
    return x


def check_linear_spectrogram(spec):
    s = np.asarray(spec, dtype=float)
    if s.ndim != 2 or s.shape[1] != N_BINS:
        raise ValueError(f"expected (frames, {N_BINS}) spectrogram, got {s.shape}")
    return s


def read_wav(path):
    """Read 16-bit mono 16 kHz PCM into floats in [-1, 1)."""
    with wave.open(str(path), "rb") as wf:
        if wf.getcomptype() != "NONE":
            raise AudioFormatError(f"{path}: compressed WAV ({wf.getcomptype()}) not supported")
        if wf.getnchannels() != 1:
            raise AudioFormatError(f"{path}: expected mono, got {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise AudioFormatError(f"{path}: expected 16-bit samples, "
                                   f"got {8 * wf.getsampwidth()}-bit")
        if wf.getframerate() != SAMPLE_RATE:
            raise AudioFormatError(f"{path}: expected {SAMPLE_RATE} Hz, "
                                   f"got {wf.getframerate()} Hz")
        raw = wf.readframes(wf.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(float) / 32768.0


def write_wav(path, samples):
    x = check_waveform(samples)
    pcm = np.clip(np.round(x * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(SAMPLE_RATE)
        wf.writeframes(pcm.tobytes())


def save_features(path, features, kind):
    """Write a float32 little-endian dump plus a ``.json`` sidecar."""
    path = Path(path)
    f = np.asarray(features, dtype="<f4")
    if f.ndim != 2:
        raise ValueError("features must be 2-D")
    path.write_bytes(f.tobytes())
    sidecar = {"rows": int(f.shape[0]), "cols": int(f.shape[1]), "kind": kind}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_features(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != meta["rows"] * meta["cols"]:
        raise ValueError(f"{path}: size does not match sidecar {meta}")
    return data.reshape(meta["rows"], meta["cols"]).astype(float), meta["kind"]
