"""Target feature extraction shared by training, evaluation and the CLI."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import dsp
from .score import semitone_to_hz

KINDS = ("mel", "linear", "bfcc")


def bfcc_with_pitch(samples):
    """18 BFCC coefficients plus a pitch column (semitones / 12, 0 if unvoiced)."""
    spec = dsp.linear_spectrogram(samples)
    f0 = dsp.estimate_f0(samples, centered=True)[:len(spec)]
    pitch = np.where(f0 > 0, (69 + 12 * np.log2(np.maximum(f0, 1e-9) / 440.0)) / 12, 0.0)
    return np.column_stack([dsp.bfcc_extract(spec), pitch])


def extract(samples, kind):
    """Frame-level features of a 16 kHz signal, one row per 10 ms hop."""
    if kind == "mel":
        return dsp.mel_spectrogram(dsp.linear_spectrogram(samples))
    if kind == "linear":
        return dsp.normalize_log(dsp.linear_spectrogram(samples))
    if kind == "bfcc":
        return bfcc_with_pitch(samples)
    raise ValueError(f"unknown feature kind {kind!r}; expected one of {KINDS}")


def pitch_track_hz(frame_pitch):
    """Frame semitone ids to Hz, rest (0) to unvoiced."""
    p = np.asarray(frame_pitch)
    return np.where(p > 0, semitone_to_hz(p), 0.0)


class FeatureExtractor(BaseEstimator, TransformerMixin):
    """Stateless transformer from waveforms to feature matrices."""

    def __init__(self, kind="mel"):
        self.kind = kind

    def fit(self, X, y=None):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r}")
        return self

    def transform(self, X):
        return [extract(dsp.check_waveform(x), self.kind) for x in X]
