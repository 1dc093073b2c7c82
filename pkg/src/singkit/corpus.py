"""Synthetic singing corpus: random scores rendered as harmonic tones.

Each phone has a fixed spectral envelope (two formant-like peaks) derived
from its symbol, so timbre depends on the lyric and F0 follows the score.
"""
from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import dsp
from .score import (
    INITIALS, REST_MARKER, SYLLABLES, NoteEvent, Score, note_frames, score_to_inputs,
    ScoreInputs,
    semitone_to_hz,
)

BEAT_CHOICES = (Fraction(1, 2), Fraction(1), Fraction(3, 2), Fraction(2))
FADE = 80


@dataclass(frozen=True)
class CorpusSpec:
    n_utterances: int = 20
    seed: int = 7
    min_seconds: float = 3.0
    max_seconds: float = 8.0
    pitch_low: int = 55
    pitch_high: int = 72
    tempo_low: float = 90.0
    tempo_high: float = 150.0
    rest_probability: float = 0.1
    rolloff: float = 1.0
    vibrato_rate: float = 5.5
    vibrato_depth: float = 0.0
    formant_gain: float = 4.0
    syllables: tuple | None = None
    peak: float = 0.5

    def __post_init__(self):
        if not 3.0 <= self.min_seconds <= self.max_seconds <= 8.0:
            raise ValueError("utterance length bounds must lie within [3, 8] s")
        if self.n_utterances < 1:
            raise ValueError("n_utterances must be >= 1")


def _phone_envelope(phone):
    """Formant centres (Hz) and gain scale for a phone, fixed per symbol."""
    rng = np.random.default_rng(zlib.crc32(phone.encode()))
    f1 = rng.uniform(300, 1000)
    f2 = rng.uniform(1000, 3000)
    return f1, f2


def spectral_envelope(phone, freqs, gain):
    f1, f2 = _phone_envelope(phone)
    env = (1.0 + gain * np.exp(-0.5 * ((freqs - f1) / 120.0) ** 2)
           + 0.6 * gain * np.exp(-0.5 * ((freqs - f2) / 200.0) ** 2))
    return env


def random_score(rng, spec):
    """Draw a score whose rendered length falls within the spec bounds."""
    pool = sorted(spec.syllables or SYLLABLES)
    tempo = float(np.round(rng.uniform(spec.tempo_low, spec.tempo_high)))
    target = rng.uniform(spec.min_seconds, spec.max_seconds)
    notes, seconds = [], 0.0
    while True:
        beats = BEAT_CHOICES[rng.integers(len(BEAT_CHOICES))]
        note_sec = float(beats) * 60.0 / tempo
        if seconds + note_sec > spec.max_seconds:
            if seconds >= spec.min_seconds:
                break
            continue
        if notes and rng.random() < spec.rest_probability and not notes[-1].is_rest:
            notes.append(NoteEvent(REST_MARKER, None, beats))
        else:
            syl = pool[rng.integers(len(pool))]
            pitch = int(rng.integers(spec.pitch_low, spec.pitch_high + 1))
            notes.append(NoteEvent(syl, pitch, beats))
        seconds += note_sec
        if seconds >= target:
            break
    return Score(tempo, tuple(notes))


def render_phones(phones, pitch, durations, spec):
    """Render phone-level streams to audio of exactly ``160 * sum(durations)`` samples."""
    sr = dsp.SAMPLE_RATE
    hop = dsp.HOP_LENGTH
    total = int(np.sum(durations)) * hop
    f0 = np.repeat(np.where(np.asarray(pitch) > 0, semitone_to_hz(pitch), 0.0),
                   np.asarray(durations, dtype=np.int64) * hop)
    t = np.arange(total) / sr
    vib = 2.0 ** (spec.vibrato_depth * np.sin(2 * np.pi * spec.vibrato_rate * t) / 12.0)
    inst = f0 * vib
    phase = 2 * np.pi * np.cumsum(inst) / sr
    out = np.zeros(total)
    pos = 0
    for ph, p, d in zip(phones, pitch, durations):
        n = int(d) * hop
        if p == 0 or n == 0:
            pos += n
            continue
        seg = slice(pos, pos + n)
        base = float(semitone_to_hz(p))
        n_harm = int((sr / 2 - 200) // (base * 2 ** (spec.vibrato_depth / 12)))
        h = np.arange(1, n_harm + 1)
        amps = h ** -spec.rolloff * spectral_envelope(ph, h * base, spec.formant_gain)
        if ph in INITIALS:
            amps = amps * 0.5
        wave = np.sin(np.outer(phase[seg], h)) @ amps
        fade = min(FADE, n // 2)
        ramp = np.ones(n)
        ramp[:fade] = np.linspace(0, 1, fade, endpoint=False)
        ramp[n - fade:] = np.linspace(1, 0, fade + 1)[1:]
        out[seg] = wave * ramp
        pos += n
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= spec.peak / peak
    return out


def render_score(score, spec):
    inputs = score_to_inputs(score)
    return render_phones(inputs.phones, inputs.pitch, inputs.durations, spec), inputs


def generate_synthetic_corpus(spec, out_dir):
    """Write ``wav/``, ``score/`` and ``dur/`` trees; returns the utterance ids."""
    out = Path(out_dir)
    for sub in ("wav", "score", "dur"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    ids = []
    for k in range(spec.n_utterances):
        uid = f"{k:04d}"
        score = random_score(rng, spec)
        audio, inputs = render_score(score, spec)
        dsp.write_wav(out / "wav" / f"{uid}.wav", audio)
        (out / "score" / f"{uid}.json").write_text(score.to_json())
        (out / "dur" / f"{uid}.json").write_text(json.dumps({
            "phones": list(inputs.phones),
            "pitch": inputs.pitch.tolist(),
            "durations": inputs.durations.tolist(),
            "note_frames": note_frames(score),
        }))
        ids.append(uid)
    (out / "corpus.json").write_text(json.dumps(
        {"spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(spec).items()},
         "utterances": ids}, sort_keys=True))
    return ids


def note_f0_errors(audio, inputs):
    """Per sung phone: semitone error of the median estimated F0 over its span."""
    f0 = dsp.estimate_f0(audio, centered=True)
    errs = []
    pos = 0
    for p, d in zip(inputs.pitch, inputs.durations):
        span = f0[pos + 2:pos + d - 2] if d > 6 else np.array([])
        pos += d
        if p == 0 or span.size == 0:
            continue
        voiced = span[span > 0]
        if voiced.size == 0:
            errs.append(np.inf)
            continue
        errs.append(12 * np.log2(np.median(voiced) / semitone_to_hz(p)))
    return np.array(errs)



def load_corpus(corpus_dir, ids=None):
    """Read ``(uid, audio, ScoreInputs)`` triples from a generated corpus."""
    root = Path(corpus_dir)
    if ids is None:
        ids = json.loads((root / "corpus.json").read_text())["utterances"]
    out = []
    for uid in ids:
        audio = dsp.read_wav(root / "wav" / f"{uid}.wav")
        meta = json.loads((root / "dur" / f"{uid}.json").read_text())
        inputs = ScoreInputs(tuple(meta["phones"]), np.array(meta["pitch"], dtype=np.int64),
                             np.array(meta["durations"], dtype=np.int64))
        out.append((uid, audio, inputs))
    return out
