"""Objective metrics, MOS aggregation, result tables and image output."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path

import numpy as np
from scipy import stats

METRICS_COLUMNS = ("model", "feature_type", "mel_mse", "pa_percent", "mos_mean", "mos_halfwidth")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Rounded:
    """A full-precision value that displays at a fixed number of decimals."""

    value: float
    places: int

    def __float__(self):
        return float(self.value)

    def __str__(self):
        return format_decimal(self.value, self.places)


def format_decimal(value, places):
    """Round-half-even on the shortest decimal repr of ``value``."""
    q = Decimal(1).scaleb(-places)
    return str(Decimal(repr(float(value))).quantize(q, rounding=ROUND_HALF_EVEN))


def mse_metric(pred, target):
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise EvaluationError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return Rounded(float(np.mean((pred - target) ** 2)), 4)


def pitch_accuracy(ref, pred):
    """Percent of voiced reference frames predicted within half a semitone.

    Tracks are F0 in Hz with 0 for unvoiced frames; the longer one is
    truncated. An unvoiced prediction on a voiced reference frame counts as
    an error.
    """
    ref = np.asarray(ref, dtype=float)
    pred = np.asarray(pred, dtype=float)
    n = min(len(ref), len(pred))
    ref, pred = ref[:n], pred[:n]
    voiced = ref > 0
    if not voiced.any():
        raise EvaluationError("reference track has no voiced frames; PA is undefined")
    r, p = ref[voiced], pred[voiced]
    ok = np.zeros(r.shape, dtype=bool)
    pv = p > 0
    ok[pv] = np.abs(12.0 * np.log2(p[pv] / r[pv])) <= 0.5
    return Rounded(100.0 * ok.sum() / voiced.sum(), 2)


@dataclass(frozen=True)
class MosSample:
    listener: str
    item: str
    score: int

    def __post_init__(self):
        if int(self.score) != self.score or not 1 <= self.score <= 5:
            raise EvaluationError(f"MOS score must be an integer in [1, 5], got {self.score!r}")


@dataclass(frozen=True)
class MosResult:
    mean: float
    halfwidth: float

    def __str__(self):
        return f"{format_decimal(self.mean, 2)}±{format_decimal(self.halfwidth, 2)}"


def mos_aggregate(samples, confidence=0.95):
    """Mean and t-interval half-width over per-item means.

    With a single distinct item the individual scores are the units.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise EvaluationError("need at least 2 MOS samples")
    by_item = {}
    for s in samples:
        by_item.setdefault(s.item, []).append(s.score)
    if len(by_item) >= 2:
        units = np.array([np.mean(v) for v in by_item.values()], dtype=float)
    else:
        units = np.array([s.score for s in samples], dtype=float)
    n = len(units)
    mean = float(units.mean())
    sd = float(units.std(ddof=1))
    half = float(stats.t.ppf(0.5 + confidence / 2, n - 1) * sd / np.sqrt(n)) if sd > 0 else 0.0
    return MosResult(mean, half)


def read_mos_csv(path):
    """Read ``model,listener,item,score`` rows into ``{model: [MosSample]}``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["model"], []).append(
                MosSample(row["listener"], row["item"], int(row["score"])))
    return out


@dataclass
class MetricsReport:
    rows: list
    best: dict

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in self.rows:
            w.writerow([r["model"], r.get("feature_type") or "",
                        _fmt(r.get("mel_mse"), 4), _fmt(r.get("pa_percent"), 2),
                        _fmt(r.get("mos_mean"), 2), _fmt(r.get("mos_halfwidth"), 2)])
        return buf.getvalue()

    def _cell(self, i, key, places):
        text = _fmt(self.rows[i].get(key), places) or "/"
        return f"*{text}*" if i in self.best.get(key, ()) else text

    def _mos_cell(self, i):
        r = self.rows[i]
        if r.get("mos_mean") is None:
            return "/"
        text = f"{_fmt(r['mos_mean'], 2)}±{_fmt(r.get('mos_halfwidth') or 0.0, 2)}"
        return f"*{text}*" if i in self.best.get("mos_mean", ()) else text

    def table2(self):
        """Model / Mel-MSE / PA (%) / MOS."""
        head = ["Model", "Mel-MSE", "PA (%)", "MOS"]
        body = [[r["model"], self._cell(i, "mel_mse", 4), self._cell(i, "pa_percent", 2),
                 self._mos_cell(i)] for i, r in enumerate(self.rows)]
        return _align([head] + body)

    def table6(self):
        """Model / Feature Type / PA (%) / MOS."""
        head = ["Model", "Feature Type", "PA (%)", "MOS"]
        body = [[r["model"], r.get("feature_type") or "/", self._cell(i, "pa_percent", 2),
                 self._mos_cell(i)] for i, r in enumerate(self.rows)]
        return _align([head] + body)


def _fmt(value, places):
    return "" if value is None else format_decimal(value, places)


def _align(rows):
    widths = [max(len(r[c]) for r in rows) for c in range(len(rows[0]))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


_DIRECTION = {"mel_mse": min, "pa_percent": max, "mos_mean": max}


def compare_table(rows):
    """Build a report; ``best`` maps each metric column to the winning row indices.

    Ties share the mark. Comparison uses the displayed (rounded) values.
    """
    rows = [dict(r) for r in rows]
    if not rows:
        raise EvaluationError("compare_table needs at least one row")
    places = {"mel_mse": 4, "pa_percent": 2, "mos_mean": 2}
    best = {}
    for key, pick in _DIRECTION.items():
        vals = {i: Decimal(format_decimal(r[key], places[key]))
                for i, r in enumerate(rows) if r.get(key) is not None}
        if vals:
            target = pick(vals.values())
            best[key] = tuple(i for i, v in vals.items() if v == target)
    return MetricsReport(rows, best)


def _write_pnm(path, magic, image):
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())


def read_pnm(path):
    """Read a binary P5/P6 file written by this module."""
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    magic = parts[0].decode()
    w, h = map(int, parts[1].split())
    pixels = np.frombuffer(parts[3], dtype=np.uint8)
    return pixels.reshape((h, w, 3) if magic == "P6" else (h, w))


def render_spectrogram_image(features, path):
    """Grayscale PGM: time left to right, low frequency at the bottom.

    Intensities are min-max scaled per image; a constant input renders as
    uniform mid-gray (128).
    """
    x = np.asarray(features, dtype=float)
    if x.ndim != 2 or x.size == 0:
        raise EvaluationError("features must be a non-empty (frames, bins) matrix")
    lo, hi = x.min(), x.max()
    if hi > lo:
        img = np.round((x - lo) / (hi - lo) * 255.0)
    else:
        img = np.full(x.shape, 128.0)
    img = img.T[::-1]
    _write_pnm(path, "P5", img)
    return img.astype(np.uint8)


# 3x5 glyphs, rows top to bottom, bits left to right
_FONT = {
    "0": "111101101101111", "1": "010110010010111", "2": "111001111100111",
    "3": "111001111001111", "4": "101101111001001", "5": "111100111001111",
    "6": "111100111101111", "7": "111001010010010", "8": "111101111101111",
    "9": "111101111001111", "A": "010101111101101", "B": "110101110101110",
    "C": "111100100100111", "D": "110101101101110", "E": "111100110100111",
    "F": "111100110100100", "G": "111100101101111", "H": "101101111101101",
    "I": "111010010010111", "J": "001001001101111", "K": "101101110101101",
    "L": "100100100100111", "M": "101111111101101", "N": "110101101101101",
    "O": "111101101101111", "P": "111101111100100", "Q": "111101101111001",
    "R": "110101110101101", "S": "111100111001111", "T": "111010010010010",
    "U": "101101101101111", "V": "101101101101010", "W": "101101111111101",
    "X": "101101010101101", "Y": "101101010010010", "Z": "111001010100111",
    "-": "000000111000000", "_": "000000000000111", ".": "000000000000010",
    "+": "000010111010000", " ": "000000000000000",
}

PALETTE = ((214, 39, 40), (31, 119, 180), (44, 160, 44), (255, 127, 14),
           (148, 103, 189), (140, 86, 75))


def _draw_text(img, x, y, text, color):
    for ch in text.upper():
        glyph = _FONT.get(ch, _FONT[" "])
        for k, bit in enumerate(glyph):
            if bit == "1":
                yy, xx = y + k // 3, x + k % 3
                if 0 <= yy < img.shape[0] and 0 <= xx < img.shape[1]:
                    img[yy, xx] = color
        x += 4


def _draw_line(img, x0, y0, x1, y1, color):
    n = max(abs(x1 - x0), abs(y1 - y0), 1)
    xs = np.round(np.linspace(x0, x1, n + 1)).astype(int)
    ys = np.round(np.linspace(y0, y1, n + 1)).astype(int)
    img[ys, xs] = color


def read_loss_csv(path):
    steps, losses = [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps.append(float(row["step"]))
            losses.append(float(row["loss"]))
    return np.array(steps), np.array(losses)


def render_loss_curve(series, path, width=480, height=320, log_scale=False):
    """Overlay step-vs-loss polylines in a PPM with a legend.

    ``series`` maps a label to a ``loss.csv`` path or to ``(steps, losses)``;
    a bare path is treated as one series named after its parent directory.
    Returns the legend as ``[(label, rgb), ...]``.
    """
    if isinstance(series, (str, Path)):
        series = {Path(series).parent.name or "loss": series}
    curves = {}
    for label, src in series.items():
        steps, losses = read_loss_csv(src) if isinstance(src, (str, Path)) else map(np.asarray, src)
        if len(steps) < 2:
            raise EvaluationError(f"series {label!r} needs at least 2 points")
        curves[label] = (np.asarray(steps, float), np.asarray(losses, float))
    if not curves:
        raise EvaluationError("no loss series given")
    tf = np.log10 if log_scale else (lambda v: v)
    xs = np.concatenate([s for s, _ in curves.values()])
    ys = tf(np.concatenate([v for _, v in curves.values()]))
    x_lo, x_hi = xs.min(), xs.max()
    y_lo, y_hi = ys.min(), ys.max()
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0
    left, right, top, bottom = 30, width - 10, 10, height - 20
    img = np.full((height, width, 3), 255, dtype=np.uint8)
    img[top:bottom + 1, left] = 0
    img[bottom, left:right + 1] = 0
    legend = []
    for k, (label, (s, v)) in enumerate(curves.items()):
        color = PALETTE[k % len(PALETTE)]
        px = np.round(left + (s - x_lo) / max(x_hi - x_lo, 1e-12) * (right - left)).astype(int)
        py = np.round(bottom - (tf(v) - y_lo) / (y_hi - y_lo) * (bottom - top)).astype(int)
        for i in range(len(px) - 1):
            _draw_line(img, px[i], py[i], px[i + 1], py[i + 1], color)
        ly = top + 4 + 8 * k
        img[ly:ly + 5, right - 120:right - 112] = color
        _draw_text(img, right - 108, ly, str(label)[:26], (0, 0, 0))
        legend.append((label, color))
    _write_pnm(path, "P6", img)
    return legend
