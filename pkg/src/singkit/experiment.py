"""Ablation harness: train front-end variants on one corpus and tabulate them.

A run writes everything under ``<out>/<name>/``::

    manifest.json     config hash, input content hashes, timestamps
    status.json       per-variant "ok" or the failure message
    metrics.csv       model,feature_type,mel_mse,pa_percent,mos_mean,mos_halfwidth
    table2.txt        Model / Mel-MSE / PA (%) / MOS
    table6.txt        Model / Feature Type / PA (%) / MOS
    loss_curves.ppm   all training curves overlaid
    <variant>/        frontend.ckpt, loss.csv, spectrogram.pgm, sample.wav
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import load_corpus
from .evaluation import (
    compare_table, mos_aggregate, pitch_accuracy, read_mos_csv, render_loss_curve,
    render_spectrogram_image,
)
from .features import extract
from .frontend import FrontEnd, Utterance
from .neural.checkpoint import config_hash
from .vocoder import WaveNetVocoder, synthesize_waveform

logger = logging.getLogger(__name__)

PRESETS = {
    "placement": [
        {"label": "Decoder only", "pitch_placement": "decoder"},
        {"label": "Encoder only", "pitch_placement": "encoder"},
        {"label": "Both", "pitch_placement": "both"},
    ],
    "vocoder": [
        {"label": "STD + IMel + Griffin-Lim", "vocoder": "imel+gl"},
        {"label": "STD + CBHG + Griffin-Lim", "use_cbhg": True, "vocoder": "gl"},
        {"label": "STD + WaveNet", "vocoder": "wavenet"},
    ],
}

FRONTEND_KEYS = ("layers", "model_dim", "heads", "kernel_size", "pitch_placement",
                 "output_head", "use_postnet", "use_cbhg", "steps", "warmup", "lr_scale",
                 "batch_size", "duration_weight", "cbhg_steps")

DEFAULTS = {
    "out": "runs",
    "seed": 0,
    "train": None,
    "test": 0,
    "frontend": {},
    "wavenet": {},
    "gl_iters": 60,
    "max_eval_frames": None,
    "workers": 1,
    "mos_csv": None,
}


def _slug(label):
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-")


def _sha(path):
    return hashlib.sha1(Path(path).read_bytes()).hexdigest()


def resolve_config(config):
    """Fill defaults and expand a ``sweep`` preset into ``variants``."""
    cfg = {**DEFAULTS, **config}
    if "name" not in cfg or "corpus" not in cfg:
        raise ValueError("experiment config needs 'name' and 'corpus'")
    variants = list(cfg.get("variants") or [])
    if cfg.get("sweep"):
        if cfg["sweep"] not in PRESETS:
            raise ValueError(f"unknown sweep {cfg['sweep']!r}; expected one of {sorted(PRESETS)}")
        variants = PRESETS[cfg["sweep"]] + variants
    if not variants:
        raise ValueError("experiment config has no variants")
    cfg["variants"] = variants
    return cfg


def _feature_type(variant):
    if variant.get("use_cbhg") or variant.get("output_head") == "linear":
        return "Linear"
    return {"mel": "Mel", "bfcc": "BFCC, Pitch"}[variant.get("output_head", "mel")]


def _synth_pair(variant):
    """(feature head fed to the vocoder, vocoder name)."""
    vocoder = variant.get("vocoder", "imel+gl")
    head = "linear" if _feature_type(variant) == "Linear" else variant.get("output_head", "mel")
    return head, vocoder


def _load_data(cfg):
    items = load_corpus(cfg["corpus"])
    n_train = cfg["train"] if cfg["train"] is not None else len(items) - cfg["test"]
    train = items[:n_train]
    test = items[n_train:n_train + cfg["test"]] if cfg["test"] else train
    if not train or not test:
        raise ValueError(f"corpus has {len(items)} utterances; cannot split "
                         f"{n_train} train / {cfg['test']} test")

    def features(item):
        _, audio, inputs = item
        return {kind: extract(audio, kind) for kind in ("mel", "linear")}

    with ThreadPoolExecutor(max_workers=max(1, int(cfg["workers"]))) as pool:
        feats = list(pool.map(features, items[:n_train + cfg["test"]]))
    return train, test, feats


def _utterances(items, feats, head):
    out = []
    for (uid, audio, inputs), f in zip(items, feats):
        target = f["mel"] if head == "mel" else (f["linear"] if head == "linear"
                                                 else extract(audio, head))
        out.append(Utterance(inputs.phone_ids, inputs.pitch, inputs.durations, target,
                             linear=f["linear"]))
    return out


def _write_loss_csv(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in curve:
            w.writerow([step, repr(float(loss)), repr(float(lr))])


def _crop(n_frames, limit):
    return n_frames if not limit else min(n_frames, int(limit))


def evaluate_variant(model, variant, test, test_feats, cfg, wavenet=None, sample_dir=None):
    """Mel-MSE (mel heads) and mean per-utterance PA, using ground-truth durations."""
    head, vocoder = _synth_pair(variant)
    mses, pas = [], []
    for k, ((uid, audio, inputs), f) in enumerate(zip(test, test_feats)):
        feats, frame_pitch, _ = model.synthesize(inputs.phone_ids, inputs.pitch,
                                                 durations=inputs.durations)
        if model.output_head == "mel" and not model.use_cbhg:
            mses.append(np.mean((feats - f["mel"]) ** 2))
        n = _crop(len(feats), cfg["max_eval_frames"])
        wav = synthesize_waveform(feats[:n], head, vocoder, frame_pitch=frame_pitch[:n],
                                  wavenet=wavenet, iters=cfg["gl_iters"], seed=cfg["seed"])
        ref_f0 = dsp.estimate_f0(audio[:n * dsp.HOP_LENGTH], centered=True)
        syn_f0 = dsp.estimate_f0(wav, centered=True)
        pas.append(pitch_accuracy(ref_f0, syn_f0).value)
        if k == 0 and sample_dir is not None:
            render_spectrogram_image(feats, sample_dir / "spectrogram.pgm")
            dsp.write_wav(sample_dir / "sample.wav", wav)
    return (float(np.mean(mses)) if mses else None), float(np.mean(pas))


def _train_wavenet(cfg, train, train_feats):
    params = {"seed": cfg["seed"], **cfg["wavenet"]}
    data = [(audio, f["mel"], np.repeat(inputs.pitch, inputs.durations))
            for (_, audio, inputs), f in zip(train, train_feats)]
    return WaveNetVocoder(**params).fit(data)


def run_experiment(config):
    """Train and evaluate every variant; returns the run directory."""
    cfg = resolve_config(config)
    run_dir = Path(cfg["out"]) / cfg["name"]
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")
    train, test, feats = _load_data(cfg)
    train_feats, test_feats = feats[:len(train)], feats[len(train):] or feats[:len(train)]
    mos = read_mos_csv(cfg["mos_csv"]) if cfg["mos_csv"] else {}

    rows, status, curves = [], {}, {}
    trained = {}
    wavenet = None
    for variant in cfg["variants"]:
        label = variant["label"]
        vdir = run_dir / _slug(label)
        vdir.mkdir(exist_ok=True)
        try:
            params = {"seed": cfg["seed"], **cfg["frontend"],
                      **{k: v for k, v in variant.items() if k in FRONTEND_KEYS}}
            key = config_hash(params)
            if key not in trained:
                utts = _utterances(train, train_feats, params.get("output_head", "mel"))
                trained[key] = FrontEnd(**params).fit(utts)
            model = trained[key]
            model.save(vdir / "frontend.ckpt")
            _write_loss_csv(vdir / "loss.csv", model.loss_curve_)
            curves[label] = vdir / "loss.csv"
            if _synth_pair(variant)[1] == "wavenet" and wavenet is None:
                wavenet = _train_wavenet(cfg, train, train_feats)
                wavenet.save(run_dir / "wavenet.ckpt")
            mel_mse, pa = evaluate_variant(model, variant, test, test_feats, cfg,
                                           wavenet=wavenet, sample_dir=vdir)
            row = {"model": label, "feature_type": _feature_type(variant),
                   "mel_mse": mel_mse, "pa_percent": pa}
            if label in mos:
                agg = mos_aggregate(mos[label])
                row["mos_mean"], row["mos_halfwidth"] = agg.mean, agg.halfwidth
            rows.append(row)
            status[label] = "ok"
        except Exception as exc:  # one failed variant must not sink the run
            logger.exception("variant %s failed", label)
            status[label] = f"failed: {type(exc).__name__}: {exc}"

    for label, samples in mos.items():
        if label not in status:
            agg = mos_aggregate(samples)
            rows.append({"model": label, "feature_type": None, "mel_mse": None,
                         "pa_percent": None, "mos_mean": agg.mean,
                         "mos_halfwidth": agg.halfwidth})
    if rows:
        report = compare_table(rows)
        (run_dir / "metrics.csv").write_text(report.to_csv())
        (run_dir / "table2.txt").write_text(report.table2())
        (run_dir / "table6.txt").write_text(report.table6())
    if curves:
        render_loss_curve(curves, run_dir / "loss_curves.ppm", log_scale=True)
    (run_dir / "status.json").write_text(json.dumps(status, indent=2, sort_keys=True) + "\n")

    corpus = Path(cfg["corpus"])
    inputs = sorted(p for sub in ("wav", "score", "dur") for p in (corpus / sub).glob("*"))
    manifest = {
        "name": cfg["name"],
        "config_hash": config_hash(cfg),
        "config": cfg,
        "inputs": {str(p.relative_to(corpus)): _sha(p) for p in inputs},
        "artifacts": sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                            if p.is_file() and p.name != "manifest.json"),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return run_dir
