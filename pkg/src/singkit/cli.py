"""``singkit`` command line.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dsp
from .corpus import CorpusSpec, generate_synthetic_corpus, load_corpus
from .evaluation import mos_aggregate, mse_metric, pitch_accuracy, read_mos_csv
from .experiment import _write_loss_csv, run_experiment
from .features import KINDS, extract
from .frontend import FrontEnd, Utterance
from .neural.checkpoint import CheckpointError
from .score import ScoreError, parse_score, score_to_inputs
from .vocoder import WaveNetVocoder, synthesize_waveform

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

logger = logging.getLogger("singkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_config(path):
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _merge(args, config, keys):
    """Flags first, then config JSON on top."""
    out = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    out.update({k: v for k, v in config.items() if k in keys})
    return out


def cmd_gen_corpus(args):
    names = {f.name for f in fields(CorpusSpec)}
    params = _merge(args, _read_config(args.config), names)
    if "syllables" in params and params["syllables"] is not None:
        params["syllables"] = tuple(params["syllables"])
    spec = CorpusSpec(**params)
    ids = generate_synthetic_corpus(spec, args.out)
    print(f"wrote {len(ids)} utterances to {args.out}")


def cmd_extract_features(args):
    corpus = Path(args.corpus)
    out = Path(args.out) if args.out else corpus / "features" / args.kind
    out.mkdir(parents=True, exist_ok=True)
    items = load_corpus(corpus)

    def one(item):
        uid, audio, _ = item
        dsp.save_features(out / f"{uid}.f32", extract(audio, args.kind), args.kind)

    with ThreadPoolExecutor(max_workers=args.workers) as pool:
        list(pool.map(one, items))
    print(f"wrote {len(items)} {args.kind} feature files to {out}")


FRONTEND_PARAMS = tuple(FrontEnd().get_params())


def cmd_train_frontend(args):
    params = _merge(args, _read_config(args.config), FRONTEND_PARAMS)
    model = FrontEnd(**params)
    head = model.output_head
    utts = []
    for _, audio, inputs in load_corpus(args.corpus):
        target = extract(audio, head)
        linear = extract(audio, "linear") if model.use_cbhg else None
        utts.append(Utterance(inputs.phone_ids, inputs.pitch, inputs.durations, target,
                              linear=linear))
    model.fit(utts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "frontend.ckpt")
    _write_loss_csv(out / "loss.csv", model.loss_curve_)
    (out / "config.json").write_text(json.dumps(model.get_params(), indent=2, default=list) + "\n")
    print(f"final loss {model.loss_curve_[-1][1]:.5f}; checkpoint in {out}")


WAVENET_PARAMS = tuple(WaveNetVocoder().get_params())


def cmd_train_vocoder(args):
    params = _merge(args, _read_config(args.config), WAVENET_PARAMS)
    voc = WaveNetVocoder(**params)
    data = [(audio, extract(audio, "mel"), np.repeat(inputs.pitch, inputs.durations))
            for _, audio, inputs in load_corpus(args.corpus)]
    voc.fit(data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    voc.save(out / "wavenet.ckpt")
    _write_loss_csv(out / "loss.csv", voc.loss_curve_)
    print(f"final NLL {voc.loss_curve_[-1][1]:.4f}; checkpoint in {out}")


def cmd_synth(args):
    score = parse_score(Path(args.score).read_text(encoding="utf-8"))
    inputs = score_to_inputs(score)
    model = FrontEnd.from_checkpoint(args.frontend)
    durations = inputs.durations if args.score_durations else None
    feats, frame_pitch, _ = model.synthesize(inputs.phone_ids, inputs.pitch, durations=durations)
    head = "linear" if (model.use_cbhg or model.output_head == "linear") else model.output_head
    wavenet = WaveNetVocoder.from_checkpoint(args.wavenet) if args.wavenet else None
    wav = synthesize_waveform(feats, head, args.vocoder, frame_pitch=frame_pitch,
                              wavenet=wavenet, iters=args.iters, seed=args.seed or 0)
    dsp.write_wav(args.out, wav)
    print(f"wrote {len(wav) / dsp.SAMPLE_RATE:.2f} s to {args.out}")


def cmd_eval(args):
    report = {}
    if args.ref and args.pred:
        ref = dsp.estimate_f0(dsp.read_wav(args.ref), centered=True)
        pred = dsp.estimate_f0(dsp.read_wav(args.pred), centered=True)
        report["pa_percent"] = str(pitch_accuracy(ref, pred))
    if args.ref_features and args.pred_features:
        a, _ = dsp.load_features(args.ref_features)
        b, _ = dsp.load_features(args.pred_features)
        n = min(len(a), len(b))
        report["mel_mse"] = str(mse_metric(b[:n], a[:n]))
    if args.mos:
        report["mos"] = {m: str(mos_aggregate(s)) for m, s in sorted(read_mos_csv(args.mos).items())}
    if not report:
        raise UsageError("eval: give --ref/--pred, --ref-features/--pred-features or --mos")
    print(json.dumps(report, indent=2, sort_keys=True))


def cmd_experiment(args):
    config = _read_config(args.config)
    if args.seed is not None:
        config.setdefault("seed", args.seed)
    if args.out is not None:
        config.setdefault("out", args.out)
    run_dir = run_experiment(config)
    print((run_dir / "table2.txt").read_text() if (run_dir / "table2.txt").exists() else "")
    print(f"results in {run_dir}")


def build_parser():
    p = _Parser(prog="singkit", description="Score-to-waveform singing synthesis toolkit.")
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-corpus", help="render a synthetic singing corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--n-utterances", dest="n_utterances", type=int)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_corpus)

    e = sub.add_parser("extract-features", help="dump frame features for a corpus")
    e.add_argument("--corpus", required=True)
    e.add_argument("--kind", choices=KINDS, default="mel")
    e.add_argument("--out")
    e.add_argument("--workers", type=int, default=2)
    e.set_defaults(func=cmd_extract_features)

    t = sub.add_parser("train-frontend", help="train the acoustic model")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train_frontend)

    v = sub.add_parser("train-vocoder", help="train the WaveNet vocoder")
    v.add_argument("--corpus", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--config")
    v.add_argument("--seed", type=int)
    v.add_argument("--steps", type=int)
    v.set_defaults(func=cmd_train_vocoder)

    s = sub.add_parser("synth", help="score JSON to WAV")
    s.add_argument("--score", required=True)
    s.add_argument("--frontend", required=True, help="front-end checkpoint")
    s.add_argument("--vocoder", choices=("imel+gl", "gl", "wavenet"), default="imel+gl")
    s.add_argument("--wavenet", help="WaveNet checkpoint")
    s.add_argument("--score-durations", action="store_true",
                   help="use durations from the score instead of predicting them")
    s.add_argument("--iters", type=int, default=60)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    ev = sub.add_parser("eval", help="PA, Mel-MSE and MOS aggregation")
    ev.add_argument("--ref")
    ev.add_argument("--pred")
    ev.add_argument("--ref-features", dest="ref_features")
    ev.add_argument("--pred-features", dest="pred_features")
    ev.add_argument("--mos", help="CSV with model,listener,item,score")
    ev.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run an ablation sweep")
    x.add_argument("--config", required=True)
    x.add_argument("--seed", type=int)
    x.add_argument("--out")
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ScoreError, dsp.AudioFormatError, CheckpointError, ValueError, KeyError,
            json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        logger.exception("command failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
