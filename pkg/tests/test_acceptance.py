"""End-to-end acceptance checks, one marker per criterion.

A summary line per criterion is printed at the end of the pytest run.
Training-heavy checks take several minutes on one CPU core.
"""
import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from singkit import cli, dsp
from singkit.cbhg import CBHG, CBHGNet
from singkit.corpus import (
    CorpusSpec, generate_synthetic_corpus, load_corpus, random_score, render_phones,
    render_score,
)
from singkit.evaluation import mse_metric, pitch_accuracy
from singkit.experiment import run_experiment
from singkit.features import extract, pitch_track_hz
from singkit.frontend import (
    DurationPredictor, FFTBlock, FrontEnd, PostNet, Utterance, expand_pitch_to_frames,
    length_regulate, smooth_boundaries,
)
from singkit.neural import (
    BiGRU, Conv1d, Embedding, GRU, Highway, LayerNorm, Linear, MaxPool1d, MultiHeadAttention,
    Parameter, grad_check,
)
from singkit.score import quantize_pitch, semitone_to_hz
from singkit.vocoder import WaveNetVocoder, griffin_lim, spectral_convergence

pytestmark = pytest.mark.slow

GRAD_TOL = 1e-4


def rng(seed):
    return np.random.default_rng(seed)


# -- 1. gradient suite ----------------------------------------------------------------

def _readout_check(module, forward, backward, x=None, samples=20):
    """grad_check through a fixed random readout, including the input if given."""
    holder = Parameter(np.array(x, dtype=float)) if x is not None else None
    shape = forward(holder.value if holder else None)[0].shape
    w = rng(99).normal(size=shape)
    params = module.named_parameters() + ([("input", holder)] if holder else [])

    def loss_only():
        return 0.5 * np.sum((w * forward(holder.value if holder else None)[0]) ** 2)

    def loss_and_backward():
        module.zero_grad()
        out, cache = forward(holder.value if holder else None)
        dx = backward(w * w * out, cache)
        if holder is not None:
            holder.grad[...] = dx
        return 0.5 * np.sum((w * out) ** 2)

    return grad_check(loss_and_backward, loss_only, params, samples=samples)


def _layer_cases():
    x = rng(1).normal(size=(7, 6))
    mha = MultiHeadAttention(8, 2, rng(2))
    q = rng(3).normal(size=(5, 8))
    mask = np.triu(np.ones((5, 5), dtype=bool), k=1)
    ln = LayerNorm(6)
    ln.gain.value[:] = rng(4).normal(size=6)
    emb = Embedding(10, 6, rng(5))
    ids = np.array([1, 3, 3, 9, 0])
    pn = PostNet(6, 8, rng(6))
    pn.convs[-1].weight.value[...] = rng(7).normal(0, 0.3, size=pn.convs[-1].weight.shape)

    def mha_back(d, c):
        dq, dk, dv = mha.backward(d, c)
        return dq + dk + dv

    makers = {
        "linear": lambda r: Linear(6, 4, r),
        "conv_same": lambda r: Conv1d(6, 4, 3, r),
        "conv_causal_dilated": lambda r: Conv1d(6, 4, 2, r, padding="causal", dilation=3),
        "highway": lambda r: Highway(6, r),
        "maxpool": lambda r: MaxPool1d(),
        "gru": lambda r: GRU(6, 5, r),
        "bigru": lambda r: BiGRU(6, 5, r),
        "fft_block": lambda r: FFTBlock(6, 2, 3, 12, r),
        "duration_predictor": lambda r: DurationPredictor(6, 3, r),
        "cbhg": lambda r: CBHGNet(6, 5, r, bank_size=3, bank_channels=4, proj_channels=6,
                                  highway_dim=6, n_highway=2, gru_hidden=4),
    }
    out = []
    for name, make in makers.items():
        layer = make(rng(10))
        out.append((name, layer, layer.forward, layer.backward, x))
    out.append(("layer_norm", ln, lambda v: ln.forward(v), lambda d, c: ln.backward(d, c), x))
    out.append(("postnet", pn, lambda v: pn.forward(v), lambda d, c: pn.backward(d, c), x))
    out.append(("attention", mha, lambda v: mha.forward(v, v, v), mha_back, q))
    out.append(("attention_masked", mha, lambda v: mha.forward(v, v, v, mask=mask), mha_back, q))
    out.append(("embedding", emb, lambda v: emb.forward(ids), lambda d, c: emb.backward(d, c),
                None))
    return out


def _frontend_check():
    fe = FrontEnd(layers=2, model_dim=64, heads=2, pitch_placement="both", use_postnet=True,
                  steps=0)
    fe._init_model()
    pn = fe.model_.postnet.convs[-1].weight
    pn.value[...] = rng(11).normal(0, 0.05, size=pn.shape)
    r = rng(12)
    durations = r.integers(2, 6, size=5)
    utt = Utterance(r.integers(1, 58, size=5), r.integers(55, 73, size=5), durations,
                    r.uniform(-2, 2, size=(durations.sum(), 80)))

    def loss_and_backward():
        fe.model_.zero_grad()
        return fe._utterance_loss(utt)["loss"]

    return grad_check(loss_and_backward, lambda: fe._utterance_loss(utt, backward=False)["loss"],
                      fe.model_.named_parameters(), samples=4)


def _wavenet_check():
    voc = WaveNetVocoder(n_layers=4, dilation_cycle=4, residual_channels=16, skip_channels=16,
                         pitch_dim=8)
    voc._init()
    # zero-initialised output and pitch weights would hide their gradients
    r = rng(13)
    for name, p in voc.net_.named_parameters():
        if name.endswith("bias") or name.startswith("post2") or "cond_pitch" in name:
            p.value[...] = r.normal(0, 0.5, size=p.shape)
    codes = r.integers(0, 256, size=(2, 320))
    mel = r.uniform(-4, 4, size=(2, 2, 80))
    pitch = r.integers(50, 70, size=(2, 2))

    def loss_and_backward():
        voc.net_.zero_grad()
        return voc.batch_loss(codes, mel, pitch, backward=True)

    return grad_check(loss_and_backward, lambda: voc.batch_loss(codes, mel, pitch),
                      voc.net_.named_parameters(), samples=4)


@pytest.mark.criterion(1)
def test_gradient_suite(record_property):
    start = time.perf_counter()
    errors = {}
    for name, layer, fwd, back, x in _layer_cases():
        errors[name] = _readout_check(layer, fwd, back, x)
    errors["frontend_2x64"] = _frontend_check()
    errors["wavenet_4x16"] = _wavenet_check()
    seconds = time.perf_counter() - start
    worst = max(errors, key=lambda k: errors[k][0])
    record_property("detail", f"worst {worst}/{errors[worst][1]} rel err "
                              f"{errors[worst][0]:.2e}, {seconds:.0f} s")
    assert all(err < GRAD_TOL for err, _ in errors.values()), errors
    assert seconds < 120


# -- shared toy corpus and overfit model ---------------------------------------------

TOY_SPEC = CorpusSpec(n_utterances=4, seed=7, min_seconds=3.0, max_seconds=4.0)


@pytest.fixture(scope="module")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    generate_synthetic_corpus(TOY_SPEC, root)
    return root


@pytest.fixture(scope="module")
def overfit(toy_corpus):
    items = load_corpus(toy_corpus)
    utts = [Utterance(inp.phone_ids, inp.pitch, inp.durations, extract(audio, "mel"))
            for _, audio, inp in items]
    fe = FrontEnd(pitch_placement="encoder", steps=2000, seed=0)
    history = []
    start = time.perf_counter()
    for step in range(1, 2001):
        fe.train_step(utts, batch_id=step)
        if step % 100 == 0:
            preds = [fe.synthesize(u.phone_ids, u.pitch, durations=u.durations)[0]
                     for u in utts]
            mse = float(np.mean([np.mean((p - u.target) ** 2) for p, u in zip(preds, utts)]))
            history.append((step, mse))
            if mse < 0.01:
                break
    return {"model": fe, "utts": utts, "history": history,
            "seconds": time.perf_counter() - start}


@pytest.mark.criterion(2)
def test_toy_overfit(overfit, record_property):
    step, mse = overfit["history"][-1]
    record_property("detail", f"Mel-MSE {mse:.4f} at step {step}, {overfit['seconds']:.0f} s")
    assert mse < 0.01
    assert step <= 2000
    assert overfit["seconds"] < 300


def test_overfit_predicts_training_durations(overfit):
    utts = overfit["utts"]
    hits = sum(int(np.sum(overfit["model"].predict_durations(u.phone_ids, u.pitch)
                          == u.durations)) for u in utts)
    total = sum(len(u.durations) for u in utts)
    assert hits / total >= 0.9, f"{hits}/{total} phones exact"


# -- 3. placement harness reproducibility ------------------------------------------------

@pytest.mark.criterion(3)
def test_placement_harness_reproducible(toy_corpus, tmp_path, record_property):
    config = {"name": "placement", "corpus": str(toy_corpus), "sweep": "placement",
              "train": 3, "test": 1, "frontend": {"steps": 40, "warmup": 20},
              "gl_iters": 20, "seed": 3}
    runs = [run_experiment({**config, "out": str(tmp_path / f"run{k}")}) for k in range(2)]
    for run in runs:
        status = json.loads((run / "status.json").read_text())
        assert status == {"Decoder only": "ok", "Encoder only": "ok", "Both": "ok"}
    table = (runs[0] / "table2.txt").read_text()
    assert table.splitlines()[0].split() == ["Model", "Mel-MSE", "PA", "(%)", "MOS"]
    rows = (runs[0] / "metrics.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["Decoder only", "Encoder only", "Both"]
    for name in ("metrics.csv", "table2.txt", "table6.txt", "encoder-only/loss.csv"):
        assert (runs[0] / name).read_bytes() == (runs[1] / name).read_bytes(), name
    record_property("detail", "metrics.csv, table2.txt, table6.txt identical across reruns")


# -- 4. pitch-condition contrast ------------------------------------------------------------

@pytest.mark.criterion(4)
def test_encoder_placement_pitch_accuracy(tmp_path, record_property):
    corpus = tmp_path / "pv"
    generate_synthetic_corpus(CorpusSpec(n_utterances=24, seed=11, min_seconds=3.0,
                                         max_seconds=4.0), corpus)
    run = run_experiment({"name": "pv", "corpus": str(corpus), "sweep": "placement",
                          "train": 16, "test": 8, "frontend": {"steps": 1000},
                          "out": str(tmp_path / "runs")})
    rows = {r.split(",")[0]: r.split(",") for r in
            (run / "metrics.csv").read_text().splitlines()[1:]}
    enc, dec = float(rows["Encoder only"][3]), float(rows["Decoder only"][3])
    record_property("detail", f"held-out PA encoder {enc:.2f} vs decoder {dec:.2f} "
                              f"(both {float(rows['Both'][3]):.2f})")
    assert enc >= dec


@pytest.mark.criterion(4)
def test_pitch_conditioned_wavenet_lower_nll(record_property):
    spec = CorpusSpec()
    r = rng(5)

    def utterance():
        pitch = r.integers(55, 73, size=3)
        durations = r.integers(8, 16, size=3)
        audio = render_phones(["a"] * 3, pitch, durations, spec)
        return audio, extract(audio, "mel"), np.repeat(pitch, durations)

    train = [utterance() for _ in range(40)]
    test = [utterance() for _ in range(24)]
    nll = {}
    for use_pitch in (True, False):
        voc = WaveNetVocoder(n_layers=8, dilation_cycle=8, residual_channels=16,
                             skip_channels=32, pitch_dim=16, use_pitch=use_pitch, steps=400,
                             lr=1e-3, seed=0).fit(train)
        nll[use_pitch] = np.array([voc.nll(*u).mean() for u in test])
    margin = nll[False] - nll[True]
    ci = stats.ttest_1samp(margin, 0.0).confidence_interval(0.95)
    record_property("detail", f"NLL margin {margin.mean():.4f} nats/sample, "
                              f"95% CI [{ci.low:.4f}, {ci.high:.4f}] over {len(test)}")
    assert len(test) >= 20
    assert ci.low > 0


# -- 5. Griffin-Lim ------------------------------------------------------------------------

@pytest.mark.criterion(5)
@pytest.mark.parametrize("vibrato", [0.0, 0.3])
@pytest.mark.parametrize("pitch", [43, 50, 57, 64, 69, 76, 81])
def test_griffin_lim_harmonic_tone(pitch, vibrato, record_property):
    audio = render_phones(["a"], [pitch], [200], CorpusSpec(vibrato_depth=vibrato))
    mag = np.abs(dsp.stft(audio))
    history = []
    start = time.perf_counter()
    y = griffin_lim(mag, 60, history=history)
    seconds = time.perf_counter() - start
    late = np.array(history[4:60])
    record_property("detail", f"SC@5 {history[4]:.3f} SC@60 {history[59]:.4f}, "
                              f"{int(np.sum(np.diff(late) > 0))} increases, {seconds:.1f} s")
    assert spectral_convergence(y, mag) == pytest.approx(history[59])
    assert np.all(np.diff(late) <= 0)
    assert seconds < 10
    assert history[59] < 0.1


# -- 6. exact oracles ----------------------------------------------------------------------

@pytest.mark.criterion(6)
def test_pitch_quantization_round_trip():
    for p in range(24, 97):
        hz = 440.0 * 2.0 ** ((p - 69) / 12)
        assert semitone_to_hz(p) == pytest.approx(hz, rel=1e-12)
        assert quantize_pitch(hz) == p


@pytest.mark.criterion(6)
def test_mu_law_round_trip_grid():
    x = np.round(np.arange(-10000, 10001) * 1e-4, 12)
    err = np.abs(dsp.mu_law_decode(dsp.mu_law_encode(x)) - x)
    assert err.max() <= 0.05


@pytest.mark.criterion(6)
def test_length_regulator_conservation():
    r = rng(20)
    for _ in range(1000):
        n = int(r.integers(1, 12))
        durations = r.integers(0, 9, size=n)
        durations[r.integers(n)] += 1
        enc = r.normal(size=(n, 3))
        out = length_regulate(enc, durations)
        oracle = [enc[i] for i in range(n) for _ in range(durations[i])]
        assert out.shape == (durations.sum(), 3)
        assert np.array_equal(out, np.array(oracle).reshape(-1, 3))
        assert smooth_boundaries(out, durations).shape == out.shape
        assert len(expand_pitch_to_frames(r.integers(0, 97, size=n), durations)) == \
            durations.sum()


@pytest.mark.criterion(6)
def test_pa_and_mse_brute_force():
    r = rng(21)
    for _ in range(100):
        n = int(r.integers(1, 300))
        ref = r.uniform(60, 900, size=n) * (r.random(n) > 0.2)
        ref[0] = 200.0
        pred = ref * 2 ** (r.normal(0, 0.6, size=n) / 12) * (r.random(n) > 0.1)
        voiced = hits = 0
        for a, b in zip(ref, pred):
            if a > 0:
                voiced += 1
                hits += b > 0 and abs(12 * math.log2(b / a)) <= 0.5
        assert abs(float(pitch_accuracy(ref, pred)) - 100.0 * hits / voiced) < 1e-9
        a, b = r.normal(size=(n, 4)), r.normal(size=(n, 4))
        mse = math.fsum((a[i, j] - b[i, j]) ** 2 for i in range(n) for j in range(4)) / (4 * n)
        assert abs(float(mse_metric(a, b)) - mse) < 1e-9


@pytest.mark.criterion(6)
def test_frame_count_loop_oracle():
    for n in range(800, 50001):
        count, start = 0, 0
        while start + 800 <= n:
            count += 1
            start += 160
        assert dsp.num_frames(n) == count, n
    for n in (800, 959, 960, 12345, 50000):
        assert len(dsp.frame_signal(np.zeros(n))) == dsp.num_frames(n)


# -- 7. end-to-end smoke -------------------------------------------------------------------

@pytest.mark.criterion(7)
def test_score_to_waveform(overfit, toy_corpus, tmp_path, record_property):
    fe_path = tmp_path / "frontend.ckpt"
    overfit["model"].save(fe_path)
    items = load_corpus(toy_corpus)
    voc = WaveNetVocoder(n_layers=4, dilation_cycle=4, residual_channels=16, skip_channels=16,
                         pitch_dim=8, steps=50, seed=0)
    voc.fit([(audio, extract(audio, "mel"), np.repeat(inp.pitch, inp.durations))
             for _, audio, inp in items])
    wn_path = tmp_path / "wavenet.ckpt"
    voc.save(wn_path)

    pas = []
    for uid, _, inp in items:
        score = toy_corpus / "score" / f"{uid}.json"
        out = tmp_path / f"{uid}-gl.wav"
        assert cli.main(["synth", "--score", str(score), "--frontend", str(fe_path),
                         "--score-durations", "--out", str(out)]) == 0
        wav = dsp.read_wav(out)
        ref = pitch_track_hz(expand_pitch_to_frames(inp.pitch, inp.durations))
        assert len(wav) == 160 * len(ref)
        pas.append(float(pitch_accuracy(ref, dsp.estimate_f0(wav, centered=True))))

    out = tmp_path / "0000-wavenet.wav"
    assert cli.main(["synth", "--score", str(toy_corpus / "score" / "0000.json"),
                     "--frontend", str(fe_path), "--vocoder", "wavenet", "--wavenet",
                     str(wn_path), "--score-durations", "--seed", "1", "--out", str(out)]) == 0
    wav = dsp.read_wav(out)
    assert len(wav) == 160 * int(items[0][2].durations.sum())
    assert np.all(np.isfinite(wav)) and np.sqrt(np.mean(wav ** 2)) > 0
    record_property("detail", f"GL PA mean {np.mean(pas):.2f}% (min {min(pas):.2f}%)")
    assert np.mean(pas) >= 70.0


# -- 8. CBHG versus IMel ------------------------------------------------------------------

@pytest.mark.criterion(8)
def test_cbhg_beats_imel(record_property):
    spec = CorpusSpec(n_utterances=14, seed=11, min_seconds=3.0, max_seconds=5.0)
    r = rng(spec.seed)
    mels, lins = [], []
    for _ in range(14):
        audio, _ = render_score(random_score(r, spec), spec)
        s = dsp.linear_spectrogram(audio)
        mels.append(dsp.mel_spectrogram(s))
        lins.append(dsp.normalize_log(s))
    model = CBHG(steps=800, seed=0).fit(mels[:10], lins[:10])
    pred = model.predict(mels[10:])
    cbhg = np.mean([np.mean(np.abs(p - t)) for p, t in zip(pred, lins[10:])])
    imel = np.mean([np.mean(np.abs(dsp.normalize_log(dsp.imel_project(m)) - t))
                    for m, t in zip(mels[10:], lins[10:])])
    record_property("detail", f"held-out MAE CBHG {cbhg:.4f} vs IMel {imel:.4f}")
    assert cbhg < imel
