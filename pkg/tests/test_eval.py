import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from singkit.evaluation import (
    EvaluationError, MosSample, compare_table, format_decimal, mos_aggregate, mse_metric,
    pitch_accuracy, read_mos_csv, read_pnm, render_loss_curve, render_spectrogram_image,
)
from singkit import dsp


# -- MSE ----------------------------------------------------------------

def test_mse_display():
    x = np.random.default_rng(0).normal(size=(5, 80))
    assert str(mse_metric(x, x)) == "0.0000"
    assert str(mse_metric(x + 0.18, x)) == "0.0324"


def test_mse_matches_loop_and_is_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(7, 9)), rng.normal(size=(7, 9))
    oracle = math.fsum((a[i, j] - b[i, j]) ** 2 for i in range(7) for j in range(9)) / 63
    assert abs(float(mse_metric(a, b)) - oracle) < 1e-12
    assert float(mse_metric(a, b)) == float(mse_metric(b, a))


def test_mse_shape_mismatch():
    with pytest.raises(EvaluationError, match="shape"):
        mse_metric(np.zeros((2, 3)), np.zeros((3, 2)))


@pytest.mark.parametrize("value, places, text", [
    (0.03235, 4, "0.0324"), (0.03245, 4, "0.0324"), (93.905, 2, "93.90"), (2.5, 0, "2"),
    (1.0, 2, "1.00"),
])
def test_round_half_even(value, places, text):
    assert format_decimal(value, places) == text


# -- PA -----------------------------------------------------------------

def test_pa_examples():
    ref = np.array([220.0, 0.0, 330.0, 440.0])
    assert str(pitch_accuracy(ref, ref)) == "100.00"
    up = ref * 2 ** (2 / 12)
    assert str(pitch_accuracy(ref, up)) == "0.00"
    assert str(pitch_accuracy([220, 220, 220], [220, 233.1, 226.3])) == "66.67"


def test_pa_semitone_oracle_values():
    assert 12 * math.log2(233.1 / 220) == pytest.approx(1.00, abs=0.005)
    assert 12 * math.log2(226.3 / 220) < 0.5


def test_pa_unvoiced_prediction_is_error():
    assert float(pitch_accuracy([200.0, 200.0], [200.0, 0.0])) == 50.0


def test_pa_ignores_unvoiced_reference_and_truncates():
    assert float(pitch_accuracy([0.0, 200.0, 200.0], [999.0, 200.0])) == 100.0


def test_pa_requires_voiced_reference():
    with pytest.raises(EvaluationError, match="no voiced"):
        pitch_accuracy([0.0, 0.0], [100.0, 100.0])


def pa_oracle(ref, pred):
    voiced = hits = 0
    for r, p in zip(ref, pred):
        if r > 0:
            voiced += 1
            if p > 0 and abs(12 * math.log2(p / r)) <= 0.5:
                hits += 1
    return 100.0 * hits / voiced


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_pa_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 200))
    ref = rng.uniform(60, 900, size=n) * (rng.random(n) > 0.2)
    ref[0] = 220.0
    pred = ref * 2 ** (rng.normal(0, 0.6, size=n) / 12) * (rng.random(n) > 0.1)
    got = float(pitch_accuracy(ref, pred))
    assert abs(got - pa_oracle(ref, pred)) < 1e-9
    # transposing both tracks together changes nothing
    assert abs(float(pitch_accuracy(ref * 1.5, pred * 1.5)) - got) < 1e-9


# -- MOS ----------------------------------------------------------------

def samples(scores, items=None):
    items = items or [f"i{k}" for k in range(len(scores))]
    return [MosSample(f"l{k}", it, s) for k, (it, s) in enumerate(zip(items, scores))]


def test_mos_constant():
    assert str(mos_aggregate(samples([3, 3, 3]))) == "3.00±0.00"
    assert str(mos_aggregate(samples([5] * 6, ["a", "b"] * 3))) == "5.00±0.00"


def test_mos_matches_t_interval_oracle():
    rng = np.random.default_rng(2)
    data = []
    for item in range(8):
        for listener in range(5):
            data.append(MosSample(f"l{listener}", f"i{item}", int(rng.integers(1, 6))))
    means = np.array([np.mean([s.score for s in data if s.item == f"i{k}"]) for k in range(8)])
    lo, hi = stats.t.interval(0.95, len(means) - 1, loc=means.mean(), scale=stats.sem(means))
    got = mos_aggregate(data)
    assert abs(got.mean - means.mean()) < 1e-9
    assert abs(got.halfwidth - (hi - lo) / 2) < 1e-9


def test_mos_single_item_uses_scores():
    data = samples([2, 4, 4, 5], ["x"] * 4)
    scores = np.array([2, 4, 4, 5.0])
    expected = stats.t.ppf(0.975, 3) * scores.std(ddof=1) / 2
    assert mos_aggregate(data).halfwidth == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("score", [0, 6, 2.5])
def test_mos_score_domain(score):
    with pytest.raises(EvaluationError):
        MosSample("l", "i", score)


def test_mos_needs_two_samples():
    with pytest.raises(EvaluationError, match="at least 2"):
        mos_aggregate(samples([4]))


def test_read_mos_csv(tmp_path):
    path = tmp_path / "mos.csv"
    path.write_text("model,listener,item,score\nA,l1,u1,4\nA,l2,u1,5\nB,l1,u1,3\n")
    data = read_mos_csv(path)
    assert sorted(data) == ["A", "B"]
    assert [s.score for s in data["A"]] == [4, 5]


# -- tables ----------------------------------------------------------------

def test_compare_table_reference_values():
    rows = [{"model": m, "feature_type": "Mel", "mel_mse": v, "pa_percent": p}
            for m, v, p in [("Decoder only", 0.0894, 86.63), ("Encoder only", 0.0323, 93.91),
                            ("Both", 0.0581, 82.28)]]
    report = compare_table(rows)
    assert report.best["mel_mse"] == (1,)
    assert report.best["pa_percent"] == (1,)
    table = report.table2()
    assert "*0.0323*" in table and "*93.91*" in table
    assert table.splitlines()[0].split() == ["Model", "Mel-MSE", "PA", "(%)", "MOS"]


def test_compare_table_single_row_best_everywhere():
    report = compare_table([{"model": "A", "feature_type": "Mel", "mel_mse": 0.5,
                             "pa_percent": 50.0, "mos_mean": 3.0, "mos_halfwidth": 0.1}])
    assert report.best == {"mel_mse": (0,), "pa_percent": (0,), "mos_mean": (0,)}
    assert "*3.00±0.10*" in report.table2()


def test_compare_table_ties_share_mark():
    report = compare_table([{"model": "A", "pa_percent": 90.001},
                            {"model": "B", "pa_percent": 89.999}])
    assert report.best["pa_percent"] == (0, 1)


def test_compare_table_empty():
    with pytest.raises(EvaluationError):
        compare_table([])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 2), st.floats(0, 100)), min_size=1, max_size=8))
def test_compare_table_matches_argmin_argmax(values):
    rows = [{"model": str(k), "mel_mse": m, "pa_percent": p} for k, (m, p) in enumerate(values)]
    report = compare_table(rows)
    # ties are judged on the displayed values
    shown_mse = [float(format_decimal(m, 4)) for m, _ in values]
    shown_pa = [float(format_decimal(p, 2)) for _, p in values]
    assert set(report.best["mel_mse"]) == {i for i, v in enumerate(shown_mse)
                                           if v == min(shown_mse)}
    assert set(report.best["pa_percent"]) == {i for i, v in enumerate(shown_pa)
                                              if v == max(shown_pa)}


def test_csv_and_table6():
    report = compare_table([{"model": "STD + CBHG + Griffin-Lim", "feature_type": "Linear",
                             "mel_mse": None, "pa_percent": 91.5}])
    lines = report.to_csv().splitlines()
    assert lines[0] == "model,feature_type,mel_mse,pa_percent,mos_mean,mos_halfwidth"
    assert lines[1] == "STD + CBHG + Griffin-Lim,Linear,,91.50,,"
    t6 = report.table6().splitlines()
    assert t6[0].split()[:3] == ["Model", "Feature", "Type"]
    assert "Linear" in t6[2] and "*91.50*" in t6[2]


# -- images ----------------------------------------------------------------

def test_spectrogram_image_axes(tmp_path):
    feats = np.random.default_rng(3).uniform(size=(96, 513))
    img = render_spectrogram_image(feats, tmp_path / "s.pgm")
    back = read_pnm(tmp_path / "s.pgm")
    assert back.shape == (513, 96)
    assert np.array_equal(back, img)
    assert (tmp_path / "s.pgm").read_bytes().startswith(b"P5\n96 513\n255\n")
    assert back.min() == 0 and back.max() == 255


def test_spectrogram_constant_is_gray(tmp_path):
    img = render_spectrogram_image(np.full((10, 80), -4.0), tmp_path / "c.pgm")
    assert np.all(img == 128)


def test_spectrogram_sinusoid_band(tmp_path):
    t = np.arange(16000) / 16000
    spec = dsp.normalize_log(dsp.linear_spectrogram(0.5 * np.sin(2 * np.pi * 1000 * t)))
    img = render_spectrogram_image(spec, tmp_path / "sin.pgm").astype(int)
    row = 512 - 64
    assert np.all(np.argmax(img, axis=0)[2:-2] == row)
    assert img[row].mean() > img.mean() + 100


def test_spectrogram_rejects_empty(tmp_path):
    with pytest.raises(EvaluationError):
        render_spectrogram_image(np.zeros((0, 80)), tmp_path / "e.pgm")


def test_loss_curve_monotone(tmp_path):
    csv_path = tmp_path / "run" / "loss.csv"
    csv_path.parent.mkdir()
    steps = np.arange(1, 201)
    csv_path.write_text("step,loss,lr\n" + "".join(f"{s},{5.0 / s},0.001\n" for s in steps))
    legend = render_loss_curve(csv_path, tmp_path / "c.ppm")
    assert legend == [("run", (214, 39, 40))]
    img = read_pnm(tmp_path / "c.ppm")
    assert img.shape == (320, 480, 3)
    mask = np.all(img == np.array(legend[0][1], dtype=np.uint8), axis=-1)
    # ignore the legend swatch in the top-right corner
    mask[:30, 300:] = False
    cols = [c for c in range(31, 470, 10) if mask[:, c].any()]
    lowest = [np.flatnonzero(mask[:, c]).max() for c in cols]
    assert len(cols) > 30
    # loss falls, so the pixel row grows downwards
    assert all(a <= b for a, b in zip(lowest, lowest[1:]))


def test_loss_curve_multiple_series_legend(tmp_path):
    series = {"Decoder only": ([1, 2, 3], [3.0, 2.0, 1.0]),
              "Encoder only": ([1, 2, 3], [2.0, 1.5, 1.2])}
    legend = render_loss_curve(series, tmp_path / "m.ppm", log_scale=True)
    assert [l for l, _ in legend] == list(series)
    img = read_pnm(tmp_path / "m.ppm")
    for k, (_, color) in enumerate(legend):
        assert tuple(img[14 + 8 * k, 350]) == color


def test_loss_curve_empty_file(tmp_path):
    path = tmp_path / "loss.csv"
    path.write_text("step,loss,lr\n")
    with pytest.raises(EvaluationError, match="at least 2"):
        render_loss_curve(path, tmp_path / "x.ppm")
