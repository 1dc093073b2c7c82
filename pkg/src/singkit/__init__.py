"""Desk-scale score-to-waveform singing synthesis."""
from .cbhg import CBHG
from .corpus import CorpusSpec, generate_synthetic_corpus, load_corpus
from .evaluation import compare_table, mos_aggregate, mse_metric, pitch_accuracy
from .experiment import run_experiment
from .features import FeatureExtractor, extract
from .frontend import FrontEnd, Utterance
from .score import Score, ScoreInputs, parse_score, score_to_inputs
from .vocoder import WaveNetVocoder, griffin_lim, synthesize_waveform

__version__ = "0.1.0"

__all__ = [
    "CBHG", "CorpusSpec", "FeatureExtractor", "FrontEnd", "Score", "ScoreInputs", "Utterance",
    "WaveNetVocoder", "compare_table", "extract", "generate_synthetic_corpus", "griffin_lim",
    "load_corpus", "mos_aggregate", "mse_metric", "parse_score", "pitch_accuracy",
    "run_experiment", "score_to_inputs", "synthesize_waveform",
]
