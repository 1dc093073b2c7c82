"""Score parsing and the phone / pitch / duration input streams."""
from __future__ import annotations

import difflib
import json
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

FRAME_SHIFT = 0.010
REST_MARKER = "-"
REST_PHONE = "SIL"
REST_PITCH = 0
PITCH_MIN, PITCH_MAX = 24, 96
TEMPO_MIN, TEMPO_MAX = 20.0, 300.0

INITIALS = (
    "b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x",
    "zh", "ch", "sh", "r", "z", "c", "s", "y", "w",
)

# Toneless pinyin syllables, "v" standing for u-umlaut.
_SYLLABLE_TABLE = """
a ai an ang ao
ba bai ban bang bao bei ben beng bi bian biao bie bin bing bo bu
ca cai can cang cao ce cen ceng cha chai chan chang chao che chen cheng chi chong
chou chu chua chuai chuan chuang chui chun chuo ci cong cou cu cuan cui cun cuo
da dai dan dang dao de dei den deng di dia dian diao die ding diu dong dou du duan
dui dun duo
e ei en eng er
fa fan fang fei fen feng fo fou fu
ga gai gan gang gao ge gei gen geng gong gou gu gua guai guan guang gui gun guo
ha hai han hang hao he hei hen heng hong hou hu hua huai huan huang hui hun huo
ji jia jian jiang jiao jie jin jing jiong jiu ju juan jue jun
ka kai kan kang kao ke kei ken keng kong kou ku kua kuai kuan kuang kui kun kuo
la lai lan lang lao le lei leng li lia lian liang liao lie lin ling liu lo long lou
lu luan lun luo lv lve
ma mai man mang mao me mei men meng mi mian miao mie min ming miu mo mou mu
na nai nan nang nao ne nei nen neng ni nian niang niao nie nin ning niu nong nou nu
nuan nuo nv nve
o ou
pa pai pan pang pao pei pen peng pi pian piao pie pin ping po pou pu
qi qia qian qiang qiao qie qin qing qiong qiu qu quan que qun
ran rang rao re ren reng ri rong rou ru rua ruan rui run ruo
sa sai san sang sao se sen seng sha shai shan shang shao she shei shen sheng shi
shou shu shua shuai shuan shuang shui shun shuo si song sou su suan sui sun suo
ta tai tan tang tao te teng ti tian tiao tie ting tong tou tu tuan tui tun tuo
wa wai wan wang wei wen weng wo wu
xi xia xian xiang xiao xie xin xing xiong xiu xu xuan xue xun
ya yan yang yao ye yi yin ying yo yong you yu yuan yue yun
za zai zan zang zao ze zei zen zeng zha zhai zhan zhang zhao zhe zhei zhen zheng
zhi zhong zhou zhu zhua zhuai zhuan zhuang zhui zhun zhuo zi zong zou zu zuan zui
zun zuo
"""

SYLLABLES = frozenset(_SYLLABLE_TABLE.split())


# The 39 standard finals. "eh" is the open e, "ii" the apical vowel after
# z/c/s, "iii" the retroflex one after zh/ch/sh/r, and "v" stands for u-umlaut.
FINALS = (
    "a", "o", "e", "eh", "i", "u", "v", "ii", "iii", "er",
    "ai", "ei", "ao", "ou", "ia", "ie", "ua", "uo", "ve",
    "iao", "iou", "uai", "uei",
    "an", "ian", "uan", "van", "en", "in", "uen", "vn",
    "ang", "iang", "uang", "eng", "ing", "ueng", "ong", "iong",
)
_CONTRACTED = {"iu": "iou", "ui": "uei", "un": "uen"}


def _strip_initial(syllable):
    for initial in sorted(INITIALS, key=len, reverse=True):
        if syllable.startswith(initial) and len(syllable) > len(initial):
            return initial, syllable[len(initial):]
    return None, syllable


def _canonical_final(initial, rest):
    """Undo pinyin spelling shortcuts so each final has one symbol."""
    if initial in ("j", "q", "x", "y") and rest.startswith("u"):
        return "v" + rest[1:]
    if initial == "y":
        if rest == "o":
            return "o"
        return rest if rest.startswith("i") else "iou" if rest == "ou" else "i" + rest
    if initial == "w":
        if rest == "o":
            return "uo"
        return rest if rest.startswith("u") else _CONTRACTED.get("u" + rest, "u" + rest)
    if rest == "i" and initial in ("z", "c", "s"):
        return "ii"
    if rest == "i" and initial in ("zh", "ch", "sh", "r"):
        return "iii"
    return _CONTRACTED.get(rest, rest)


PHONES = (REST_PHONE,) + INITIALS + FINALS
PHONE_TO_ID = {p: i for i, p in enumerate(PHONES)}


class ScoreError(ValueError):
    """Raised for malformed or out-of-range score content."""


@dataclass(frozen=True)
class NoteEvent:
    syllable: str
    pitch: int | None
    beats: Fraction

    @property
    def is_rest(self):
        return self.syllable == REST_MARKER


@dataclass(frozen=True)
class Score:
    tempo_bpm: float
    notes: tuple

    def to_json(self):
        notes = []
        for n in self.notes:
            entry = {"syllable": n.syllable}
            if n.pitch is not None:
                entry["pitch"] = n.pitch
            b = n.beats
            entry["beats"] = int(b) if b.denominator == 1 else float(b)
            notes.append(entry)
        return json.dumps({"tempo_bpm": self.tempo_bpm, "notes": notes})


@dataclass(frozen=True)
class ScoreInputs:
    """Aligned phone-level streams produced from a score."""

    phones: tuple
    pitch: np.ndarray
    durations: np.ndarray

    @property
    def phone_ids(self):
        return np.array([PHONE_TO_ID[p] for p in self.phones], dtype=np.int64)

    def __len__(self):
        return len(self.phones)


def _validate_note(i, raw):
    if not isinstance(raw, dict):
        raise ScoreError(f"notes[{i}]: expected an object")
    syllable = raw.get("syllable")
    if not isinstance(syllable, str) or not syllable:
        raise ScoreError(f"notes[{i}].syllable: missing or not a string")
    beats = raw.get("beats")
    if isinstance(beats, bool) or not isinstance(beats, (int, float)):
        raise ScoreError(f"notes[{i}].beats: missing or not a number")
    if not beats > 0 or not math.isfinite(beats):
        raise ScoreError(f"notes[{i}].beats: must be > 0")
    pitch = raw.get("pitch")
    if syllable == REST_MARKER:
        if pitch is not None:
            raise ScoreError(f"notes[{i}].pitch: rest notes carry no pitch")
    else:
        if pitch is None:
            raise ScoreError(f"notes[{i}].pitch: required for sung notes")
        if isinstance(pitch, bool) or not isinstance(pitch, int):
            raise ScoreError(f"notes[{i}].pitch: must be an integer")
        if not PITCH_MIN <= pitch <= PITCH_MAX:
            raise ScoreError(
                f"notes[{i}].pitch: pitch out of range [{PITCH_MIN}, {PITCH_MAX}]: {pitch}")
        split_syllable(syllable)
    return NoteEvent(syllable, pitch, Fraction(beats).limit_denominator(10**6))


def parse_score(raw):
    """Parse score JSON text into a validated :class:`Score`."""
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ScoreError(
            f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ScoreError("top level must be an object")
    tempo = data.get("tempo_bpm")
    if isinstance(tempo, bool) or not isinstance(tempo, (int, float)):
        raise ScoreError("tempo_bpm: missing or not a number")
    if not TEMPO_MIN <= tempo <= TEMPO_MAX:
        raise ScoreError(f"tempo_bpm: tempo out of range [{TEMPO_MIN}, {TEMPO_MAX}]: {tempo}")
    notes = data.get("notes")
    if not isinstance(notes, list):
        raise ScoreError("notes: missing or not a list")
    if not notes:
        raise ScoreError("empty notes")
    return Score(float(tempo), tuple(_validate_note(i, n) for i, n in enumerate(notes)))


def split_syllable(syllable):
    """Split a pinyin syllable into ``[initial, final]`` or ``[final]``.

    >>> split_syllable("zhong")
    ['zh', 'ong']
    """
    if syllable == REST_MARKER:
        return [REST_PHONE]
    norm = syllable.lower().replace("ü", "v").replace("u:", "v")
    if norm not in SYLLABLES:
        close = difflib.get_close_matches(norm, sorted(SYLLABLES), n=5, cutoff=0.5)
        hint = ", ".join(close) if close else "none"
        raise ScoreError(f"unknown syllable {syllable!r}; nearest legal syllables: {hint}")
    initial, rest = _strip_initial(norm)
    final = _canonical_final(initial, rest)
    return [final] if initial is None else [initial, final]


def quantize_pitch(f):
    """Map a frequency in Hz to the nearest MIDI semitone (A440 -> 69)."""
    if not f > 0:
        raise ValueError(f"frequency must be positive, got {f}")
    return int(round(69 + 12 * math.log2(f / 440.0)))


def semitone_to_hz(p):
    return 440.0 * 2.0 ** ((np.asarray(p, dtype=float) - 69) / 12)


def note_beats_to_frames(beats, tempo_bpm):
    if not beats > 0 or not tempo_bpm > 0:
        raise ValueError("beats and tempo must be positive")
    # exact rational arithmetic, half rounds up
    frames = Fraction(beats) * 60 / Fraction(tempo_bpm) / Fraction(1, 100)
    return max(1, math.floor(frames + Fraction(1, 2)))


def distribute_note_frames(phones, note_frames):
    """Split a note's frames between its (initial, final) phones."""
    if note_frames < 1 or not 1 <= len(phones) <= 2:
        raise ValueError("need note_frames >= 1 and one or two phones")
    if len(phones) == 1:
        return [note_frames]
    if note_frames < len(phones):
        warnings.warn(f"note of {note_frames} frame(s) too short for {phones}; "
                      "initial gets 0 frames", stacklevel=2)
        return [0, note_frames]
    initial = min(math.ceil(0.2 * note_frames), 8)
    return [initial, note_frames - initial]


def score_to_inputs(score):
    """Produce the aligned phone, pitch and duration streams of a score."""
    phones, pitch, durations = [], [], []
    for note in score.notes:
        note_phones = split_syllable(note.syllable)
        frames = note_beats_to_frames(note.beats, score.tempo_bpm)
        phones.extend(note_phones)
        pitch.extend([REST_PITCH if note.is_rest else note.pitch] * len(note_phones))
        durations.extend(distribute_note_frames(note_phones, frames))
    return ScoreInputs(tuple(phones), np.array(pitch, dtype=np.int64),
                       np.array(durations, dtype=np.int64))


def note_frames(score):
    return [note_beats_to_frames(n.beats, score.tempo_bpm) for n in score.notes]
