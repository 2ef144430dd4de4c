"""Fully crossed synthetic speech-like corpus with known content, prosody and speaker factors.

Every item is a harmonic-plus-noise signal built from syllables:

* content class -> the syllable sequence (consonant bursts + formant-shaped vowels)
  and hence the transcript;
* prosody class -> pitch contour shape and offset, speaking rate and energy envelope;
* speaker class -> base pitch, spectral tilt, odd/even harmonic balance and a
  formant scale (vocal-tract length).

Items are padded with leading and trailing low-level noise, like real recordings.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dccomix.data.audio import SAMPLE_RATE, Waveform, write_wav
from dccomix.data.corpus import UtteranceRecord, write_manifest
from dccomix.errors import ConfigurationError

VOWELS = {
    "a": (800.0, 1200.0, 2500.0),
    "e": (500.0, 1900.0, 2600.0),
    "i": (300.0, 2300.0, 3000.0),
    "o": (500.0, 900.0, 2400.0),
    "u": (350.0, 800.0, 2300.0),
}
# consonant -> (noise band centre Hz, bandwidth Hz, duration s)
CONSONANTS = {
    "k": (2200.0, 1200.0, 0.045),
    "t": (4200.0, 2000.0, 0.040),
    "s": (6500.0, 2500.0, 0.090),
    "p": (900.0, 800.0, 0.035),
    "m": (300.0, 250.0, 0.060),
    "n": (400.0, 300.0, 0.060),
    "b": (500.0, 400.0, 0.035),
    "r": (1400.0, 600.0, 0.050),
}
BASE_SENTENCES = (
    "ka mi tu se",
    "to ba ki mu",
    "su ne po ra",
    "mo ri sa te",
    "ni ku bo pe",
    "re so ma ti",
    "pu ta ne ko",
    "bi se ru na",
)
VOWEL_S = 0.15
WORD_GAP_S = 0.04
VOICED_PITCH_SLOPE_ST = 10.0  # semitone excursion of the rising / falling contours


@dataclass(frozen=True)
class ProsodyParams:
    contour: str  # rise | fall | flat | arch | dip
    offset_st: float
    rate: float  # duration multiplier, < 1 is faster
    envelope: str  # crescendo | decrescendo | flat | peak
    level: float


@dataclass(frozen=True)
class SpeakerParams:
    base_f0: float
    tilt_db_per_oct: float
    odd_even_db: float
    formant_scale: float


PROSODY_TABLE = (
    ProsodyParams("rise", 0.0, 1.0, "crescendo", 0.16),
    ProsodyParams("fall", 3.0, 0.7, "decrescendo", 0.11),
    ProsodyParams("flat", -2.0, 1.4, "flat", 0.065),
    ProsodyParams("arch", 2.0, 1.0, "peak", 0.13),
)
SPEAKER_TABLE = (
    SpeakerParams(90.0, -9.0, 0.0, 1.00),
    SpeakerParams(130.0, -5.0, 6.0, 1.08),
    SpeakerParams(185.0, -11.0, -4.0, 0.93),
    SpeakerParams(260.0, -7.0, 3.0, 1.16),
)


def content_text(c: int) -> str:
    if c < len(BASE_SENTENCES):
        return BASE_SENTENCES[c]
    rng = np.random.default_rng(1000 + c)
    cons, vows = sorted(CONSONANTS), sorted(VOWELS)
    return " ".join(cons[rng.integers(len(cons))] + vows[rng.integers(len(vows))] for _ in range(4))


def prosody_params(p: int) -> ProsodyParams:
    if p < len(PROSODY_TABLE):
        return PROSODY_TABLE[p]
    rng = np.random.default_rng(2000 + p)
    return ProsodyParams(
        contour=("rise", "fall", "flat", "arch", "dip")[rng.integers(5)],
        offset_st=float(rng.uniform(-3, 4)),
        rate=float(rng.uniform(0.7, 1.4)),
        envelope=("crescendo", "decrescendo", "flat", "peak")[rng.integers(4)],
        level=float(rng.uniform(0.065, 0.16)),
    )


def speaker_params(s: int) -> SpeakerParams:
    if s < len(SPEAKER_TABLE):
        return SPEAKER_TABLE[s]
    rng = np.random.default_rng(3000 + s)
    return SpeakerParams(
        base_f0=float(rng.uniform(90, 260)),
        tilt_db_per_oct=float(rng.uniform(-12, -4)),
        odd_even_db=float(rng.uniform(-5, 6)),
        formant_scale=float(rng.uniform(0.9, 1.2)),
    )


def _contour(kind: str, u: np.ndarray) -> np.ndarray:
    """Pitch offset in semitones over normalised time ``u`` in [0, 1]."""
    half = VOICED_PITCH_SLOPE_ST / 2
    if kind == "rise":
        return -half + VOICED_PITCH_SLOPE_ST * u
    if kind == "fall":
        return half - VOICED_PITCH_SLOPE_ST * u
    if kind == "flat":
        return np.zeros_like(u)
    if kind == "arch":
        return half * np.sin(np.pi * u) * 2 - half
    if kind == "dip":
        return half - half * np.sin(np.pi * u) * 2
    raise ConfigurationError(f"unknown contour {kind!r}")


def _envelope(kind: str, u: np.ndarray) -> np.ndarray:
    if kind == "crescendo":
        return 0.45 + 0.55 * u
    if kind == "decrescendo":
        return 1.0 - 0.55 * u
    if kind == "flat":
        return np.ones_like(u)
    if kind == "peak":
        return 0.4 + 0.6 * np.sin(np.pi * u)
    raise ConfigurationError(f"unknown envelope {kind!r}")


def _bandpass_noise(rng, n: int, centre: float, width: float, sr: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec *= np.exp(-0.5 * ((freqs - centre) / (width / 2)) ** 2)
    x = np.fft.irfft(spec, n)
    return x / (np.sqrt(np.mean(x**2)) + 1e-12)


def _ramp(n: int, sr: int, ramp_s: float = 0.01) -> np.ndarray:
    r = max(1, min(int(ramp_s * sr), n // 2))
    w = np.ones(n)
    w[:r] = np.linspace(0.0, 1.0, r)
    w[n - r:] = np.linspace(1.0, 0.0, r)
    return w


def render_utterance(
    text: str,
    prosody: ProsodyParams,
    speaker: SpeakerParams,
    rng: np.random.Generator,
    sample_rate: int = SAMPLE_RATE,
) -> np.ndarray:
    """Render one utterance as float64 samples."""
    sr = sample_rate
    rate = prosody.rate * float(rng.uniform(0.95, 1.05))
    jitter_st = float(rng.uniform(-0.5, 0.5))
    lead = int(rng.uniform(0.15, 0.3) * sr)
    trail = int(rng.uniform(0.15, 0.3) * sr)

    # segment plan: (kind, symbol, n_samples)
    plan = []
    for w_i, word in enumerate(text.split()):
        if w_i:
            plan.append(("gap", " ", int(WORD_GAP_S * rate * sr)))
        for ch in word:
            if ch in CONSONANTS:
                plan.append(("cons", ch, int(CONSONANTS[ch][2] * rate * sr)))
            elif ch in VOWELS:
                plan.append(("vowel", ch, int(VOWEL_S * rate * sr)))
    body_n = sum(n for _, _, n in plan)
    u = np.arange(body_n) / max(body_n - 1, 1)
    f0 = speaker.base_f0 * 2.0 ** ((prosody.offset_st + jitter_st + _contour(prosody.contour, u)) / 12.0)
    env = _envelope(prosody.envelope, u) * prosody.level
    phase = 2 * np.pi * np.cumsum(f0) / sr

    body = np.zeros(body_n)
    pos = 0
    for kind, sym, n in plan:
        seg = slice(pos, pos + n)
        if kind == "vowel":
            formants = np.array(VOWELS[sym]) * speaker.formant_scale
            f0_seg = f0[seg]
            n_harm = int(min(10000.0, sr / 2 - 500) // f0_seg.min())
            k = np.arange(1, n_harm + 1)
            # harmonic amplitudes per sample: tilt x odd/even balance x formant resonances
            freqs = f0_seg[None, :] * k[:, None]
            tilt = 10 ** (speaker.tilt_db_per_oct * np.log2(k) / 20.0)
            oddeven = np.where(k % 2 == 1, 10 ** (speaker.odd_even_db / 40.0), 10 ** (-speaker.odd_even_db / 40.0))
            res = 0.03 + sum(1.0 / (1.0 + ((freqs - F) / (60.0 + 0.06 * F)) ** 2) for F in formants)
            amp = (tilt * oddeven)[:, None] * res
            amp /= np.sqrt(np.sum(amp**2, axis=0, keepdims=True)) + 1e-12
            voiced = np.sum(amp * np.sin(k[:, None] * phase[None, seg]), axis=0) * np.sqrt(2)
            breath = 0.03 * _bandpass_noise(rng, n, 3000.0, 4000.0, sr)
            body[seg] = (voiced + breath) * _ramp(n, sr)
        elif kind == "cons":
            centre, width, _ = CONSONANTS[sym]
            body[seg] = 0.6 * _bandpass_noise(rng, n, centre * speaker.formant_scale, width, sr) * _ramp(n, sr, 0.005)
        pos += n
    body *= env

    x = np.concatenate([np.zeros(lead), body, np.zeros(trail)])
    x += 1e-3 * rng.standard_normal(x.shape[0])
    return np.clip(x, -0.99, 0.99)


@dataclass(frozen=True)
class SyntheticLabel:
    utt_id: str
    content_class: int
    prosody_class: int
    speaker_class: int


def _split_for(n: int, n_per_cell: int) -> str:
    if n_per_cell >= 2 and n == n_per_cell - 1:
        return "test"
    if n_per_cell >= 3 and n == n_per_cell - 2:
        return "val"
    return "train"


def generate_synthetic_corpus(
    out_dir: str | Path,
    num_content: int = 4,
    num_prosody: int = 4,
    num_speakers: int = 4,
    n_per_cell: int = 10,
    seed: int = 0,
    sample_rate: int = SAMPLE_RATE,
):
    """Write ``wavs/``, ``manifest.tsv`` and ``labels.tsv`` under ``out_dir``.

    Every (content, prosody, speaker) cell holds ``n_per_cell`` items whose
    random nuisance (silence lengths, jitter, noise) is drawn from a generator
    seeded per item, so the output is bit-identical for a fixed ``seed``. In
    each cell the last item goes to the test split and the one before it to
    validation.

    Returns:
        (records, labels)
    """
    if min(num_content, num_prosody, num_speakers) < 2 or n_per_cell < 1:
        raise ConfigurationError("need at least 2 classes per factor and 1 item per cell")
    out_dir = Path(out_dir)
    (out_dir / "wavs").mkdir(parents=True, exist_ok=True)
    records, labels = [], []
    cells = itertools.product(range(num_content), range(num_prosody), range(num_speakers), range(n_per_cell))
    for idx, (c, p, s, n) in enumerate(cells):
        utt_id = f"c{c}_p{p}_s{s}_{n:03d}"
        rng = np.random.default_rng([seed, idx])
        text = content_text(c)
        x = render_utterance(text, prosody_params(p), speaker_params(s), rng, sample_rate)
        rel = f"wavs/{utt_id}.wav"
        w = Waveform(x, sample_rate)
        write_wav(out_dir / rel, w)
        records.append(UtteranceRecord(utt_id, f"spk{s}", rel, text, len(x) / sample_rate, _split_for(n, n_per_cell)))
        labels.append(SyntheticLabel(utt_id, c, p, s))
    write_manifest(out_dir / "manifest.tsv", records)
    write_labels(out_dir / "labels.tsv", labels)
    return records, labels


def write_labels(path: str | Path, labels: list[SyntheticLabel]) -> None:
    Path(path).write_text(
        "".join(f"{l.utt_id}\t{l.content_class}\t{l.prosody_class}\t{l.speaker_class}\n" for l in labels),
        encoding="utf-8",
    )


def read_labels(path: str | Path) -> list[SyntheticLabel]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            u, c, p, s = line.split("\t")
            out.append(SyntheticLabel(u, int(c), int(p), int(s)))
    return out
