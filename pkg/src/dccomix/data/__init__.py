"""Audio I/O, spectrogram front-end, text tokenizer and corpora."""

from dccomix.data.audio import SAMPLE_RATE, Waveform, read_wav, resample, write_wav
from dccomix.data.corpus import (
    PrepareConfig,
    UtteranceRecord,
    prepare_corpus,
    read_manifest,
    write_manifest,
)
from dccomix.data.spectrogram import linear_spectrogram
from dccomix.data.synthetic import generate_synthetic_corpus, read_labels
from dccomix.data.text import CharTokenizer, tokenize

__all__ = [
    "SAMPLE_RATE",
    "CharTokenizer",
    "PrepareConfig",
    "UtteranceRecord",
    "Waveform",
    "generate_synthetic_corpus",
    "linear_spectrogram",
    "prepare_corpus",
    "read_labels",
    "read_manifest",
    "read_wav",
    "resample",
    "tokenize",
    "write_manifest",
    "write_wav",
]
