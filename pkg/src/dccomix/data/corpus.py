"""Corpus manifests and preparation of a multi-speaker recording directory."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from dccomix.data.audio import SAMPLE_RATE, read_wav, resample, write_wav
from dccomix.errors import ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)

MIN_DURATION_S = 0.7
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    audio_path: str
    text: str
    duration_s: float
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidInputError(f"unknown split {self.split!r}")


def write_manifest(path: str | Path, records: list[UtteranceRecord]) -> None:
    """One tab-separated record per line: utt_id, speaker_id, path, duration_s, split, text."""
    seen = set()
    lines = []
    for r in records:
        if r.utt_id in seen:
            raise InvalidInputError(f"duplicate utt_id {r.utt_id!r}")
        seen.add(r.utt_id)
        text = " ".join(r.text.split())
        lines.append(f"{r.utt_id}\t{r.speaker_id}\t{r.audio_path}\t{r.duration_s:.6f}\t{r.split}\t{text}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_manifest(path: str | Path) -> list[UtteranceRecord]:
    records = []
    seen = set()
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 6:
            raise InvalidInputError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(parts)}")
        utt_id, spk, audio, dur, split, text = parts
        if utt_id in seen:
            raise InvalidInputError(f"{path}:{lineno}: duplicate utt_id {utt_id!r}")
        seen.add(utt_id)
        records.append(UtteranceRecord(utt_id, spk, audio, text, float(dur), split))
    return records


def resolve_audio(manifest_path: str | Path, record: UtteranceRecord) -> Path:
    p = Path(record.audio_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


@dataclass
class PrepareConfig:
    target_rate: int = SAMPLE_RATE
    min_duration_s: float = MIN_DURATION_S
    test_fraction: float = 0.1
    val_per_speaker: int = 10
    min_items_per_speaker: int = 12
    seed: int = 0
    workers: int = 1


@dataclass
class CorpusStats:
    n_found: int = 0
    n_excluded_short: int = 0
    n_missing_text: int = 0
    counts: dict = field(default_factory=dict)
    hours: dict = field(default_factory=dict)
    fallback_speakers: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_sizes(n: int, cfg: PrepareConfig) -> tuple[int, int, int]:
    """(train, val, test) sizes for one speaker with ``n`` usable items."""
    if n >= cfg.min_items_per_speaker:
        n_test = _round_half_up(n * cfg.test_fraction)
        n_val = cfg.val_per_speaker
    else:
        # proportional fallback: keep at least one training item
        n_test = max(1, _round_half_up(n * cfg.test_fraction)) if n >= 3 else 0
        pool = n - n_test
        n_val = max(1, _round_half_up(pool * cfg.test_fraction)) if pool >= 2 else 0
    n_train = n - n_test - n_val
    return n_train, n_val, n_test


def assign_splits(items_by_speaker: dict[str, list[str]], cfg: PrepareConfig) -> dict[str, str]:
    """Per-speaker 9:1 train/test split, then a fixed number of training items moved to validation."""
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for spk in sorted(items_by_speaker):
        ids = sorted(items_by_speaker[spk])
        n_train, n_val, n_test = split_sizes(len(ids), cfg)
        if len(ids) < cfg.min_items_per_speaker:
            logger.warning("speaker %s has only %d usable items; proportional split %d/%d/%d",
                           spk, len(ids), n_train, n_val, n_test)
        order = [ids[i] for i in rng.permutation(len(ids))]
        for i, utt in enumerate(order):
            if i < n_test:
                out[utt] = "test"
            elif i < n_test + n_val:
                out[utt] = "val"
            else:
                out[utt] = "train"
    return out


def _find_text(source_dir: Path, wav: Path) -> str | None:
    candidates = [wav.with_suffix(".txt"), source_dir / "txt" / wav.parent.name / (wav.stem + ".txt")]
    for c in candidates:
        if c.is_file():
            return c.read_text(encoding="utf-8").strip()
    return None


def prepare_corpus(source_dir: str | Path, out_manifest: str | Path, cfg: PrepareConfig | None = None):
    """Resample, filter, split and write a manifest for ``source_dir``.

    Audio files are discovered recursively as ``<speaker>/<utt>.wav``; the
    transcript is read from a sibling ``<utt>.txt`` or ``txt/<speaker>/<utt>.txt``.
    Resampled 16-bit audio is written to ``wavs/`` next to the manifest.

    Returns:
        (records, CorpusStats)
    """
    cfg = cfg or PrepareConfig()
    source_dir = Path(source_dir)
    out_manifest = Path(out_manifest)
    wav_dir = out_manifest.parent / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    wavs = sorted(p for p in source_dir.rglob("*.wav") if p.is_file())
    if not wavs:
        raise ConfigurationError(f"no .wav files under {source_dir}")
    stats = CorpusStats(n_found=len(wavs))

    def process(wav: Path):
        text = _find_text(source_dir, wav)
        if not text:
            return ("missing_text", wav, None)
        w = resample(read_wav(wav), cfg.target_rate)
        if w.duration < cfg.min_duration_s:
            return ("short", wav, None)
        spk = wav.parent.name
        utt_id = f"{spk}_{wav.stem}" if not wav.stem.startswith(spk) else wav.stem
        rel = Path("wavs") / f"{utt_id}.wav"
        write_wav(out_manifest.parent / rel, w)
        return ("ok", wav, (utt_id, spk, rel.as_posix(), text, w.duration))

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            results = list(ex.map(process, wavs))
    else:
        results = [process(w) for w in wavs]

    kept = []
    for status, wav, item in results:
        if status == "short":
            stats.n_excluded_short += 1
        elif status == "missing_text":
            stats.n_missing_text += 1
            logger.warning("no transcript for %s; skipped", wav)
        else:
            kept.append(item)

    by_spk: dict[str, list[str]] = {}
    for utt_id, spk, *_ in kept:
        by_spk.setdefault(spk, []).append(utt_id)
    stats.fallback_speakers = sorted(s for s, v in by_spk.items() if len(v) < cfg.min_items_per_speaker)
    splits = assign_splits(by_spk, cfg)

    records = [
        UtteranceRecord(utt_id, spk, rel, text, dur, splits[utt_id])
        for utt_id, spk, rel, text, dur in sorted(kept)
    ]
    write_manifest(out_manifest, records)
    for s in SPLITS:
        sel = [r for r in records if r.split == s]
        stats.counts[s] = len(sel)
        stats.hours[s] = sum(r.duration_s for r in sel) / 3600.0
    logger.info("prepared %d utterances (%d too short, %d without text)",
                len(records), stats.n_excluded_short, stats.n_missing_text)
    return records, stats
