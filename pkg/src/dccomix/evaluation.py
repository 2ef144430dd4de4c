"""Objective evaluation: speaker similarity, discrete-code similarity, batch
reports, content-leakage probes and the prosody contrast test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from dccomix.backbone.synthesizer import Synthesizer, reference_tensor, synthesize
from dccomix.codec.rvq import CodeMatrix
from dccomix.data.audio import SAMPLE_RATE, Waveform, read_wav
from dccomix.data.corpus import UtteranceRecord, read_manifest, resolve_audio
from dccomix.data.spectrogram import log_mel_spectrogram
from dccomix.data.text import CharTokenizer, intersperse
from dccomix.errors import ConfigurationError, EnvironmentUnavailableError, InvalidInputError

REPORT_MAGIC = "# dccomix-eval-report v1"
CODE_SIM_MODES = ("dequantized", "histogram")


def cosine(a, b) -> float:
    """a . b / (|a| |b|), clipped to [-1, 1]; exactly 1.0 for identical inputs."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InvalidInputError(f"length mismatch: {a.size} vs {b.size}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InvalidInputError("non-finite vector")
    sa, sb = np.max(np.abs(a)), np.max(np.abs(b))
    if sa == 0 or sb == 0:
        raise InvalidInputError("cosine of a zero-norm vector is undefined")
    a, b = a / sa, b / sb
    # sqrt(x * x) == x in IEEE arithmetic, so identical vectors give exactly 1
    c = float(np.dot(a, b) / math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b))))
    return min(1.0, max(-1.0, c))


class MelStatsEmbedder:
    """Hermetic speaker embedder: per-band mean and variance of the log-mel
    spectrogram over active frames (within ``active_range`` nats of the
    loudest frame)."""

    def __init__(self, active_range: float = 7.0):
        self.active_range = active_range

    def __call__(self, w: Waveform) -> np.ndarray:
        if w.sample_rate != SAMPLE_RATE:
            raise EnvironmentUnavailableError(f"embedder expects {SAMPLE_RATE} Hz audio, got {w.sample_rate}")
        mel = log_mel_spectrogram(torch.from_numpy(np.asarray(w.samples, dtype=np.float64))).numpy()
        level = mel.mean(axis=0)
        active = mel[:, level >= level.max() - self.active_range]
        return np.concatenate([active.mean(axis=1), active.var(axis=1)])


def speaker_similarity(ground_truth: Waveform, synthesized: Waveform, embedder: Callable | None = None) -> float:
    embedder = embedder or MelStatsEmbedder()
    try:
        a, b = embedder(ground_truth), embedder(synthesized)
    except EnvironmentUnavailableError:
        raise
    except Exception as e:
        raise EnvironmentUnavailableError(f"speaker embedder failed: {e}") from None
    return cosine(a, b)


def _codes(x, codec) -> CodeMatrix:
    if isinstance(x, CodeMatrix):
        return x
    if len(x) < getattr(codec, "stride", 1):
        raise InvalidInputError("waveform too short to encode")
    return codec.encode(x)


def code_vector(x, codec, mode: str = "dequantized") -> np.ndarray:
    """Length-invariant vector of one utterance's codes: mean dequantized latent
    (default) or the concatenated per-codebook index histograms."""
    if mode not in CODE_SIM_MODES:
        raise ConfigurationError(f"unknown code similarity mode {mode!r}")
    codes = _codes(x, codec)
    if codes.num_frames < 1:
        raise InvalidInputError("zero-length encoding")
    if mode == "dequantized":
        if not hasattr(codec, "dequantize"):
            raise ConfigurationError("codec cannot dequantize; use histogram mode")
        return codec.dequantize(codes).mean(axis=0)
    K = codes.codebook_size
    return np.concatenate([np.bincount(row, minlength=K) / codes.num_frames for row in codes.indices])


def code_similarity(reference, synthesized, codec, mode: str = "dequantized") -> float:
    return cosine(code_vector(reference, codec, mode), code_vector(synthesized, codec, mode))


# -- reports -----------------------------------------------------------------------


@dataclass
class PairRecord:
    utt_id: str
    reference_id: str
    cos_s: float
    cos_d: float


@dataclass
class EvalReport:
    pairs: list = field(default_factory=list)
    seed: int = 0
    prosody_probe_acc: Optional[float] = None
    content_probe_acc: Optional[float] = None
    param_counts: dict = field(default_factory=dict)

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def mean_cos_s(self) -> float:
        return math.fsum(p.cos_s for p in self.pairs) / len(self.pairs) if self.pairs else float("nan")

    @property
    def mean_cos_d(self) -> float:
        return math.fsum(p.cos_d for p in self.pairs) / len(self.pairs) if self.pairs else float("nan")

    def to_text(self) -> str:
        """Key-value header, a blank line, then one tab-separated line per pair.

        Header keys: n_pairs, mean_cos_s, mean_cos_d, seed, prosody_probe_acc,
        content_probe_acc, param_count.<variant>. Pair columns: utt_id,
        reference_id, cos_s, cos_d. Floats use shortest round-trip repr; absent
        values are ``na``.
        """
        def f(v):
            return "na" if v is None else repr(float(v))

        lines = [
            REPORT_MAGIC,
            f"n_pairs: {self.n_pairs}",
            f"mean_cos_s: {f(self.mean_cos_s)}",
            f"mean_cos_d: {f(self.mean_cos_d)}",
            f"seed: {self.seed}",
            f"prosody_probe_acc: {f(self.prosody_probe_acc)}",
            f"content_probe_acc: {f(self.content_probe_acc)}",
        ]
        lines += [f"param_count.{k}: {int(v)}" for k, v in sorted(self.param_counts.items())]
        lines.append("")
        lines.append("utt_id\treference_id\tcos_s\tcos_d")
        lines += [f"{p.utt_id}\t{p.reference_id}\t{p.cos_s!r}\t{p.cos_d!r}" for p in self.pairs]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        lines = text.splitlines()
        if not lines or lines[0] != REPORT_MAGIC:
            raise InvalidInputError("not an evaluation report")
        header, i = {}, 1
        while i < len(lines) and lines[i]:
            k, v = lines[i].split(": ", 1)
            header[k] = v
            i += 1
        rows = lines[i + 2:]
        pairs = []
        for row in rows:
            u, r, s, d = row.split("\t")
            pairs.append(PairRecord(u, r, float(s), float(d)))
        if int(header["n_pairs"]) != len(pairs):
            raise InvalidInputError("n_pairs does not match the number of pair records")

        def opt(k):
            return None if header.get(k, "na") == "na" else float(header[k])

        return cls(
            pairs=pairs,
            seed=int(header.get("seed", 0)),
            prosody_probe_acc=opt("prosody_probe_acc"),
            content_probe_acc=opt("content_probe_acc"),
            param_counts={k[len("param_count."):]: int(v) for k, v in header.items() if k.startswith("param_count.")},
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def pair_references(records: Sequence[UtteranceRecord], seed: int) -> list[tuple[UtteranceRecord, UtteranceRecord]]:
    """For each record, a uniformly drawn same-split reference with different text (seeded)."""
    if len(records) < 2:
        raise ConfigurationError("need at least two utterances to form content-differing pairs")
    rng = np.random.default_rng(seed)
    pairs = []
    for r in records:
        cands = [c for c in records if c.split == r.split and c.text != r.text]
        if not cands:
            raise ConfigurationError(f"no reference with different text for {r.utt_id}")
        pairs.append((r, cands[int(rng.integers(len(cands)))]))
    return pairs


def text_tokens(text: str, tokenizer: CharTokenizer | None = None) -> list[int]:
    return intersperse((tokenizer or CharTokenizer()).tokenize(text))


def batch_evaluate(
    manifest: str | Path,
    model: Synthesizer,
    codec,
    seed: int = 0,
    split: str | None = "test",
    embedder: Callable | None = None,
    noise_scale: float = 0.0,
    noise_scale_w: float = 0.0,
    max_pairs: int = 0,
    tokenizer: CharTokenizer | None = None,
    code_mode: str = "dequantized",
) -> EvalReport:
    """Synthesize every utterance of ``split`` with a randomly paired reference whose
    text differs, and score cos_s (vs. the ground truth) and cos_d (vs. the reference)."""
    records = [r for r in read_manifest(manifest) if split is None or r.split == split]
    if not records:
        raise ConfigurationError(f"manifest has no {split} records")
    pairs = pair_references(records, seed)
    if max_pairs:
        pairs = pairs[:max_pairs]
    embedder = embedder or MelStatsEmbedder()
    out = []
    for i, (u, ref) in enumerate(pairs):
        gt = read_wav(resolve_audio(manifest, u))
        ref_w = read_wav(resolve_audio(manifest, ref))
        y = synthesize(text_tokens(u.text, tokenizer), u.speaker_id, ref_w, model, codec,
                       noise_scale=noise_scale, noise_scale_w=noise_scale_w, seed=seed * 1_000_003 + i)
        out.append(PairRecord(u.utt_id, ref.utt_id, speaker_similarity(gt, y, embedder),
                              code_similarity(ref_w, y, codec, code_mode)))
    return EvalReport(pairs=out, seed=seed)


# -- probes ------------------------------------------------------------------------


def linear_probe(features: np.ndarray, labels: Sequence[int], seed: int = 0, test_fraction: float = 0.2,
                 l2: float = 1e-3) -> float:
    """Held-out accuracy of an L2-regularised multinomial logistic regression
    on standardized features (stratified split)."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.preprocessing import StandardScaler

    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    if len(np.unique(y)) < 2:
        raise ConfigurationError("probe needs at least two classes")
    x_tr, x_te, y_tr, y_te = train_test_split(x, y, test_size=test_fraction, random_state=seed, stratify=y)
    scaler = StandardScaler().fit(x_tr)
    clf = LogisticRegression(C=1.0 / (l2 * len(y_tr)), max_iter=10_000)
    clf.fit(scaler.transform(x_tr), y_tr)
    return float(np.mean(clf.predict(scaler.transform(x_te)) == y_te))


def leakage_probe(embeddings: np.ndarray, prosody_labels, content_labels, seed: int = 0) -> dict:
    for name, lab in (("prosody", prosody_labels), ("content", content_labels)):
        if len(set(np.asarray(lab).tolist())) < 2:
            raise ConfigurationError(f"{name} labels have fewer than 2 classes")
    return {
        "prosody_probe_acc": linear_probe(embeddings, prosody_labels, seed),
        "content_probe_acc": linear_probe(embeddings, content_labels, seed),
    }


@torch.no_grad()
def style_embeddings(model: Synthesizer, references: Sequence, codec=None) -> np.ndarray:
    """Frozen reference-encoder embeddings (evaluation mode) for a list of references."""
    was = model.training
    model.eval()
    try:
        out = [model.style(reference_tensor(r, model, codec))[0].double().numpy() for r in references]
    finally:
        model.train(was)
    return np.stack(out)


def probe_corpus(model: Synthesizer, corpus_dir: str | Path, codec, seed: int = 0) -> dict:
    """Leakage probe over every item of a synthetic corpus directory (manifest.tsv + labels.tsv)."""
    from dccomix.data.synthetic import read_labels

    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.tsv"
    recs = {r.utt_id: r for r in read_manifest(manifest)}
    labels = read_labels(corpus_dir / "labels.tsv")
    refs = [read_wav(resolve_audio(manifest, recs[l.utt_id])) for l in labels]
    emb = style_embeddings(model, refs, codec)
    return leakage_probe(emb, [l.prosody_class for l in labels], [l.content_class for l in labels], seed)


# -- prosody contrast ----------------------------------------------------------------


@dataclass
class ContrastResult:
    own: np.ndarray
    mismatched: np.ndarray
    wins: int
    n: int
    p_value: float

    @property
    def mean_own(self) -> float:
        return float(np.mean(self.own))

    @property
    def mean_mismatched(self) -> float:
        return float(np.mean(self.mismatched))


def sign_test(own: np.ndarray, other: np.ndarray) -> tuple[int, int, float]:
    """One-sided paired sign test of own > other; ties are dropped."""
    from scipy.stats import binomtest

    d = np.asarray(own) - np.asarray(other)
    wins, n = int(np.sum(d > 0)), int(np.sum(d != 0))
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return wins, n, float(p)


def prosody_contrast(model: Synthesizer, corpus_dir: str | Path, codec, seed: int = 0, split: str = "test",
                     code_mode: str = "dequantized") -> ContrastResult:
    """For each test item u: reference R = same speaker and prosody, other content;
    R' = R's speaker and content with a different prosody. Synthesize u's text from
    R and compare code_similarity(y, R) with code_similarity(y, R')."""
    from dccomix.data.synthetic import read_labels

    corpus_dir = Path(corpus_dir)
    manifest = corpus_dir / "manifest.tsv"
    recs = {r.utt_id: r for r in read_manifest(manifest)}
    lab = {l.utt_id: l for l in read_labels(corpus_dir / "labels.tsv")}
    pool = [u for u in lab if recs[u].split == split]
    n_content = len({l.content_class for l in lab.values()})
    n_prosody = len({l.prosody_class for l in lab.values()})
    rng = np.random.default_rng(seed)
    own, mis = [], []

    def pick(c, p, s):
        cands = sorted(u for u in pool if (lab[u].content_class, lab[u].prosody_class, lab[u].speaker_class) == (c, p, s))
        return cands[int(rng.integers(len(cands)))]

    for i, u in enumerate(sorted(pool)):
        lu = lab[u]
        c2 = (lu.content_class + 1 + int(rng.integers(n_content - 1))) % n_content
        p2 = (lu.prosody_class + 1 + int(rng.integers(n_prosody - 1))) % n_prosody
        r_id = pick(c2, lu.prosody_class, lu.speaker_class)
        r2_id = pick(c2, p2, lu.speaker_class)
        ref = read_wav(resolve_audio(manifest, recs[r_id]))
        ref2 = read_wav(resolve_audio(manifest, recs[r2_id]))
        y = synthesize(text_tokens(recs[u].text), recs[u].speaker_id, ref, model, codec,
                       noise_scale=0.0, noise_scale_w=0.0, seed=seed * 1_000_003 + i)
        own.append(code_similarity(ref, y, codec, code_mode))
        mis.append(code_similarity(ref2, y, codec, code_mode))
    own, mis = np.array(own), np.array(mis)
    wins, n, p = sign_test(own, mis)
    return ContrastResult(own, mis, wins, n, p)
