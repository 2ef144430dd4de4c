"""Mini residual vector quantizer over a fixed strided frame analyzer.

The analyzer is a strided convolution with windowed Fourier kernels (kernel
2 * stride, hop ``stride``) followed by triangular band pooling, a log and a
fitted affine normalisation. It produces one ``latent_dim`` vector per
``stride`` samples; the residual quantizer turns each into ``num_codebooks``
indices.

Convention for the trainer: every codebook after the first contains a frozen
all-zero codeword, so a stage can always leave the residual unchanged and the
residual energy never grows from one stage to the next.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from dccomix.data.audio import SAMPLE_RATE, Waveform
from dccomix.data.spectrogram import _hz_to_mel, _mel_to_hz
from dccomix.errors import ConfigurationError, InvalidInputError

logger = logging.getLogger(__name__)

_CHUNK = 2048


@dataclass(frozen=True)
class CodeMatrix:
    """D x T code indices with the codebook size and frame rate they refer to."""

    indices: np.ndarray
    codebook_size: int
    frame_rate: float

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 2 or idx.shape[0] < 1 or idx.shape[1] < 1:
            raise InvalidInputError(f"code matrix must be D x T with D, T >= 1, got shape {idx.shape}")
        if not np.issubdtype(idx.dtype, np.integer):
            raise InvalidInputError("code indices must be integers")
        if idx.min() < 0 or idx.max() >= self.codebook_size:
            raise InvalidInputError(f"code index out of range [0, {self.codebook_size})")
        idx = idx.astype(np.int64, copy=True)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def num_codebooks(self) -> int:
        return int(self.indices.shape[0])

    @property
    def num_frames(self) -> int:
        return int(self.indices.shape[1])

    def __eq__(self, other):
        if not isinstance(other, CodeMatrix):
            return NotImplemented
        return (
            self.codebook_size == other.codebook_size
            and self.frame_rate == other.frame_rate
            and np.array_equal(self.indices, other.indices)
        )

    __hash__ = None


@dataclass
class RvqConfig:
    sample_rate: int = SAMPLE_RATE
    stride: int = 320
    latent_dim: int = 32
    num_codebooks: int = 8
    codebook_size: int = 64
    fmin: float = 50.0
    fmax: float = 8000.0
    ema_decay: float = 0.99
    iterations: int = 200
    batch_size: int = 4096
    dead_code_threshold: float = 1e-3
    seed: int = 0


def _band_matrix(n_bins: int, sample_rate: int, n_fft: int, n_bands: int, fmin: float, fmax: float) -> np.ndarray:
    freqs = np.linspace(0.0, sample_rate / 2, n_bins)
    pts = _mel_to_hz(np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_bands + 2))
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    w = np.maximum(0.0, np.minimum((freqs - lo) / (mid - lo), (hi - freqs) / (hi - mid)))
    # bands narrower than one bin would be empty; give them the nearest bin
    for b in np.where(w.sum(axis=1) == 0)[0]:
        w[b, np.argmin(np.abs(freqs - mid[b, 0]))] = 1.0
    return w / w.sum(axis=1, keepdims=True)


def _nearest_fast(x: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # |x|^2 - 2 x.c + |c|^2 via BLAS; used by the trainer only, encoding uses the exact form
    d = np.sum(x**2, axis=1)[:, None] - 2.0 * (x @ codebook.T) + np.sum(codebook**2, axis=1)[None, :]
    i = np.argmin(d, axis=1)
    return i, np.maximum(d[np.arange(d.shape[0]), i], 0.0)


def _nearest(x: np.ndarray, codebook: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest codeword per row (ties -> lowest index) and the squared distance."""
    idx = np.empty(x.shape[0], dtype=np.int64)
    dist = np.empty(x.shape[0], dtype=np.float64)
    for s in range(0, x.shape[0], _CHUNK):
        d = np.sum((x[s:s + _CHUNK, None, :] - codebook[None, :, :]) ** 2, axis=-1)
        i = np.argmin(d, axis=1)
        idx[s:s + _CHUNK] = i
        dist[s:s + _CHUNK] = d[np.arange(d.shape[0]), i]
    return idx, dist


class MiniRvq:
    """Frame analyzer plus ``num_codebooks`` residual codebooks of ``codebook_size`` entries.

    Instances are treated as immutable once trained; all encoding methods are
    pure and safe to call from several threads.
    """

    def __init__(
        self,
        codebooks: np.ndarray,
        ema_counts: np.ndarray | None = None,
        latent_mean: np.ndarray | None = None,
        latent_scale: float = 1.0,
        sample_rate: int = SAMPLE_RATE,
        stride: int = 320,
        fmin: float = 50.0,
        fmax: float = 8000.0,
    ):
        codebooks = np.asarray(codebooks, dtype=np.float64)
        if codebooks.ndim != 3:
            raise ConfigurationError("codebooks must be D x K x d")
        if not np.all(np.isfinite(codebooks)):
            raise ConfigurationError("codebooks contain non-finite values")
        if sample_rate % stride:
            raise ConfigurationError(f"stride {stride} must divide the sample rate {sample_rate}")
        D, K, d = codebooks.shape
        self.codebooks = codebooks
        self.ema_counts = np.zeros((D, K)) if ema_counts is None else np.asarray(ema_counts, dtype=np.float64)
        if self.ema_counts.shape != (D, K) or np.any(self.ema_counts < 0):
            raise ConfigurationError("ema_counts must be a nonnegative D x K array")
        self.latent_mean = np.zeros(d) if latent_mean is None else np.asarray(latent_mean, dtype=np.float64)
        self.latent_scale = float(latent_scale)
        self.sample_rate = int(sample_rate)
        self.stride = int(stride)
        self.fmin = float(fmin)
        self.fmax = float(fmax)
        self._window = np.hanning(2 * stride + 1)[:-1]
        self._bands = _band_matrix(stride + 1, sample_rate, 2 * stride, d, fmin, fmax)

    @property
    def num_codebooks(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.codebooks.shape[2]

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.stride

    def num_frames(self, num_samples: int) -> int:
        return math.ceil(num_samples / self.stride)

    # analysis -----------------------------------------------------------
    def raw_features(self, w: Waveform) -> np.ndarray:
        """Un-normalised log band energies, T x d."""
        if w.sample_rate != self.sample_rate:
            raise ConfigurationError(f"waveform is {w.sample_rate} Hz but the codec runs at {self.sample_rate} Hz")
        n = len(w)
        if n < 1:
            raise InvalidInputError("empty waveform")
        T = self.num_frames(n)
        half = self.stride // 2
        padded = np.zeros(2 * self.stride + (T - 1) * self.stride)
        padded[half:half + n] = w.samples
        frames = np.lib.stride_tricks.sliding_window_view(padded, 2 * self.stride)[:: self.stride][:T]
        power = np.abs(np.fft.rfft(frames * self._window, axis=-1)) ** 2
        return np.log(power @ self._bands.T + 1e-8)

    def analyze(self, w: Waveform) -> np.ndarray:
        """Normalised latent frames, T x d."""
        return (self.raw_features(w) - self.latent_mean) / self.latent_scale

    # quantization -------------------------------------------------------
    def quantize_frames(self, latents: np.ndarray, num_codebooks: int | None = None):
        """Greedy residual quantization of T x d latents.

        Returns:
            indices (D x T), quantized (T x d), residual_energy (D x T) where
            ``residual_energy[i]`` is the squared norm left after stage ``i``.
        """
        latents = np.asarray(latents, dtype=np.float64)
        if latents.ndim != 2 or latents.shape[1] != self.latent_dim:
            raise InvalidInputError(f"expected T x {self.latent_dim} latents, got {latents.shape}")
        if not np.all(np.isfinite(latents)):
            raise InvalidInputError("latent contains non-finite values")
        D = self.num_codebooks if num_codebooks is None else num_codebooks
        residual = latents.copy()
        quantized = np.zeros_like(latents)
        indices = np.empty((D, latents.shape[0]), dtype=np.int64)
        energy = np.empty((D, latents.shape[0]))
        for i in range(D):
            idx, dist = _nearest(residual, self.codebooks[i])
            chosen = self.codebooks[i][idx]
            quantized += chosen
            residual -= chosen
            indices[i] = idx
            energy[i] = dist
        return indices, quantized, energy

    def quantize_residual(self, latent: np.ndarray):
        """Single-vector form: (indices [D], quantized [d], residual_energy [D])."""
        latent = np.asarray(latent, dtype=np.float64)
        if latent.shape != (self.latent_dim,):
            raise InvalidInputError(f"latent must have dimension {self.latent_dim}")
        idx, q, e = self.quantize_frames(latent[None, :])
        return idx[:, 0], q[0], e[:, 0]

    def encode(self, w: Waveform) -> CodeMatrix:
        if len(w) < self.stride:
            raise InvalidInputError(f"waveform shorter than one stride ({self.stride} samples)")
        idx, _, _ = self.quantize_frames(self.analyze(w))
        return CodeMatrix(idx, self.codebook_size, self.frame_rate)

    def dequantize(self, codes: CodeMatrix | np.ndarray) -> np.ndarray:
        """Sum of the indexed codewords per frame, T x d."""
        idx = codes.indices if isinstance(codes, CodeMatrix) else np.asarray(codes)
        if idx.ndim != 2 or idx.shape[0] != self.num_codebooks:
            raise InvalidInputError(f"expected {self.num_codebooks} codebooks, got shape {idx.shape}")
        if idx.min() < 0 or idx.max() >= self.codebook_size:
            raise InvalidInputError(f"code index out of range [0, {self.codebook_size})")
        out = np.zeros((idx.shape[1], self.latent_dim))
        for i in range(self.num_codebooks):
            out += self.codebooks[i][idx[i]]
        return out

    def codebook_usage(self, latents: np.ndarray) -> np.ndarray:
        """Fraction of entries used per stage on ``latents``."""
        idx, _, _ = self.quantize_frames(latents)
        return np.array([np.unique(row).size / self.codebook_size for row in idx])


# module-level API -------------------------------------------------------
def encode(w: Waveform, q: MiniRvq) -> CodeMatrix:
    return q.encode(w)


def quantize_residual(latent: np.ndarray, q: MiniRvq):
    return q.quantize_residual(latent)


def dequantize(codes: CodeMatrix, q: MiniRvq) -> np.ndarray:
    return q.dequantize(codes)


# training ---------------------------------------------------------------
def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator, existing: np.ndarray | None = None) -> np.ndarray:
    """k-means++ seeding; ``existing`` centres (e.g. the frozen zero) count as already chosen."""
    centres = []
    if existing is not None and len(existing):
        _, d2 = _nearest_fast(x, existing)
    else:
        first = x[rng.integers(x.shape[0])]
        centres.append(first)
        d2 = np.sum((x - first) ** 2, axis=1)
    while len(centres) < k:
        total = d2.sum()
        if total <= 0:
            # fewer distinct points than centres
            centres.append(x[rng.integers(x.shape[0])])
            continue
        c = x[rng.choice(x.shape[0], p=d2 / total)]
        centres.append(c)
        d2 = np.minimum(d2, np.sum((x - c) ** 2, axis=1))
    return np.array(centres)


def _principal_order(codebook: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Permutation sorting codewords along their dominant axis, so nearby raw indices are similar."""
    w = weights + 1e-6
    mean = (codebook * w[:, None]).sum(0) / w.sum()
    centred = codebook - mean
    cov = (centred * w[:, None]).T @ centred
    _, vecs = np.linalg.eigh(cov)
    axis = vecs[:, -1]
    if axis.sum() < 0:
        axis = -axis
    return np.argsort(codebook @ axis, kind="stable")


def fit_codebooks(latents: np.ndarray, cfg: RvqConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fit residual codebooks stage by stage with k-means++ seeding and EMA updates.

    Returns:
        (codebooks D x K x d, ema_counts D x K)
    """
    x = np.asarray(latents, dtype=np.float64)
    N, d = x.shape
    K, D = cfg.codebook_size, cfg.num_codebooks
    if N < K * D:
        raise ConfigurationError(f"need at least K x D = {K * D} frames to train, got {N}")
    rng = np.random.default_rng(cfg.seed)
    books = np.zeros((D, K, d))
    counts = np.zeros((D, K))
    residual = x.copy()
    gamma = cfg.ema_decay
    for stage in range(D):
        frozen = np.zeros(K, dtype=bool)
        if stage > 0:
            frozen[0] = True
        n_free = int((~frozen).sum())
        book = np.zeros((K, d))
        if n_free:
            sample = residual if N <= 20000 else residual[rng.choice(N, 20000, replace=False)]
            book[~frozen] = _kmeans_pp(sample, n_free, rng, existing=book[frozen] if frozen.any() else None)
        ema_n = np.ones(K)
        ema_sum = book.copy()
        for _ in range(cfg.iterations if n_free else 0):
            batch = residual if N <= cfg.batch_size else residual[rng.choice(N, cfg.batch_size, replace=False)]
            idx, dist = _nearest_fast(batch, book)
            hits = np.bincount(idx, minlength=K).astype(np.float64)
            sums = np.zeros((K, d))
            np.add.at(sums, idx, batch)
            ema_n = gamma * ema_n + (1 - gamma) * hits
            ema_sum = gamma * ema_sum + (1 - gamma) * sums
            update = ~frozen
            book[update] = ema_sum[update] / np.maximum(ema_n[update], 1e-12)[:, None]
            # re-seed starved codewords from the worst-quantized frames of this batch
            dead = np.where(update & (ema_n < cfg.dead_code_threshold * batch.shape[0] / K))[0]
            if dead.size:
                worst = np.argsort(-dist, kind="stable")[: dead.size]
                book[dead] = batch[worst]
                ema_n[dead] = 1.0
                ema_sum[dead] = batch[worst]
        ema_n[frozen] = 0.0
        idx, _ = _nearest_fast(residual, book)
        hits = np.bincount(idx, minlength=K).astype(np.float64)
        order = _principal_order(book, hits) if n_free > 1 else np.arange(K)
        books[stage] = book[order]
        counts[stage] = np.maximum(ema_n[order], 0.0)
        residual -= book[idx]
        logger.debug("stage %d: mean residual energy %.4f", stage, float(np.mean(np.sum(residual**2, axis=1))))
    return books, counts


def train_mini_rvq(corpus, cfg: RvqConfig | None = None) -> MiniRvq:
    """Fit the analyzer normalisation and the residual codebooks on ``corpus`` (Waveforms)."""
    cfg = cfg or RvqConfig()
    corpus = list(corpus)
    if not corpus:
        raise ConfigurationError("empty training corpus")
    probe = MiniRvq(
        np.zeros((cfg.num_codebooks, cfg.codebook_size, cfg.latent_dim)),
        sample_rate=cfg.sample_rate,
        stride=cfg.stride,
        fmin=cfg.fmin,
        fmax=cfg.fmax,
    )
    feats = np.concatenate([probe.raw_features(w) for w in corpus], axis=0)
    mean = feats.mean(axis=0)
    scale = float(np.sqrt(np.mean((feats - mean) ** 2))) or 1.0
    books, counts = fit_codebooks((feats - mean) / scale, cfg)
    return MiniRvq(books, counts, mean, scale, cfg.sample_rate, cfg.stride, cfg.fmin, cfg.fmax)
