"""Training loop: AdamW with per-epoch exponential decay, random decoder segments,
line-delimited metrics and deterministic seeding."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from dccomix.backbone.checkpoint import Checkpoint, load_checkpoint, load_model_state, save_checkpoint
from dccomix.backbone.losses import discriminator_loss, feature_loss, generator_loss
from dccomix.backbone.synthesizer import Synthesizer
from dccomix.codec.formats import rvq_from_bytes, rvq_to_bytes
from dccomix.codec.rvq import MiniRvq
from dccomix.config import ModelConfig
from dccomix.data.audio import read_wav
from dccomix.data.corpus import read_manifest, resolve_audio
from dccomix.data.spectrogram import linear_spectrogram, num_frames
from dccomix.data.text import CharTokenizer, intersperse
from dccomix.errors import ConfigurationError, InvalidInputError, NumericError

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-9
    lr_decay_per_epoch: float = 0.999875
    weight_decay: float = 0.01
    batch_size: int = 8
    max_steps: int = 2000
    segment_frames: int = 32
    seed: int = 0
    preset: str = "desk"
    checkpoint_interval: int = 0  # 0: final checkpoint only
    c_mel: float = 45.0
    c_kl: float = 1.0
    c_dur: float = 1.0
    c_fm: float = 2.0
    grad_clip: Optional[float] = None
    mixed_precision: bool = False

    def validate(self) -> "TrainConfig":
        if not 0 < self.lr_decay_per_epoch <= 1:
            raise ConfigurationError("lr_decay_per_epoch must be in (0, 1]")
        if self.batch_size < 1 or self.segment_frames < 1 or self.max_steps < 0:
            raise ConfigurationError("batch_size and segment_frames must be >= 1, max_steps >= 0")
        if self.mixed_precision:
            raise ConfigurationError("mixed precision needs an accelerator and is not available in this build")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """lr_init * decay ** epoch."""
    if epoch < 0:
        raise InvalidInputError("epoch must be non-negative")
    return cfg.lr_init * cfg.lr_decay_per_epoch ** epoch


# -- dataset -------------------------------------------------------------------


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    text: str
    tokens: torch.Tensor  # [Tx]
    spec: torch.Tensor  # [513, T]
    wav: torch.Tensor  # [T * hop]
    ref: torch.Tensor  # codes [D, Tc] or spectrogram [513, T]


def prepare_utterance(utt_id, speaker, text, w, model_cfg: ModelConfig, codec, tokenizer: CharTokenizer) -> Utterance:
    hop = model_cfg.hop_length
    spec = torch.from_numpy(linear_spectrogram(w))
    T = num_frames(len(w), hop)
    wav = np.zeros(T * hop, dtype=np.float32)
    wav[: len(w)] = w.samples
    tokens = torch.tensor(intersperse(tokenizer.tokenize(text)), dtype=torch.long)
    if model_cfg.ref_input == "codes":
        if codec is None:
            raise ConfigurationError("code-input reference encoder needs a codec")
        ref = torch.from_numpy(np.array(codec.encode(w).indices))
    else:
        ref = spec
    return Utterance(utt_id, speaker, text, tokens, spec, torch.from_numpy(wav), ref)


def load_dataset(manifest: str | Path, model_cfg: ModelConfig, codec, split: str | None = "train",
                 tokenizer: CharTokenizer | None = None, limit: int | None = None) -> list[Utterance]:
    tokenizer = tokenizer or CharTokenizer()
    records = [r for r in read_manifest(manifest) if split is None or r.split == split]
    if limit is not None:
        records = records[:limit]
    if not records:
        raise ConfigurationError(f"no {split} records in {manifest}")
    return [
        prepare_utterance(r.utt_id, r.speaker_id, r.text, read_wav(resolve_audio(manifest, r)), model_cfg, codec, tokenizer)
        for r in records
    ]


def collate(items: list[Utterance], model: Synthesizer) -> dict:
    B = len(items)
    tx = max(len(u.tokens) for u in items)
    ty = max(u.spec.shape[1] for u in items)
    tr = max(u.ref.shape[1] for u in items)
    hop = model.hop_length
    tokens = torch.zeros(B, tx, dtype=torch.long)
    spec = torch.zeros(B, items[0].spec.shape[0], ty)
    wav = torch.zeros(B, 1, ty * hop)
    ref = torch.zeros((B, items[0].ref.shape[0], tr), dtype=items[0].ref.dtype)
    for i, u in enumerate(items):
        tokens[i, : len(u.tokens)] = u.tokens
        spec[i, :, : u.spec.shape[1]] = u.spec
        wav[i, 0, : len(u.wav)] = u.wav
        ref[i, :, : u.ref.shape[1]] = u.ref
    return {
        "tokens": tokens,
        "token_lengths": torch.tensor([len(u.tokens) for u in items]),
        "spec": spec,
        "spec_lengths": torch.tensor([u.spec.shape[1] for u in items]),
        "wav": wav,
        "speakers": model.speaker_indices([u.speaker for u in items]),
        "ref": ref,
        "ref_lengths": torch.tensor([u.ref.shape[1] for u in items]),
    }


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[list[int]]:
    """Seeded shuffle of one pass over the data, chunked into batches (last may be short)."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]


# -- checkpoints -----------------------------------------------------------------


def make_checkpoint(model, run_config: dict, step: int, epoch: int, optimizers=None, schedulers=None, codec=None, extra=None) -> Checkpoint:
    blobs = {}
    if isinstance(codec, MiniRvq):
        blobs["codec"] = rvq_to_bytes(codec)
    return Checkpoint(
        config=run_config,
        model_state=model.state_dict(),
        step=step,
        epoch=epoch,
        optimizers={k: o.state_dict() for k, o in (optimizers or {}).items()},
        schedulers={k: s.state_dict() for k, s in (schedulers or {}).items()},
        blobs=blobs,
        extra=extra or {},
    )


def load_model(path: str | Path):
    """Rebuild (model, codec, checkpoint) from a checkpoint file; the model is in eval mode."""
    ckpt = load_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(ckpt.config["model"])
    except (KeyError, TypeError) as e:
        raise ConfigurationError(f"checkpoint config is incomplete: {e}") from None
    model = Synthesizer(cfg)
    if any(v.dtype == torch.float64 for v in ckpt.model_state.values()):
        model = model.double()
    load_model_state(model, ckpt.model_state)
    codec = rvq_from_bytes(ckpt.blobs["codec"]) if "codec" in ckpt.blobs else None
    return model.eval(), codec, ckpt


# -- loop ------------------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: Path
    log_path: Path
    steps: int
    last_metrics: dict = field(default_factory=dict)


def train_run(
    model: Synthesizer,
    dataset: list[Utterance],
    cfg: TrainConfig,
    out_dir: str | Path,
    run_config: dict | None = None,
    codec=None,
    log_every: int = 1,
) -> TrainResult:
    """Train ``model`` in place on ``dataset``; writes ``metrics.jsonl`` and ``checkpoint*.dcck``.

    One epoch is one pass over ``dataset``; the learning rate is multiplied by
    ``lr_decay_per_epoch`` at every epoch boundary. Any non-finite loss term
    aborts with a :class:`NumericError` naming the term and the step.
    """
    cfg.validate()
    if not dataset:
        raise ConfigurationError("empty training set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    run_config = run_config if run_config is not None else {"model": model.cfg.to_dict(), "train": asdict(cfg)}

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    optim_g = torch.optim.AdamW(model.generator_parameters(), cfg.lr_init, betas=tuple(cfg.betas), eps=cfg.eps,
                                weight_decay=cfg.weight_decay)
    sched_g = torch.optim.lr_scheduler.ExponentialLR(optim_g, gamma=cfg.lr_decay_per_epoch)
    optimizers, schedulers = {"g": optim_g}, {"g": sched_g}
    if model.disc is not None:
        optim_d = torch.optim.AdamW(model.disc.parameters(), cfg.lr_init, betas=tuple(cfg.betas), eps=cfg.eps,
                                    weight_decay=cfg.weight_decay)
        optimizers["d"] = optim_d
        schedulers["d"] = torch.optim.lr_scheduler.ExponentialLR(optim_d, gamma=cfg.lr_decay_per_epoch)

    model.train()
    step, epoch = 0, 0
    batches = epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch)
    cursor = 0
    last: dict = {}
    log_path.write_text("")
    ckpt_path = out_dir / "checkpoint.dcck"
    with log_path.open("a", encoding="utf-8") as log:
        while step < cfg.max_steps:
            if cursor == len(batches):
                epoch += 1
                for s in schedulers.values():
                    s.step()
                batches = epoch_batches(len(dataset), cfg.batch_size, cfg.seed, epoch)
                cursor = 0
            batch = collate([dataset[i] for i in batches[cursor]], model)
            cursor += 1

            out = model.train_forward(batch, cfg.segment_frames, generator=gen)
            terms = {"mel": out["mel"], "kl": out["kl"], "dur": out["dur"]}
            if model.disc is not None:
                y_d_r, y_d_g, _, _ = model.disc(out["y"], out["y_hat"].detach())
                loss_d = discriminator_loss(y_d_r, y_d_g)
                _check_finite({"disc": loss_d}, step)
                optim_d.zero_grad()
                loss_d.backward()
                optim_d.step()
                _, y_d_g, fmap_r, fmap_g = model.disc(out["y"], out["y_hat"])
                terms["adv"] = generator_loss(y_d_g)
                terms["fm"] = feature_loss(fmap_r, fmap_g)
                terms["disc"] = loss_d.detach()
            _check_finite(terms, step)
            total = cfg.c_mel * terms["mel"] + cfg.c_kl * terms["kl"] + cfg.c_dur * terms["dur"]
            if model.disc is not None:
                total = total + terms["adv"] + cfg.c_fm * terms["fm"]
            optim_g.zero_grad()
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.generator_parameters(), cfg.grad_clip)
            optim_g.step()

            last = {"step": step, "epoch": epoch, "lr": optim_g.param_groups[0]["lr"], "total": float(total.detach())}
            last.update({k: float(v.detach()) for k, v in terms.items()})
            if step % log_every == 0 or step == cfg.max_steps - 1:
                log.write(json.dumps(last, sort_keys=True) + "\n")
                log.flush()
            step += 1
            if cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0 and step < cfg.max_steps:
                save_checkpoint(out_dir / f"checkpoint_{step:07d}.dcck",
                                make_checkpoint(model, run_config, step, epoch, optimizers, schedulers, codec))

    save_checkpoint(ckpt_path, make_checkpoint(model, run_config, step, epoch, optimizers, schedulers, codec))
    model.eval()
    return TrainResult(ckpt_path, log_path, step, last)


def _check_finite(terms: dict, step: int) -> None:
    for name, v in terms.items():
        if not math.isfinite(float(v.detach()) if torch.is_tensor(v) else float(v)):
            raise NumericError(f"non-finite {name} loss at step {step}")


def read_metrics(path: str | Path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


def ablation_run(
    variant: str,
    manifest: str | Path,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    out_dir: str | Path,
    codec=None,
    run_config: dict | None = None,
    eval_seed: int = 0,
    max_pairs: int = 0,
):
    """Train and evaluate one ablation variant with everything else held fixed.

    ``no_mixer`` swaps in the strided-CNN reference encoder on the same code
    input, ``no_dc`` feeds the 513-channel linear spectrogram to the Mixer
    encoder. When a ``labels.tsv`` sits next to the manifest the leakage probe
    runs as well. Returns (TrainResult, EvalReport).
    """
    from dccomix.backbone.synthesizer import count_parameters
    from dccomix.config import variant_model_config
    from dccomix.evaluation import batch_evaluate, probe_corpus

    mcfg = variant_model_config(model_cfg, variant)
    out_dir = Path(out_dir)
    torch.manual_seed(cfg.seed)
    model = Synthesizer(mcfg)
    if run_config is not None:
        run_config = {**run_config, "model": mcfg.to_dict(), "variant": variant}
    dataset = load_dataset(manifest, mcfg, codec, split="train")
    result = train_run(model, dataset, cfg, out_dir, run_config, codec)
    report = batch_evaluate(manifest, model, codec, seed=eval_seed, max_pairs=max_pairs)
    labels = Path(manifest).parent / "labels.tsv"
    if labels.exists():
        probe = probe_corpus(model, Path(manifest).parent, codec, seed=eval_seed)
        report.prosody_probe_acc = probe["prosody_probe_acc"]
        report.content_probe_acc = probe["content_probe_acc"]
    report.param_counts = {variant: count_parameters(model)}
    report.write(out_dir / "report.txt")
    return result, report
