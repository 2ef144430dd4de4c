"""Model presets and hierarchical run configuration.

A run configuration is a nested dict with the sections ``model``, ``train``,
``codec``, ``data`` and ``eval``. It is resolved as defaults (from the preset)
<- config file (YAML or JSON) <- command-line overrides, and the resolved
result is written next to every output as a sorted-key JSON snapshot.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from dccomix.errors import ConfigurationError

PRESETS = ("desk", "paper_scale")
VARIANTS = ("full", "no_mixer", "no_dc")
# 2000 desk steps at 2e-4 leave the decoder too quiet to follow the reference level
DESK_LR = 5e-4


@dataclass
class ModelConfig:
    """Synthesizer hyper-parameters (desk defaults).

    The global condition has ``speaker_dim + style_dim`` channels; the style
    dimension equals the reference-encoder GRU state size.
    """

    vocab_size: int = 36
    speakers: list = field(default_factory=lambda: ["spk0"])
    # text encoder / latent
    hidden_channels: int = 64
    inter_channels: int = 64
    filter_channels: int = 256
    n_heads: int = 2
    text_layers: int = 2
    text_kernel: int = 3
    p_dropout: float = 0.1
    # posterior encoder
    spec_channels: int = 513
    posterior_layers: int = 4
    posterior_kernel: int = 5
    # flow
    flow_steps: int = 2
    flow_layers: int = 2
    flow_kernel: int = 5
    # stochastic duration predictor
    sdp_filter: int = 64
    sdp_kernel: int = 3
    sdp_flows: int = 2
    sdp_dropout: float = 0.5
    # decoder
    resblock: str = "2"
    resblock_kernels: list = field(default_factory=lambda: [3])
    resblock_dilations: list = field(default_factory=lambda: [[1, 3]])
    upsample_rates: list = field(default_factory=lambda: [8, 8, 2, 2])
    upsample_initial: int = 128
    upsample_kernels: list = field(default_factory=lambda: [16, 16, 4, 4])
    # conditioning
    speaker_dim: int = 32
    style_dim: int = 64
    # reference encoder
    refenc_kind: str = "mixer"
    ref_input: str = "codes"
    code_mode: str = "raw"
    code_embed_dim: int = 8
    refenc_blocks: int = 6
    refenc_kernel: int = 3
    refenc_expansion: int = 4
    refenc_dropout: float = 0.1
    mixer_channels: Optional[int] = None
    gst_filters: list = field(default_factory=lambda: [32, 32, 64, 64, 128, 128])
    num_codebooks: int = 8
    codebook_size: int = 64
    # discriminator and audio
    use_discriminator: bool = False
    hop_length: int = 256
    sample_rate: int = 24000

    def validate(self) -> "ModelConfig":
        prod = 1
        for r in self.upsample_rates:
            prod *= int(r)
        if prod != self.hop_length:
            raise ConfigurationError(f"decoder upsampling {prod} != hop length {self.hop_length}")
        if len(self.upsample_rates) != len(self.upsample_kernels):
            raise ConfigurationError("upsample_rates and upsample_kernels differ in length")
        if len(self.resblock_kernels) != len(self.resblock_dilations):
            raise ConfigurationError("resblock_kernels and resblock_dilations differ in length")
        if not self.speakers:
            raise ConfigurationError("model needs at least one speaker")
        if len(set(self.speakers)) != len(self.speakers):
            raise ConfigurationError("duplicate speaker ids")
        if self.inter_channels % 2:
            raise ConfigurationError("inter_channels must be even")
        if self.refenc_kind not in ("mixer", "gst"):
            raise ConfigurationError(f"unknown reference encoder {self.refenc_kind!r}")
        if self.ref_input not in ("codes", "spectrogram"):
            raise ConfigurationError(f"unknown reference input {self.ref_input!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))


def _paper_model() -> ModelConfig:
    # standard VITS dimensions, concat conditioning, h = 256 style, Mixer at input width
    return ModelConfig(
        vocab_size=100,
        speakers=[f"p{i:03d}" for i in range(108)],
        hidden_channels=192,
        inter_channels=192,
        filter_channels=768,
        n_heads=2,
        text_layers=6,
        text_kernel=3,
        posterior_layers=16,
        posterior_kernel=5,
        flow_steps=4,
        flow_layers=4,
        flow_kernel=5,
        sdp_filter=192,
        sdp_flows=4,
        resblock="1",
        resblock_kernels=[3, 7, 11],
        resblock_dilations=[[1, 3, 5], [1, 3, 5], [1, 3, 5]],
        upsample_rates=[8, 8, 2, 2],
        upsample_initial=512,
        upsample_kernels=[16, 16, 4, 4],
        speaker_dim=256,
        style_dim=256,
        mixer_channels=0,
        codebook_size=1024,
        use_discriminator=True,
    )


def preset_model_config(preset: str) -> ModelConfig:
    if preset == "desk":
        return ModelConfig()
    if preset == "paper_scale":
        return _paper_model()
    raise ConfigurationError(f"unknown preset {preset!r}; expected one of {PRESETS}")


def variant_model_config(cfg: ModelConfig, variant: str) -> ModelConfig:
    """Ablation variants: swap the reference encoder or its input, nothing else."""
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = ModelConfig.from_dict(cfg.to_dict())
    if variant == "no_mixer":
        cfg.refenc_kind = "gst"
    elif variant == "no_dc":
        cfg.ref_input = "spectrogram"
    return cfg


def default_run_config(preset: str = "desk") -> dict:
    from dccomix.codec.rvq import RvqConfig
    from dccomix.train import TrainConfig

    model = preset_model_config(preset)
    train = TrainConfig(preset=preset, lr_init=DESK_LR)
    codec = RvqConfig()
    if preset == "paper_scale":
        train.lr_init = 2e-4
        train.batch_size = 80
        train.max_steps = 120_000
        codec = dataclasses.replace(codec, codebook_size=1024)
    return {
        "preset": preset,
        "seed": 0,
        "model": model.to_dict(),
        "train": dataclasses.asdict(train),
        "codec": dataclasses.asdict(codec),
        "data": {"num_content": 4, "num_prosody": 4, "num_speakers": 4, "n_per_cell": 10, "min_duration_s": 0.7},
        "eval": {"pairing_seed": 0, "noise_scale": 0.0, "noise_scale_w": 0.0, "max_pairs": 0},
    }


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    """Recursively merge ``override`` into a copy of ``base``; unknown keys are errors."""
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in out:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = deep_merge(out[k], v, where + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config file {p}: {e}") from None
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            import yaml

            data = yaml.safe_load(text)
    except Exception as e:
        raise ConfigurationError(f"cannot parse config file {p}: {e}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"config file {p} must hold a mapping")
    return data


def parse_override(item: str) -> dict:
    """``section.key=value`` -> nested dict; value parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cur = cur.setdefault(part, {})
    cur[parts[-1]] = value
    return out


def resolve_run_config(preset: str = "desk", config_file: str | Path | None = None, overrides: list[dict] | None = None) -> dict:
    """defaults(preset) <- file <- overrides, in that order."""
    file_cfg = load_config_file(config_file) if config_file else {}
    preset = (overrides and _find_preset(overrides)) or file_cfg.get("preset", preset)
    cfg = default_run_config(preset)
    cfg = deep_merge(cfg, file_cfg)
    for o in overrides or []:
        cfg = deep_merge(cfg, o)
    cfg["preset"] = preset
    cfg["train"]["preset"] = preset
    return cfg


def _find_preset(overrides: list[dict]) -> Optional[str]:
    found = None
    for o in overrides:
        if "preset" in o:
            found = o["preset"]
    return found


def snapshot_bytes(cfg: dict) -> bytes:
    return (json.dumps(cfg, sort_keys=True, indent=2) + "\n").encode("utf-8")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(snapshot_bytes(cfg)).hexdigest()[:10]
