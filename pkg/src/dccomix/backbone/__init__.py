"""Variational end-to-end synthesizer with speaker + style global conditioning."""

from dccomix.backbone.alignment import brute_force_path, maximum_path, maximum_path_single
from dccomix.backbone.checkpoint import load_checkpoint, save_checkpoint
from dccomix.backbone.synthesizer import (
    SCOPES,
    Synthesizer,
    build_condition,
    count_parameters,
    flow_roundtrip,
    reference_tensor,
    synthesize,
    train_forward,
)

__all__ = [
    "SCOPES",
    "Synthesizer",
    "brute_force_path",
    "build_condition",
    "count_parameters",
    "flow_roundtrip",
    "load_checkpoint",
    "maximum_path",
    "maximum_path_single",
    "reference_tensor",
    "save_checkpoint",
    "synthesize",
    "train_forward",
]
