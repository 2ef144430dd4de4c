"""Discrete codes from waveforms: the mini residual quantizer and the external codec boundary."""

from dccomix.codec.external import CodecAdapter, EncodecAdapter, external_codec_encode
from dccomix.codec.formats import (
    load_rvq,
    read_code_matrix,
    save_rvq,
    write_code_matrix,
)
from dccomix.codec.rvq import (
    CodeMatrix,
    MiniRvq,
    RvqConfig,
    dequantize,
    encode,
    fit_codebooks,
    quantize_residual,
    train_mini_rvq,
)

__all__ = [
    "CodeMatrix",
    "CodecAdapter",
    "EncodecAdapter",
    "MiniRvq",
    "RvqConfig",
    "dequantize",
    "encode",
    "external_codec_encode",
    "fit_codebooks",
    "load_rvq",
    "quantize_residual",
    "read_code_matrix",
    "save_rvq",
    "train_mini_rvq",
    "write_code_matrix",
]
