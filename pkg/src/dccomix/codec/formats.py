"""Binary formats for code matrices and mini-codec checkpoints.

Code matrix (``DCMX``), all little-endian::

    4 bytes   magic b"DCMX"
    u32       D (codebooks)
    u32       T (frames)
    u32       K (codebook size, <= 65536)
    u32       frame rate in millihertz
    D*T u16   indices, codebook-major (all frames of codebook 0 first)

Mini-codec checkpoint (``MRVQ``)::

    4 bytes   magic b"MRVQ"
    u16       major version
    u16       minor version
    u32       header length H
    H bytes   UTF-8 JSON header (sorted keys): sample_rate, stride, fmin, fmax,
              latent_scale, num_codebooks, codebook_size, latent_dim
    f64[d]        latent mean
    f64[D*K*d]    codebooks
    f64[D*K]      EMA counts

Readers reject a different major version; minor versions only append fields.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from dccomix.codec.rvq import CodeMatrix, MiniRvq
from dccomix.errors import ConfigurationError, InvalidInputError

CODES_MAGIC = b"DCMX"
RVQ_MAGIC = b"MRVQ"
RVQ_VERSION = (1, 0)


def code_matrix_to_bytes(codes: CodeMatrix) -> bytes:
    if codes.codebook_size > 65536:
        raise InvalidInputError("codebook size exceeds the u16 index range")
    mhz = codes.frame_rate * 1000.0
    if abs(mhz - round(mhz)) > 1e-6:
        raise InvalidInputError(f"frame rate {codes.frame_rate} Hz is not a whole number of millihertz")
    header = CODES_MAGIC + struct.pack("<4I", codes.num_codebooks, codes.num_frames, codes.codebook_size, int(round(mhz)))
    return header + codes.indices.astype("<u2").tobytes(order="C")


def code_matrix_from_bytes(data: bytes) -> CodeMatrix:
    if data[:4] != CODES_MAGIC:
        raise InvalidInputError("not a DCMX code matrix")
    D, T, K, mhz = struct.unpack_from("<4I", data, 4)
    body = data[20:]
    if len(body) != 2 * D * T:
        raise InvalidInputError(f"DCMX payload has {len(body)} bytes, expected {2 * D * T}")
    idx = np.frombuffer(body, dtype="<u2").reshape(D, T).astype(np.int64)
    return CodeMatrix(idx, K, mhz / 1000.0)


def write_code_matrix(path: str | Path, codes: CodeMatrix) -> None:
    Path(path).write_bytes(code_matrix_to_bytes(codes))


def read_code_matrix(path: str | Path) -> CodeMatrix:
    return code_matrix_from_bytes(Path(path).read_bytes())


def rvq_to_bytes(q: MiniRvq) -> bytes:
    header = {
        "sample_rate": q.sample_rate,
        "stride": q.stride,
        "fmin": q.fmin,
        "fmax": q.fmax,
        "latent_scale": q.latent_scale,
        "num_codebooks": q.num_codebooks,
        "codebook_size": q.codebook_size,
        "latent_dim": q.latent_dim,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(RVQ_MAGIC)
    buf.write(struct.pack("<HHI", *RVQ_VERSION, len(hb)))
    buf.write(hb)
    for arr in (q.latent_mean, q.codebooks, q.ema_counts):
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def rvq_from_bytes(data: bytes) -> MiniRvq:
    if data[:4] != RVQ_MAGIC:
        raise InvalidInputError("not a mini-codec checkpoint")
    major, _minor, hlen = struct.unpack_from("<HHI", data, 4)
    if major != RVQ_VERSION[0]:
        raise ConfigurationError(f"mini-codec checkpoint version {major} is not supported (expected {RVQ_VERSION[0]})")
    off = 12
    h = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    D, K, d = h["num_codebooks"], h["codebook_size"], h["latent_dim"]

    def take(n):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).astype(np.float64)
        off += 8 * n
        return arr

    try:
        mean = take(d)
        books = take(D * K * d).reshape(D, K, d)
        counts = take(D * K).reshape(D, K)
    except ValueError as e:
        raise InvalidInputError(f"truncated mini-codec checkpoint: {e}") from None
    return MiniRvq(books, counts, mean, h["latent_scale"], h["sample_rate"], h["stride"], h["fmin"], h["fmax"])


def save_rvq(path: str | Path, q: MiniRvq) -> None:
    Path(path).write_bytes(rvq_to_bytes(q))


def load_rvq(path: str | Path) -> MiniRvq:
    return rvq_from_bytes(Path(path).read_bytes())
