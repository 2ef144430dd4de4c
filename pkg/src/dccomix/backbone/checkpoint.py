"""Versioned single-file checkpoint container.

Layout (little-endian)::

    4 bytes   magic b"DCCK"
    u16       major version
    u16       minor version
    u64       header length H
    H bytes   UTF-8 JSON header, sorted keys, compact separators:
                config       resolved run configuration
                step, epoch  training counters
                optimizers   {name: param_groups}
                schedulers   {name: state dict}
                extra        free-form JSON metadata
                tensors      [{name, dtype, shape, offset, nbytes}, ...]
    payload   raw tensor bytes in header order

Tensor names are ``model/<state key>``, ``optim/<name>/<param idx>/<key>`` and
``blob/<name>`` (opaque byte strings such as the mini-codec checkpoint stored
as uint8). Equal content always serializes to equal bytes, so
load -> save reproduces the file exactly.
"""

from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from dccomix.errors import ConfigurationError, InvalidInputError

MAGIC = b"DCCK"
VERSION = (1, 0)

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.float16: "float16",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_BY_NAME = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    config: dict
    model_state: "OrderedDict[str, torch.Tensor]"
    step: int = 0
    epoch: int = 0
    optimizers: dict = field(default_factory=dict)
    schedulers: dict = field(default_factory=dict)
    blobs: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _tensor_bytes(t: torch.Tensor) -> tuple[str, bytes]:
    t = t.detach().cpu().contiguous()
    if t.dtype not in _DTYPES:
        raise InvalidInputError(f"unsupported tensor dtype {t.dtype}")
    name = _DTYPES[t.dtype]
    arr = t.numpy()
    if arr.dtype.byteorder == ">":  # pragma: no cover - big-endian hosts
        arr = arr.byteswap().view(arr.dtype.newbyteorder("<"))
    return name, arr.tobytes(order="C")


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, torch.Tensor):
        return obj.item() if obj.numel() == 1 else obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def checkpoint_to_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    payload = io.BytesIO()

    def add(name: str, t: torch.Tensor):
        dtype, data = _tensor_bytes(t)
        entries.append({"name": name, "dtype": dtype, "shape": list(t.shape), "offset": payload.tell(), "nbytes": len(data)})
        payload.write(data)

    for k, t in ckpt.model_state.items():
        add(f"model/{k}", t)
    opt_groups = {}
    for oname in sorted(ckpt.optimizers):
        sd = ckpt.optimizers[oname]
        opt_groups[oname] = _json_ready(sd["param_groups"])
        for pidx in sorted(sd["state"], key=int):
            for key in sorted(sd["state"][pidx]):
                v = sd["state"][pidx][key]
                add(f"optim/{oname}/{int(pidx)}/{key}", v if torch.is_tensor(v) else torch.tensor(v))
    for bname in sorted(ckpt.blobs):
        add(f"blob/{bname}", torch.frombuffer(bytearray(ckpt.blobs[bname]), dtype=torch.uint8))

    header = {
        "config": _json_ready(ckpt.config),
        "step": int(ckpt.step),
        "epoch": int(ckpt.epoch),
        "optimizers": opt_groups,
        "schedulers": _json_ready({k: ckpt.schedulers[k] for k in sorted(ckpt.schedulers)}),
        "extra": _json_ready(ckpt.extra),
        "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<HHQ", *VERSION, len(hb)) + hb + payload.getvalue()


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    if data[:4] != MAGIC:
        raise InvalidInputError("not a model checkpoint (bad magic)")
    major, minor, hlen = struct.unpack_from("<HHQ", data, 4)
    if major != VERSION[0]:
        raise ConfigurationError(f"checkpoint format version {major}.{minor} is not supported (expected {VERSION[0]}.x)")
    off = 16
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    base = off + hlen
    model_state: OrderedDict = OrderedDict()
    opt_states: dict = {k: {"state": {}, "param_groups": v} for k, v in header["optimizers"].items()}
    blobs = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        raw = data[start:start + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise InvalidInputError(f"truncated checkpoint at tensor {e['name']}")
        dtype = _BY_NAME[e["dtype"]]
        t = torch.frombuffer(bytearray(raw), dtype=dtype).reshape(e["shape"]).clone() if raw else torch.zeros(e["shape"], dtype=dtype)
        kind, rest = e["name"].split("/", 1)
        if kind == "model":
            model_state[rest] = t
        elif kind == "optim":
            oname, pidx, key = rest.split("/", 2)
            opt_states[oname]["state"].setdefault(int(pidx), {})[key] = t
        elif kind == "blob":
            blobs[rest] = t.numpy().tobytes()
        else:
            raise InvalidInputError(f"unknown tensor group {kind!r}")
    return Checkpoint(
        config=header["config"],
        model_state=model_state,
        step=header["step"],
        epoch=header["epoch"],
        optimizers=opt_states,
        schedulers=header["schedulers"],
        blobs=blobs,
        extra=header["extra"],
    )


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise InvalidInputError(f"cannot read checkpoint {path}: {e}") from None
    return checkpoint_from_bytes(data)


def load_model_state(model: torch.nn.Module, state: dict) -> None:
    """Strict load; any missing, unexpected or mis-shaped entry is an error."""
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise ConfigurationError(f"checkpoint does not match model: missing={missing[:5]} unexpected={unexpected[:5]}")
    for k, v in state.items():
        if tuple(own[k].shape) != tuple(v.shape):
            raise ConfigurationError(f"shape mismatch for {k}: checkpoint {tuple(v.shape)} vs model {tuple(own[k].shape)}")
        if own[k].dtype != v.dtype:
            raise ConfigurationError(f"dtype mismatch for {k}: checkpoint {v.dtype} vs model {own[k].dtype}")
    model.load_state_dict(state, strict=True)
