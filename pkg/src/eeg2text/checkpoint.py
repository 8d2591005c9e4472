"""Checkpoint container and its binary file format.

Layout (all integers little-endian)::

    b"EEG2T" | u32 format_version | u32 header_len | header (UTF-8 JSON)
    | raw buffers (f32 or f64, C order) | u32 CRC32 of everything before it

The header carries the model/train configs, epoch, loss history, vocabulary,
optimizer step and a directory of buffers ``{name, shape, dtype, offset}``
relative to the start of the buffer area.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EEG2T"
FORMAT_VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    model_config: dict
    train_config: dict
    kind: str = "eeg2text"  # or "pretrain"
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    vocab: list[str] | None = None
    adam_step: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return to_bytes(self) == to_bytes(other)

    __hash__ = None


def _dtype_tag(arr: np.ndarray) -> str:
    if arr.dtype == np.float64:
        return "f64"
    if arr.dtype == np.float32:
        return "f32"
    raise CheckpointError(f"unsupported buffer dtype {arr.dtype}")


def to_bytes(ckpt: Checkpoint) -> bytes:
    groups = (("param", ckpt.params), ("adam_m", ckpt.adam_m), ("adam_v", ckpt.adam_v))
    directory, chunks, offset = [], [], 0
    for group, buffers in groups:
        for name, arr in buffers.items():
            arr = np.asarray(arr)
            tag = _dtype_tag(arr)
            data = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
            directory.append({"group": group, "name": name, "shape": list(arr.shape), "dtype": tag,
                              "offset": offset, "nbytes": len(data)})
            chunks.append(data)
            offset += len(data)
    header = {
        "kind": ckpt.kind,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "loss_history": ckpt.loss_history,
        "vocab": ckpt.vocab,
        "adam_step": ckpt.adam_step,
        "extra": ckpt.extra,
        "buffers": directory,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<II", ckpt.format_version, len(hbytes)) + hbytes + b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def from_bytes(blob: bytes) -> Checkpoint:
    if len(blob) < len(MAGIC) + 12 or not blob.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file (bad magic or truncated)")
    body, trailer = blob[:-4], blob[-4:]
    if struct.unpack("<I", trailer)[0] != zlib.crc32(body) & 0xFFFFFFFF:
        raise CheckpointError("checkpoint is corrupt (CRC32 mismatch)")
    version, hlen = struct.unpack_from("<II", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version} (expected {FORMAT_VERSION})")
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    data = body[start + hlen:]
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in header["buffers"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(data):
            raise CheckpointError(f"buffer {entry['name']!r} extends past end of file")
        arr = np.frombuffer(data[entry["offset"]:end], dtype=_DTYPES[entry["dtype"]])
        groups[entry["group"]][entry["name"]] = arr.reshape(entry["shape"]).copy()
    return Checkpoint(
        params=groups["param"],
        model_config=header["model_config"],
        train_config=header["train_config"],
        kind=header["kind"],
        epoch=header["epoch"],
        loss_history=header["loss_history"],
        vocab=header["vocab"],
        adam_step=header["adam_step"],
        adam_m=groups["adam_m"],
        adam_v=groups["adam_v"],
        extra=header["extra"],
        format_version=version,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    if path.parent != Path(""):
        path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob)
