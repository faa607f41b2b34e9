"""Checkpoint binary format.

Text header, then raw tensor bytes:

    SCREENALIGN-CKPT v1
    step=<int>
    config=<single-line JSON, sorted keys>
    data_offset=<12-digit byte offset>
    tensor=<name>:<rows>x<cols>
    ...                             (one line per tensor, fixed order)
    <blank line>
    <little-endian float32 data, tensors concatenated in listed order>

The config JSON carries everything needed to rebuild the model (encoder
configs, vocabulary, loss settings), so a checkpoint is self-contained.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

CKPT_MAGIC = "SCREENALIGN-CKPT v1"
_OFFSET_DIGITS = 12


@dataclass
class Checkpoint:
    step: int
    config: dict
    arrays: dict
    order: list

    @property
    def config_hash(self):
        return config_hash(self.config)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def save_checkpoint(path, config, step, named_arrays):
    for name, _ in named_arrays:
        if ":" in name or "\n" in name:
            raise ValueError(f"illegal tensor name {name!r}")
    lines = [CKPT_MAGIC,
             f"step={step}",
             "config=" + json.dumps(config, sort_keys=True, separators=(",", ":")),
             "data_offset=" + "0" * _OFFSET_DIGITS]
    for name, arr in named_arrays:
        if arr.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 2-D")
        lines.append(f"tensor={name}:{arr.shape[0]}x{arr.shape[1]}")
    header = ("\n".join(lines) + "\n\n").encode("utf-8")
    offset = len(header)
    header = header.replace(("data_offset=" + "0" * _OFFSET_DIGITS).encode(),
                            f"data_offset={offset:0{_OFFSET_DIGITS}d}".encode())
    with open(path, "wb") as fh:
        fh.write(header)
        for _, arr in named_arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\n\n")
    if end < 0:
        raise ValueError(f"{path}: missing header terminator")
    lines = raw[:end].decode("utf-8").split("\n")
    if lines[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad magic line {lines[0]!r}")
    step = None
    config = None
    offset = None
    shapes = []
    for line in lines[1:]:
        key, _, value = line.partition("=")
        if key == "step":
            step = int(value)
        elif key == "config":
            config = json.loads(value)
        elif key == "data_offset":
            offset = int(value)
        elif key == "tensor":
            name, _, shape = value.rpartition(":")
            rows, cols = (int(v) for v in shape.split("x"))
            shapes.append((name, rows, cols))
    if step is None or config is None or offset is None:
        raise ValueError(f"{path}: incomplete checkpoint header")
    expected = sum(4 * r * c for _, r, c in shapes)
    if len(raw) - offset != expected:
        raise ValueError(f"{path}: tensor region holds {len(raw) - offset} bytes, "
                         f"expected {expected}")
    arrays = {}
    order = []
    cursor = offset
    for name, rows, cols in shapes:
        count = rows * cols
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=count,
                                     offset=cursor).reshape(rows, cols).copy()
        order.append(name)
        cursor += 4 * count
    return Checkpoint(step=step, config=config, arrays=arrays, order=order)
