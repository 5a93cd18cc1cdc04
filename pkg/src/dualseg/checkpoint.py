"""Checkpoint file format.

Layout (all integers little-endian)::

    bytes 0..7    magic b"DSEGCKPT"
    bytes 8..15   uint64 header length H
    bytes 16..    H bytes of UTF-8 JSON header
    then          concatenated float64 LE arrays

The header holds ``config`` (resolved run config), ``step``, ``seed``,
``format_version`` and ``tensors``: a list of ``{name, shape, offset}`` where
``offset`` counts bytes from the start of the data section. Tensors are
written in ``state_dict`` order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DSEGCKPT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor], config: dict, step: int, seed: int) -> None:
    entries, chunks, offset = [], [], 0
    for name, t in state.items():
        arr = np.array(t.detach().cpu().numpy(), dtype="<f8", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "step": int(step),
        "seed": int(seed),
        "tensors": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def read_header(path: str | Path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(8) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (n,) = struct.unpack("<Q", fh.read(8))
    try:
        return json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return (header, state dict of float64 tensors)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot open ({exc})") from None
    with fh:
        header = _read_header(fh, path)
        data = fh.read()
    state = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 8 * count
        if end > len(data):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy())
    return header, state


def model_state(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return dict(model.state_dict())


def apply_state(model: torch.nn.Module, state: dict[str, torch.Tensor]) -> None:
    """Load float64 arrays into a model, casting to each parameter's dtype."""
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    if missing or unexpected:
        raise CheckpointError(f"checkpoint/model mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    for k, v in own.items():
        if tuple(state[k].shape) != tuple(v.shape):
            raise CheckpointError(f"checkpoint/model mismatch for {k}: {tuple(state[k].shape)} vs {tuple(v.shape)}")
    model.load_state_dict({k: state[k].to(own[k].dtype) for k in own})
