"""Denoiser parameter checkpoints: flat float64 dump with a JSON header.

File layout: u64 little-endian header length, UTF-8 JSON header, raw
little-endian float64 data. The header records the version, byte order,
the model configuration, and per-tensor shape plus byte offset into the
data section.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np
import torch

VERSION = 1


def save_params(path, model) -> None:
    tensors = {}
    chunks = []
    offset = 0
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f8")
        tensors[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps(
        {
            "version": VERSION,
            "byte_order": "little",
            "dtype": "float64",
            "model_config": dataclasses.asdict(model.cfg),
            "schedule": dataclasses.asdict(model.schedule),
            "tensors": tensors,
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def _read(path):
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        data = f.read()
    return header, data


def _state_dict(header, data):
    state = {}
    for name, meta in header["tensors"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=meta["offset"]).reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    return state


def load_params(path, model) -> None:
    header, data = _read(path)
    model.load_state_dict(_state_dict(header, data))


def load_denoiser(path):
    """Rebuild a Denoiser (config + schedule + weights) from a checkpoint."""
    from .model import Denoiser, DenoiserConfig
    from .schedule import NoiseSchedule

    header, data = _read(path)
    cfg = DenoiserConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in header["model_config"].items()})
    sch = NoiseSchedule(**header["schedule"])
    model = Denoiser(cfg, sch)
    model.load_state_dict(_state_dict(header, data))
    return model
