"""Single-file model checkpoints: magic line, JSON header, raw float32 tensors.

Layout::

    b"LPCKPT1\\n" | uint64 LE header length | header JSON | tensor bytes

The header carries arbitrary metadata plus a ``tensors`` table of
``{name, shape, offset}`` entries pointing into the little-endian float32
payload that follows it.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"LPCKPT1\n"


def save_checkpoint(path, module, header):
    state = module.state_dict()
    table, chunks, offset = [], [], 0
    for name, t in state.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps({**header, "tensors": table}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path):
    """Return ``(header, state_dict)``."""
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    (n,) = struct.unpack("<Q", blob[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(blob[start:start + n])
    payload = blob[start + n:]
    state = {}
    for entry in header.pop("tensors"):
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        state[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return header, state


def param_checksum(module):
    """sha256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()
