"""MC01 weight archives: one JSON header line, then named float32 buffers.

Header: {"magic": "MC01", "manifest": {...}, "layers": [{"name", "shape"}, ...]}
followed by each layer's raw little-endian float32 data in listed order.
Round-trips are bit-exact for float32 weights.
"""

from __future__ import annotations

import json

import numpy as np
import torch


def save_weights(path, named_tensors, manifest: dict) -> None:
    if hasattr(named_tensors, "items"):
        named_tensors = list(named_tensors.items())
    layers = []
    buffers = []
    for name, tensor in named_tensors:
        arr = tensor.detach().cpu().numpy().astype("<f4")
        layers.append({"name": name, "shape": list(arr.shape)})
        buffers.append(arr.tobytes(order="C"))
    header = {"magic": "MC01", "manifest": manifest, "layers": layers}
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for buf in buffers:
            f.write(buf)


def load_weights(path):
    """Returns (manifest, ordered dict of name -> float32 tensor)."""
    try:
        with open(path, "rb") as f:
            header_line = f.readline()
            payload = f.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"weight archive not found: {path}") from None
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: invalid MC01 header: {e}") from None
    if header.get("magic") != "MC01":
        raise ValueError(f"{path}: not an MC01 archive")
    tensors = {}
    offset = 0
    for layer in header["layers"]:
        n = int(np.prod(layer["shape"])) if layer["shape"] else 1
        size = n * 4
        chunk = payload[offset:offset + size]
        if len(chunk) != size:
            raise ValueError(f"{path}: truncated archive at layer {layer['name']!r}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(layer["shape"]).copy()
        tensors[layer["name"]] = torch.from_numpy(arr)
        offset += size
    if offset != len(payload):
        raise ValueError(f"{path}: {len(payload) - offset} trailing bytes in archive")
    return header["manifest"], tensors
