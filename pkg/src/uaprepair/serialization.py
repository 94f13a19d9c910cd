"""Binary tensor blobs: one text header line, then raw little-endian float32."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch


def write_tensor(path, name: str, tensor: torch.Tensor, extra: dict | None = None) -> None:
    arr = np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype="<f4")
    header = {"name": name, "shape": list(arr.shape)}
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(arr.tobytes(order="C"))


def read_header(fh) -> dict:
    line = fh.readline()
    try:
        return json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IOError(f"bad tensor header in {getattr(fh, 'name', '?')}: {exc}") from exc


def read_tensor(path) -> tuple[str, torch.Tensor]:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            header = read_header(fh)
            shape = tuple(header["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = fh.read(4 * count)
    except OSError as exc:
        raise IOError(f"cannot read tensor file {path}: {exc}") from exc
    if len(data) != 4 * count:
        raise IOError(f"{path}: expected {count} float32 values, file is truncated")
    arr = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return header["name"], torch.from_numpy(arr)


def checksum(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())
    return h.hexdigest()
