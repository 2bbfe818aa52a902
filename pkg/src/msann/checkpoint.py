"""Checkpoint container.

Layout of a ``.ckpt`` file::

    MSANN-CKPT-1
    meta <key>\t<value>            (zero or more)
    tensor <name>\t<shape>\t<offset>\t<count>
    ...
    END
    <little-endian float64 payload, tensors back to back>

The text part is the manifest; offsets are in bytes from the start of the
payload.  Batch-norm running statistics are stored as ordinary tensors with
``.running_mean`` / ``.running_var`` suffixes.
"""
from __future__ import annotations

import io
import os

import numpy as np

from .errors import DataError

MAGIC = "MSANN-CKPT-1"


def state_dict(module):
    """Flat name -> array mapping of parameters and initialized BN buffers."""
    state = {name: p.data.copy() for name, p in module.named_parameters()}
    for name, stats in module.named_buffers():
        if stats.initialized:
            state[name + ".running_mean"] = stats.mean.copy()
            state[name + ".running_var"] = stats.var.copy()
    return state


def load_state_dict(module, state, strict=True):
    params = dict(module.named_parameters())
    buffers = dict(module.named_buffers())
    seen = set()
    for name, p in params.items():
        if name not in state:
            if strict:
                raise DataError(f"checkpoint is missing parameter {name}")
            continue
        value = np.asarray(state[name], dtype=np.float64)
        if value.shape != p.shape:
            raise DataError(f"parameter {name}: checkpoint shape {value.shape} vs model {p.shape}")
        p.data = value.copy()
        seen.add(name)
    for name, stats in buffers.items():
        key_m, key_v = name + ".running_mean", name + ".running_var"
        if key_m in state:
            stats.mean = np.asarray(state[key_m], dtype=np.float64).copy()
            stats.var = np.asarray(state[key_v], dtype=np.float64).copy()
            seen.update((key_m, key_v))
        else:
            stats.mean = stats.var = None
    extra = set(state) - seen
    if strict and extra:
        raise DataError(f"checkpoint has unknown entries: {sorted(extra)[:5]}")


def save(path, state, meta=None):
    header = [MAGIC]
    for key, value in (meta or {}).items():
        header.append(f"meta {key}\t{value}")
    payload = io.BytesIO()
    for name, arr in state.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        header.append(f"tensor {name}\t{shape}\t{payload.tell()}\t{arr.size}")
        payload.write(arr.tobytes())
    header.append("END")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("utf-8"))
        fh.write(payload.getvalue())
    os.replace(tmp, path)


def read_manifest(path):
    """Return ``(meta, entries, payload_start)`` without reading tensor data."""
    meta, entries = {}, []
    with open(path, "rb") as fh:
        first = fh.readline().decode("utf-8").rstrip("\n")
        if first != MAGIC:
            raise DataError(f"{path}: not a checkpoint (header {first!r})")
        while True:
            line = fh.readline()
            if not line:
                raise DataError(f"{path}: manifest is not terminated")
            line = line.decode("utf-8").rstrip("\n")
            if line == "END":
                break
            kind, rest = line.split(" ", 1)
            fields = rest.split("\t")
            if kind == "meta":
                meta[fields[0]] = fields[1]
            elif kind == "tensor":
                name, shape, offset, count = fields
                dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
                entries.append((name, dims, int(offset), int(count)))
            else:
                raise DataError(f"{path}: bad manifest line {line!r}")
        start = fh.tell()
    return meta, entries, start


def load(path):
    meta, entries, start = read_manifest(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        blob = fh.read()
    state = {}
    for name, dims, offset, count in entries:
        end = offset + 8 * count
        if end > len(blob):
            raise DataError(f"{path}: payload truncated at tensor {name}")
        arr = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64)
        state[name] = arr.reshape(dims)
    return state, meta

