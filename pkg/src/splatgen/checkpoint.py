"""Checkpoint format: flat binary of named arrays plus a text manifest.

``<path>`` holds the raw little-endian array bytes concatenated in
name-sorted order; ``<path>.manifest`` lists one ``name shape dtype offset``
line per array. An optional JSON sidecar ``<path>.json`` carries model
config. The format is deliberately dumb so round-trips are bit-exact and
diffable.
"""

import json
import os

import numpy as np

from .errors import DataFormatError, MissingArtifactError

_MAGIC = "# splatgen checkpoint v1"

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "int32": "<i4"}


def save_checkpoint(path, arrays, config=None):
    """Write named arrays (dict name -> ndarray) and an optional config dict."""
    names = sorted(arrays)
    lines = [_MAGIC]
    offset = 0
    blobs = []
    for name in names:
        if any(c.isspace() for c in name):
            raise DataFormatError(f"array name contains whitespace: {name!r}")
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise DataFormatError(f"unsupported dtype {arr.dtype} for {name!r}")
        arr = arr.astype(_DTYPES[arr.dtype.name], copy=False)  # force little-endian
        shape = ",".join(str(d) for d in arr.shape) if arr.ndim else "0"
        lines.append(f"{name} {shape} {arr.dtype.name} {offset}")
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    with open(path, "wb") as f:
        for blob in blobs:
            f.write(blob)
    with open(str(path) + ".manifest", "w") as f:
        f.write("\n".join(lines) + "\n")
    if config is not None:
        with open(str(path) + ".json", "w") as f:
            json.dump(config, f, indent=2, sort_keys=True)
            f.write("\n")


def load_checkpoint(path):
    """Read a checkpoint; returns (arrays dict, config dict or None)."""
    manifest = str(path) + ".manifest"
    if not os.path.exists(path) or not os.path.exists(manifest):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    with open(manifest) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or lines[0] != _MAGIC:
        raise DataFormatError(f"bad manifest header in {manifest}")
    with open(path, "rb") as f:
        blob = f.read()
    arrays = {}
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 4:
            raise DataFormatError(f"bad manifest line: {ln!r}")
        name, shape_s, dtype_s, offset_s = parts
        if dtype_s not in _DTYPES:
            raise DataFormatError(f"unsupported dtype in manifest: {dtype_s}")
        shape = () if shape_s == "0" else tuple(int(d) for d in shape_s.split(","))
        count = int(np.prod(shape)) if shape else 1
        dt = np.dtype(_DTYPES[dtype_s])
        start = int(offset_s)
        end = start + count * dt.itemsize
        if end > len(blob):
            raise DataFormatError(f"array {name!r} overruns checkpoint data")
        arrays[name] = np.frombuffer(blob[start:end], dtype=dt).reshape(shape).copy()
    config = None
    sidecar = str(path) + ".json"
    if os.path.exists(sidecar):
        with open(sidecar) as f:
            config = json.load(f)
    return arrays, config


def module_to_arrays(module):
    """A torch module's state as name-keyed float arrays."""
    return {
        name: tensor.detach().cpu().numpy().copy()
        for name, tensor in module.state_dict().items()
    }


def arrays_to_module(module, arrays, prefix=""):
    """Load name-keyed arrays back into a torch module (dtype preserved)."""
    import torch

    state = {}
    for name, tensor in module.state_dict().items():
        key = prefix + name
        if key not in arrays:
            raise DataFormatError(f"checkpoint missing parameter {key!r}")
        arr = arrays[key]
        if tuple(arr.shape) != tuple(tensor.shape):
            raise DataFormatError(
                f"shape mismatch for {key!r}: checkpoint {arr.shape}, model {tuple(tensor.shape)}"
            )
        state[name] = torch.as_tensor(arr).to(tensor.dtype)
    module.load_state_dict(state)
