"""REDM v1 binary model format.

Layout, byte-exact:

    bytes 0-3    magic "REDM"
    bytes 4-7    u32 little-endian version (= 1)
    bytes 8-15   u64 little-endian manifest byte length
    ...          UTF-8 JSON manifest
    ...          tensor payload

The manifest lists blocks and layers with per-tensor descriptors
``{name, dtype: "f32", shape, offset, nbytes}``. Tensor data is row-major
little-endian IEEE-754 float32, each tensor 8-byte aligned, offsets
relative to the payload start. Serialization is deterministic: equal
models produce equal bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError, FormatError, ValidationError
from .model import (
    BATCHNORM,
    CONV_KINDS,
    RELU,
    UNEVEN,
    Block,
    Layer,
    Model,
    UnevenPayload,
    validate_model,
)

MAGIC = b"REDM"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


def _layer_arrays(layer: Layer) -> list:
    """Named arrays of one layer in serialization order (sorted by name)."""
    named = dict(layer.tensors)
    if layer.kind == UNEVEN:
        p = layer.uneven
        for i, b in enumerate(p.bases):
            named[f"basis{i:04d}"] = b
        named["coeff_basis"] = p.coeff_basis.astype(np.float64)
        named["coeff_value"] = p.coeff_value
    return sorted(named.items())


def _align8(n: int) -> int:
    return (n + 7) & ~7


def save_bytes(model: Model) -> bytes:
    """Serialize a model to REDM v1 bytes. Refuses invalid models."""
    violations = validate_model(model)
    if violations:
        raise ValidationError("refusing to save invalid model: " + "; ".join(violations[:5]))

    chunks: list = []
    offset = 0
    manifest_blocks = []
    for block in model.blocks:
        entries = []
        for layer in block.layers:
            descs = []
            for name, arr in _layer_arrays(layer):
                f32 = np.asarray(arr, dtype="<f4")
                if arr.size and not np.all(np.isfinite(f32)):
                    raise ValidationError(f"tensor {name!r} overflows float32 storage")
                raw = f32.tobytes(order="C")
                descs.append(
                    {
                        "name": name,
                        "dtype": "f32",
                        "shape": [int(s) for s in arr.shape],
                        "offset": offset,
                        "nbytes": len(raw),
                    }
                )
                pad = _align8(len(raw)) - len(raw)
                chunks.append(raw + b"\x00" * pad)
                offset += len(raw) + pad
            entry = {"kind": layer.kind, "tensors": descs}
            if layer.kind in CONV_KINDS:
                entry["stride"] = layer.stride
                entry["padding"] = layer.padding
            entries.append(entry)
        manifest_blocks.append({"residual": block.residual, "layers": entries})

    manifest = {"name": model.name, "meta": dict(model.meta), "blocks": manifest_blocks}
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(mbytes)) + mbytes + b"".join(chunks)


def save_model(model: Model, path) -> None:
    data = save_bytes(model)
    with open(path, "wb") as fh:
        fh.write(data)


def _read_tensor(payload: bytes, desc: dict, seen: list) -> np.ndarray:
    for key in ("name", "dtype", "shape", "offset", "nbytes"):
        if key not in desc:
            raise ValidationError(f"tensor descriptor missing {key!r}")
    if desc["dtype"] != "f32":
        raise ValidationError(f"unsupported tensor dtype {desc['dtype']!r}")
    shape = tuple(int(s) for s in desc["shape"])
    if any(s < 0 for s in shape):
        raise ValidationError(f"tensor {desc['name']!r} has a negative dimension")
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    offset, nbytes = int(desc["offset"]), int(desc["nbytes"])
    if nbytes != 4 * count:
        raise ValidationError(
            f"tensor {desc['name']!r} declares {nbytes} bytes for {count} float32 values"
        )
    if offset % 8 != 0:
        raise ValidationError(f"tensor {desc['name']!r} offset {offset} is not 8-byte aligned")
    if offset < 0 or offset + nbytes > len(payload):
        raise ValidationError(f"tensor {desc['name']!r} extends past the payload end")
    for other_off, other_end, other_name in seen:
        if offset < other_end and other_off < offset + nbytes:
            raise ValidationError(
                f"tensor {desc['name']!r} overlaps tensor {other_name!r} in the payload"
            )
    seen.append((offset, offset + nbytes, desc["name"]))
    arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
    arr = arr.astype(np.float64).reshape(shape)
    if arr.size and not np.all(np.isfinite(arr)):
        raise DataError(f"tensor {desc['name']!r} contains non-finite values")
    return arr


def _rebuild_layer(entry: dict, payload: bytes, seen: list) -> Layer:
    kind = entry.get("kind")
    named = {}
    for desc in entry.get("tensors", []):
        named[desc.get("name")] = _read_tensor(payload, desc, seen)
    stride = int(entry.get("stride", 1))
    padding = int(entry.get("padding", 0))

    if kind == UNEVEN:
        basis_names = sorted(n for n in named if n.startswith("basis"))
        if "coeff_basis" not in named or "coeff_value" not in named:
            raise ValidationError("uneven layer manifest is missing coefficient tensors")
        idx = named["coeff_basis"]
        if np.any(idx != np.floor(idx)):
            raise ValidationError("uneven coefficient indices must be integers")
        payload_obj = UnevenPayload(
            [named[n] for n in basis_names],
            idx.astype(np.int64),
            named["coeff_value"],
        )
        tensors = {"bias": named["bias"]} if "bias" in named else {}
        return Layer(UNEVEN, tensors, stride=stride, padding=padding, uneven=payload_obj)

    if kind == RELU:
        return Layer(RELU)
    if kind == BATCHNORM:
        return Layer(BATCHNORM, named)
    return Layer(kind, named, stride=stride, padding=padding)


def load_bytes(data: bytes) -> Model:
    """Parse REDM v1 bytes into a validated model."""
    if len(data) < _HEADER.size:
        raise FormatError("file shorter than the 16-byte header")
    magic, version, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}; expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}; supported versions: {VERSION}")
    if _HEADER.size + mlen > len(data):
        raise FormatError("declared manifest length exceeds file size")
    try:
        manifest = json.loads(data[_HEADER.size : _HEADER.size + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "blocks" not in manifest:
        raise ValidationError("manifest has no block list")

    payload = data[_HEADER.size + mlen :]
    seen: list = []
    blocks = []
    try:
        for bentry in manifest["blocks"]:
            layers = [_rebuild_layer(lentry, payload, seen) for lentry in bentry.get("layers", [])]
            blocks.append(Block(layers, residual=bool(bentry.get("residual", False))))
        model = Model(
            blocks,
            name=str(manifest.get("name", "model")),
            meta=dict(manifest.get("meta", {})),
        )
    except (TypeError, AttributeError, KeyError, IndexError, OverflowError) as exc:
        raise ValidationError(f"manifest structure is malformed: {exc!r}") from exc
    violations = validate_model(model)
    if violations:
        raise ValidationError("; ".join(violations[:5]))
    return model


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return load_bytes(fh.read())
