"""Network data model: tensors, layers, blocks, whole models, validation.

Weights live in memory as float64 numpy arrays; the on-disk format
(`red.redm`) stores little-endian float32. A model is an ordered list of
blocks, each either a single plain layer or a residual group whose output
is ``main(x) + x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

# layer kinds
DENSE = "dense"
CONV2D = "conv2d"
DEPTHWISE = "depthwise_conv2d"
UNEVEN = "uneven_depthwise_conv2d"
BATCHNORM = "batchnorm"
RELU = "relu"

LAYER_KINDS = (DENSE, CONV2D, DEPTHWISE, UNEVEN, BATCHNORM, RELU)
WEIGHTED_KINDS = (DENSE, CONV2D, DEPTHWISE, UNEVEN)
CONV_KINDS = (CONV2D, DEPTHWISE, UNEVEN)

BN_EPS = 1e-5


def as_f64(a) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


@dataclass
class UnevenPayload:
    """Per-channel basis kernels plus one (basis index, coefficient) per
    (input channel, output channel) pair.

    bases[i] has shape [r_i, h, w] (r_i may be 0 for an all-zero channel)
    and every basis kernel is normalized so its last nonzero element is 1.
    """

    bases: list  # list of [r_i, h, w] float64 arrays
    coeff_basis: np.ndarray  # [n_in, n_out] int64, 0-based index into bases[i]
    coeff_value: np.ndarray  # [n_in, n_out] float64

    def __eq__(self, other):
        if not isinstance(other, UnevenPayload):
            return NotImplemented
        return (
            len(self.bases) == len(other.bases)
            and all(np.array_equal(a, b) for a, b in zip(self.bases, other.bases))
            and np.array_equal(self.coeff_basis, other.coeff_basis)
            and np.array_equal(self.coeff_value, other.coeff_value)
        )


@dataclass(eq=False)
class Layer:
    kind: str
    tensors: dict = field(default_factory=dict)  # name -> float64 ndarray
    stride: int = 1
    padding: int = 0
    uneven: Optional[UnevenPayload] = None

    # -- derived attributes ------------------------------------------------

    @property
    def weight(self) -> Optional[np.ndarray]:
        return self.tensors.get("weight")

    @property
    def bias(self) -> Optional[np.ndarray]:
        return self.tensors.get("bias")

    @property
    def out_channels(self) -> Optional[int]:
        if self.kind == DENSE:
            return int(self.weight.shape[0])
        if self.kind == CONV2D:
            return int(self.weight.shape[3])
        if self.kind == DEPTHWISE:
            return int(self.weight.shape[2])
        if self.kind == UNEVEN:
            return int(self.uneven.coeff_value.shape[1])
        if self.kind == BATCHNORM:
            return int(self.tensors["gamma"].shape[0])
        return None

    @property
    def in_channels(self) -> Optional[int]:
        if self.kind == DENSE:
            return int(self.weight.shape[1])
        if self.kind == CONV2D:
            return int(self.weight.shape[2])
        if self.kind == DEPTHWISE:
            return int(self.weight.shape[2])
        if self.kind == UNEVEN:
            return int(self.uneven.coeff_value.shape[0])
        if self.kind == BATCHNORM:
            return int(self.tensors["gamma"].shape[0])
        return None

    @property
    def kernel_size(self) -> Optional[tuple]:
        if self.kind in (CONV2D, DEPTHWISE):
            return (int(self.weight.shape[0]), int(self.weight.shape[1]))
        if self.kind == UNEVEN:
            b = self.uneven.bases[0]
            return (int(b.shape[1]), int(b.shape[2]))
        return None

    def __eq__(self, other):
        if not isinstance(other, Layer):
            return NotImplemented
        if (self.kind, self.stride, self.padding) != (other.kind, other.stride, other.padding):
            return False
        if set(self.tensors) != set(other.tensors):
            return False
        if not all(np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors):
            return False
        return self.uneven == other.uneven


@dataclass(eq=False)
class Block:
    layers: list
    residual: bool = False

    def __eq__(self, other):
        if not isinstance(other, Block):
            return NotImplemented
        return self.residual == other.residual and self.layers == other.layers


@dataclass(eq=False)
class Model:
    blocks: list
    name: str = "model"
    meta: dict = field(default_factory=dict)  # str -> str, written verbatim to disk

    def __eq__(self, other):
        if not isinstance(other, Model):
            return NotImplemented
        return (
            self.name == other.name
            and self.meta == other.meta
            and self.blocks == other.blocks
        )

    def iter_layers(self) -> Iterator[tuple]:
        """Yield (path, layer) pairs; paths look like "2" or "2.1"."""
        for bi, block in enumerate(self.blocks):
            if block.residual:
                for li, layer in enumerate(block.layers):
                    yield f"{bi}.{li}", layer
            else:
                yield str(bi), block.layers[0]

    def layer_at(self, path: str) -> Layer:
        parts = path.split(".")
        block = self.blocks[int(parts[0])]
        return block.layers[int(parts[1]) if len(parts) > 1 else 0]


# -- constructors -----------------------------------------------------------


def dense(weight, bias=None, **kw) -> Layer:
    t = {"weight": as_f64(weight)}
    if bias is not None:
        t["bias"] = as_f64(bias)
    return Layer(DENSE, t, **kw)


def conv2d(weight, bias=None, stride=1, padding=0) -> Layer:
    t = {"weight": as_f64(weight)}
    if bias is not None:
        t["bias"] = as_f64(bias)
    return Layer(CONV2D, t, stride=stride, padding=padding)


def depthwise(weight, bias=None, stride=1, padding=0) -> Layer:
    t = {"weight": as_f64(weight)}
    if bias is not None:
        t["bias"] = as_f64(bias)
    return Layer(DEPTHWISE, t, stride=stride, padding=padding)


def batchnorm(gamma, beta, mean, var) -> Layer:
    return Layer(
        BATCHNORM,
        {"gamma": as_f64(gamma), "beta": as_f64(beta), "mean": as_f64(mean), "var": as_f64(var)},
    )


def relu() -> Layer:
    return Layer(RELU)


def uneven_depthwise(bases, coeff_basis, coeff_value, bias=None, stride=1, padding=0) -> Layer:
    payload = UnevenPayload(
        [as_f64(b) for b in bases],
        np.ascontiguousarray(np.asarray(coeff_basis, dtype=np.int64)),
        as_f64(coeff_value),
    )
    t = {}
    if bias is not None:
        t["bias"] = as_f64(bias)
    return Layer(UNEVEN, t, stride=stride, padding=padding, uneven=payload)


def plain(layer: Layer) -> Block:
    return Block([layer], residual=False)


def residual(layers) -> Block:
    return Block(list(layers), residual=True)


def sequential(layers, name="model", meta=None) -> Model:
    return Model([plain(l) for l in layers], name=name, meta=dict(meta or {}))


# -- validation ---------------------------------------------------------------


def _check_layer(path: str, layer: Layer, out: list) -> None:
    if layer.kind not in LAYER_KINDS:
        out.append(f"{path}: unknown layer kind {layer.kind!r}")
        return
    for name, arr in layer.tensors.items():
        if not np.all(np.isfinite(arr)):
            out.append(f"{path}: tensor {name!r} contains non-finite values")

    if layer.kind == DENSE:
        w = layer.weight
        if w is None or w.ndim != 2:
            out.append(f"{path}: dense weight must be 2-D [n_out, n_in]")
            return
    elif layer.kind == CONV2D:
        w = layer.weight
        if w is None or w.ndim != 4:
            out.append(f"{path}: conv2d weight must be 4-D [h, w, n_in, n_out]")
            return
    elif layer.kind == DEPTHWISE:
        w = layer.weight
        if w is None or w.ndim != 4 or w.shape[3] != 1:
            out.append(f"{path}: depthwise weight must be 4-D [h, w, n_in, 1]")
            return
    elif layer.kind == BATCHNORM:
        names = ("gamma", "beta", "mean", "var")
        if any(n not in layer.tensors for n in names):
            out.append(f"{path}: batchnorm requires tensors {names}")
            return
        n = layer.tensors["gamma"].shape[0]
        if any(layer.tensors[t].shape != (n,) for t in names):
            out.append(f"{path}: batchnorm tensors must all have length {n}")
        if np.any(layer.tensors["var"] <= 0):
            out.append(f"{path}: batchnorm var entries must be > 0")
    elif layer.kind == UNEVEN:
        p = layer.uneven
        if p is None:
            out.append(f"{path}: uneven depthwise layer is missing its payload")
            return
        n_in, n_out = p.coeff_value.shape
        if len(p.bases) != n_in or p.coeff_basis.shape != (n_in, n_out):
            out.append(f"{path}: uneven payload shapes are inconsistent")
            return
        h, w = p.bases[0].shape[1], p.bases[0].shape[2]
        for i, b in enumerate(p.bases):
            if b.shape[1:] != (h, w):
                out.append(f"{path}: channel {i} basis kernels must be [{h},{w}]")
            if not np.all(np.isfinite(b)):
                out.append(f"{path}: channel {i} basis contains non-finite values")
            for k in range(b.shape[0]):
                nz = np.flatnonzero(b[k].ravel())
                if nz.size == 0:
                    out.append(f"{path}: channel {i} basis {k} is all-zero")
                elif b[k].ravel()[nz[-1]] != 1.0:
                    out.append(f"{path}: channel {i} basis {k} last nonzero element != 1")
        for i in range(n_in):
            r = p.bases[i].shape[0]
            idx = p.coeff_basis[i]
            if r == 0:
                if np.any(p.coeff_value[i] != 0.0):
                    out.append(f"{path}: channel {i} has no basis but nonzero coefficients")
            elif np.any(idx < 0) or np.any(idx >= r):
                out.append(f"{path}: channel {i} coefficient index out of range 0..{r - 1}")
        if not np.all(np.isfinite(p.coeff_value)):
            out.append(f"{path}: coefficient values contain non-finite entries")

    if layer.kind in WEIGHTED_KINDS and layer.bias is not None:
        n_out = layer.out_channels
        if layer.bias.ndim != 1 or layer.bias.shape[0] != n_out:
            out.append(f"{path}: bias must be 1-D with length {n_out}")


def _walk_state(state, path, layer, out):
    """Advance the (kind, count) activation state across one layer.
    Total: malformed layers (already reported) reset the state to unknown."""
    try:
        return _walk_state_strict(state, path, layer, out)
    except Exception:
        return None


def _walk_state_strict(state, path, layer, out):
    if layer.kind == DENSE:
        if state is not None:
            skind, n = state
            if skind == "vec" and n != layer.in_channels:
                out.append(f"{path}: dense expects {layer.in_channels} inputs, got {n}")
            if skind == "map" and layer.in_channels % n != 0:
                out.append(
                    f"{path}: dense input {layer.in_channels} not divisible by {n} channels"
                )
        return ("vec", layer.out_channels)
    if layer.kind in CONV_KINDS:
        if state is not None:
            skind, n = state
            if skind == "vec":
                out.append(f"{path}: convolution cannot follow a dense output")
            elif n != layer.in_channels:
                out.append(f"{path}: conv expects {layer.in_channels} channels, got {n}")
        return ("map", layer.out_channels)
    if layer.kind == BATCHNORM:
        if state is not None and state[1] != layer.out_channels:
            out.append(f"{path}: batchnorm width {layer.out_channels} != incoming {state[1]}")
        return state if state is not None else ("map", layer.out_channels)
    return state  # relu


def validate_model(model: Model) -> list:
    """Return a list of human-readable violations; empty means valid.

    Never raises on malformed structure; every check appends instead.
    """
    out: list = []
    state = None
    for bi, block in enumerate(model.blocks):
        if not block.layers:
            out.append(f"{bi}: empty block")
            continue
        if not block.residual and len(block.layers) != 1:
            out.append(f"{bi}: plain block must hold exactly one layer")
        if block.residual:
            entry = state
            inner = entry
            for li, layer in enumerate(block.layers):
                path = f"{bi}.{li}"
                _check_layer(path, layer, out)
                inner = _walk_state(inner, path, layer, out)
            if entry is not None and inner is not None and entry != inner:
                out.append(
                    f"{bi}: residual main path maps {entry} to {inner}; shortcut needs equal shapes"
                )
            state = inner or entry
        else:
            path = str(bi)
            _check_layer(path, block.layers[0], out)
            state = _walk_state(state, path, block.layers[0], out)
    return out
