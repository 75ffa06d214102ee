"""Deterministic forward evaluation, used as the equivalence oracle.

Activations are plain numpy arrays: shape [features] at dense stages and
[channels, height, width] at convolutional stages. Convolution is
cross-correlation (no kernel flip). Exact, CPU-only, no batching tricks:
this is the reference the compression stages are checked against.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import EvaluationError
from .model import BATCHNORM, BN_EPS, CONV2D, DENSE, DEPTHWISE, RELU, UNEVEN, Model


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[C, H', W', kh, kw] sliding windows of a padded [C, H, W] input."""
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    if x.shape[1] < kh or x.shape[2] < kw:
        raise ValueError("input smaller than kernel")
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _apply(layer, x: np.ndarray, path: str) -> np.ndarray:
    kind = layer.kind
    try:
        if kind == DENSE:
            if x.ndim == 3:
                x = x.reshape(-1)  # row-major: channel-major blocks
            w, b = layer.weight, layer.bias
            if x.shape != (w.shape[1],):
                raise ValueError(f"expected {w.shape[1]} features, got {x.shape}")
            y = w @ x
            return y + b if b is not None else y
        if kind == CONV2D:
            w = layer.weight  # [h, w, n_in, n_out]
            if x.ndim != 3 or x.shape[0] != w.shape[2]:
                raise ValueError(f"expected {w.shape[2]} channels, got {x.shape}")
            win = _windows(x, w.shape[0], w.shape[1], layer.stride, layer.padding)
            y = np.einsum("cijab,abcf->fij", win, w, optimize=True)
            if layer.bias is not None:
                y = y + layer.bias[:, None, None]
            return y
        if kind == DEPTHWISE:
            w = layer.weight  # [h, w, n_in, 1]
            if x.ndim != 3 or x.shape[0] != w.shape[2]:
                raise ValueError(f"expected {w.shape[2]} channels, got {x.shape}")
            win = _windows(x, w.shape[0], w.shape[1], layer.stride, layer.padding)
            y = np.einsum("cijab,abc->cij", win, w[:, :, :, 0], optimize=True)
            if layer.bias is not None:
                y = y + layer.bias[:, None, None]
            return y
        if kind == UNEVEN:
            p = layer.uneven
            n_in, n_out = p.coeff_value.shape
            if x.ndim != 3 or x.shape[0] != n_in:
                raise ValueError(f"expected {n_in} channels, got {x.shape}")
            h, w = p.bases[0].shape[1], p.bases[0].shape[2]
            win = _windows(x, h, w, layer.stride, layer.padding)
            y = np.zeros((n_out,) + win.shape[1:3])
            for i in range(n_in):
                if p.bases[i].shape[0] == 0:
                    continue
                maps = np.einsum("ijab,kab->kij", win[i], p.bases[i], optimize=True)
                y += p.coeff_value[i][:, None, None] * maps[p.coeff_basis[i]]
            if layer.bias is not None:
                y = y + layer.bias[:, None, None]
            return y
        if kind == BATCHNORM:
            g, b = layer.tensors["gamma"], layer.tensors["beta"]
            mu, var = layer.tensors["mean"], layer.tensors["var"]
            if x.shape[0] != g.shape[0]:
                raise ValueError(f"expected {g.shape[0]} channels, got {x.shape}")
            scale = g / np.sqrt(var + BN_EPS)
            if x.ndim == 3:
                return scale[:, None, None] * (x - mu[:, None, None]) + b[:, None, None]
            return scale * (x - mu) + b
        if kind == RELU:
            return np.maximum(x, 0.0)
    except ValueError as exc:
        raise EvaluationError(f"layer {path} ({kind}): {exc}") from exc
    raise EvaluationError(f"layer {path}: unknown kind {kind!r}")


def forward(model: Model, x) -> np.ndarray:
    """Evaluate the model on one input activation."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise EvaluationError("input activation contains non-finite values")
    for bi, block in enumerate(model.blocks):
        if block.residual:
            y = x
            for li, layer in enumerate(block.layers):
                y = _apply(layer, y, f"{bi}.{li}")
            if y.shape != x.shape:
                raise EvaluationError(
                    f"block {bi}: residual main output {y.shape} != shortcut {x.shape}"
                )
            x = y + x
        else:
            x = _apply(block.layers[0], x, str(bi))
    return x


def input_shape(model: Model, resolution=None) -> tuple:
    """Input shape the first weighted layer expects."""
    for _, layer in model.iter_layers():
        if layer.kind == DENSE:
            return (layer.in_channels,)
        if layer.kind in (CONV2D, DEPTHWISE, UNEVEN):
            if resolution is None:
                raise EvaluationError("convolutional model needs an input resolution")
            return (layer.in_channels, int(resolution[0]), int(resolution[1]))
    raise EvaluationError("model has no weighted layer")


def random_inputs(model: Model, n: int, seed: int, resolution=None) -> list:
    """n seeded standard-normal activations matching the model's input."""
    shape = input_shape(model, resolution)
    rng = np.random.default_rng(seed)
    return [rng.standard_normal(shape) for _ in range(n)]


def logit_delta(a: Model, b: Model, inputs) -> tuple:
    """Compare two models on shared inputs.

    Returns (mean absolute logit difference, mean top1-top2 gap of model
    `a`, population stddev of that gap).
    """
    if not inputs:
        raise EvaluationError("logit_delta needs at least one input")
    deltas, gaps = [], []
    for x in inputs:
        ya = np.asarray(forward(a, x), dtype=np.float64).ravel()
        yb = np.asarray(forward(b, x), dtype=np.float64).ravel()
        if ya.shape != yb.shape:
            raise EvaluationError(f"output dims differ: {ya.shape} vs {yb.shape}")
        deltas.append(np.abs(ya - yb))
        if ya.size < 2:
            raise EvaluationError("top1-top2 gap needs at least 2 logits")
        top = np.sort(ya)[-2:]
        gaps.append(top[1] - top[0])
    gaps = np.asarray(gaps)
    return float(np.mean(np.concatenate(deltas))), float(gaps.mean()), float(gaps.std())
