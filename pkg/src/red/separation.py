"""Uneven depthwise separation of 2-D convolutions.

A convolution kernel W[h, w, n_in, n_out] is factorable per input channel
when the rows of the channel matrix (each output's filter restricted to
that channel, flattened) are scalar multiples of a few basis kernels. The
layer is then replaced by per-channel basis kernels plus one
(basis index, coefficient) pair per (input, output) channel — but only if
that strictly lowers the parameter count. Separation is exact-or-skip:
channels whose rows mix several basis directions keep the layer dense.
"""

from __future__ import annotations

from copy import deepcopy
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InseparableChannel
from .model import CONV2D, Layer, Model, conv2d, uneven_depthwise


@dataclass
class SeparationPlan:
    layer: str
    ranks: list
    original_params: int
    predicted_params: int
    applied: bool
    reason: Optional[str] = None

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "ranks": [int(r) for r in self.ranks],
            "original_params": int(self.original_params),
            "predicted_params": int(self.predicted_params),
            "applied": bool(self.applied),
            "reason": self.reason,
        }


def channel_matrix(layer: Layer, i: int) -> np.ndarray:
    """Rows = flattened filters W[:, :, i, j] for j over output channels."""
    w = layer.weight
    return w[:, :, i, :].reshape(-1, w.shape[3]).T.copy()


def numerical_rank(m: np.ndarray, rel_tol: float) -> int:
    """Singular values above rel_tol times the largest; 0 for a zero matrix."""
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    if not np.any(m):
        return 0
    s = np.linalg.svd(np.asarray(m, dtype=np.float64), compute_uv=False)
    return int(np.count_nonzero(s > rel_tol * s[0]))


def extract_basis(m: np.ndarray, r_i: int, rel_tol: float = 1e-6) -> tuple:
    """Greedy ray decomposition of the rows of one channel matrix.

    Returns (bases [r, h*w], basis index per row, coefficient per row).
    The first nonzero row seeds basis 0; later rows either match a basis
    (scalar multiple within rel_tol) or seed a new one, erroring out if
    that would exceed r_i. Bases are normalized so the last nonzero
    element is exactly 1; coefficients are re-read off the normalized
    basis. All-zero rows map to (0, 0.0).
    """
    n_rows = m.shape[0]
    seeds: list = []
    idx = np.zeros(n_rows, dtype=np.int64)
    mu = np.zeros(n_rows, dtype=np.float64)
    assign: list = []

    for j in range(n_rows):
        row = m[j]
        if not np.any(row):
            assign.append(None)  # zero row, coefficient stays 0
            continue
        matched = False
        for k, seed in enumerate(seeds):
            lam = float(row @ seed) / float(seed @ seed)
            if np.max(np.abs(row - lam * seed)) <= rel_tol * np.max(np.abs(row)):
                idx[j] = k
                assign.append(k)
                matched = True
                break
        if not matched:
            if len(seeds) >= r_i:
                raise InseparableChannel(
                    f"row {j} is not a scalar multiple of any of the {r_i} allowed bases"
                )
            seeds.append(row.astype(np.float64))
            idx[j] = len(seeds) - 1
            assign.append(len(seeds) - 1)

    bases = np.zeros((len(seeds), m.shape[1]))
    last_nz = []
    for k, seed in enumerate(seeds):
        pos = int(np.flatnonzero(seed)[-1])
        last_nz.append(pos)
        bases[k] = seed / seed[pos]  # last nonzero becomes exactly 1.0

    for j in range(n_rows):
        if assign[j] is None:
            continue
        k = assign[j]
        bound = rel_tol * max(np.max(np.abs(m[j])), 1e-300)
        # reading the coefficient off the basis's unit position is exact
        # for clean data; least squares is the fallback for noisy rows
        # whose normalization element is small
        candidates = [m[j][last_nz[k]], float(m[j] @ bases[k]) / float(bases[k] @ bases[k])]
        for cand in candidates:
            if np.max(np.abs(m[j] - cand * bases[k])) <= bound:
                mu[j] = cand
                break
        else:
            raise InseparableChannel(f"row {j} fails reconstruction within rel_tol")
    return bases, idx, mu


def separate_layer(layer: Layer, rel_tol: float = 1e-6, path: str = "?") -> tuple:
    """Try to convert one conv2d layer to uneven depthwise form.

    Returns (layer, SeparationPlan); the layer is unchanged when
    separation brings no parameter benefit or a channel is inseparable.
    """
    w = layer.weight
    h, wd, n_in, n_out = w.shape
    original = h * wd * n_in * n_out

    bases_per_channel, idx_rows, mu_rows, ranks = [], [], [], []
    for i in range(n_in):
        cm = channel_matrix(layer, i)
        r = numerical_rank(cm, rel_tol)
        ranks.append(r)
        try:
            bases, idx, mu = extract_basis(cm, r, rel_tol)
        except InseparableChannel as exc:
            plan = SeparationPlan(path, ranks, original, original, False, f"channel {i}: {exc}")
            return layer, plan
        bases_per_channel.append(bases.reshape(-1, h, wd))
        idx_rows.append(idx)
        mu_rows.append(mu)

    coeff_basis = np.stack(idx_rows)  # [n_in, n_out]
    coeff_value = np.stack(mu_rows)
    predicted = int(sum(r * h * wd for r in ranks) + np.count_nonzero(coeff_value))
    if predicted >= original:
        plan = SeparationPlan(path, ranks, original, predicted, False, "no benefit")
        return layer, plan

    new = uneven_depthwise(
        bases_per_channel,
        coeff_basis,
        coeff_value,
        bias=None if layer.bias is None else layer.bias.copy(),
        stride=layer.stride,
        padding=layer.padding,
    )
    return new, SeparationPlan(path, ranks, original, predicted, True)


def separate_model(model: Model, rel_tol: float = 1e-6) -> tuple:
    """Apply separate_layer to every conv2d layer; everything else is kept."""
    out = deepcopy(model)
    plans = []
    for path, layer in out.iter_layers():
        if layer.kind != CONV2D:
            continue
        new, plan = separate_layer(layer, rel_tol, path)
        plans.append(plan)
        if plan.applied:
            block = out.blocks[int(path.split(".")[0])]
            pos = int(path.split(".")[1]) if "." in path else 0
            block.layers[pos] = new
    return out, plans


def reconstruct_kernel(layer: Layer) -> np.ndarray:
    """Dense [h, w, n_in, n_out] kernel equivalent of an uneven layer."""
    p = layer.uneven
    n_in, n_out = p.coeff_value.shape
    h, w = p.bases[0].shape[1], p.bases[0].shape[2]
    kernel = np.zeros((h, w, n_in, n_out))
    for i in range(n_in):
        if p.bases[i].shape[0] == 0:
            continue
        picked = p.bases[i][p.coeff_basis[i]]  # [n_out, h, w]
        kernel[:, :, i, :] = (p.coeff_value[i][:, None, None] * picked).transpose(1, 2, 0)
    return kernel


def to_conv2d(layer: Layer) -> Layer:
    """Exact dense conv2d equivalent of an uneven depthwise layer."""
    return conv2d(
        reconstruct_kernel(layer),
        bias=None if layer.bias is None else layer.bias.copy(),
        stride=layer.stride,
        padding=layer.padding,
    )
