"""Seed-deterministic generators of models with planted structure.

Every generator returns its ground truth alongside the model so tests can
assert recovery (mode assignments, duplicate components, channel ranks)
instead of just absence of crashes. Weights are drawn as float32 values
held in float64, so serialization round-trips bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import model as M


@dataclass
class PlantSpec:
    seed: int = 0
    modes: Sequence[float] = (-1.0, 1.0)  # mode centers per layer
    noise: float = 0.0  # sigma of the Gaussian jitter around each center
    duplicate_fraction: float = 0.5  # fraction of outputs that are copies
    separable_fraction: float = 1.0  # fraction of rank-1 input channels
    weight_modes: int = 16  # draw weights from this many values (0 = continuous)
    layers: int = 4
    width: int = 16
    in_features: int = 8
    classes: int = 5
    kernel: int = 3
    channels: int = 4

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def _f32(a: np.ndarray) -> np.ndarray:
    return a.astype(np.float32).astype(np.float64)


def _draw(rng, shape, weight_modes: int, fan_in: int = 1) -> np.ndarray:
    """Weight tensor, either continuous or concentrated on a fresh small
    value set. Mode values sit on a nonzero dyadic lattice, scaled by a
    power of two near 1/sqrt(fan_in) to keep activations O(1); sums, pair
    means, and products of two values stay exactly float32-storable, and
    the tensor is invariant under tau=0 hashing."""
    if weight_modes <= 0:
        return _f32(rng.standard_normal(shape) / np.sqrt(fan_in))
    scale = 2.0 ** -round(np.log2(fan_in) / 2.0)
    lattice = np.concatenate([np.arange(-511, 0), np.arange(1, 512)])
    values = rng.choice(lattice, size=weight_modes, replace=False) / 256.0 * scale
    return values[rng.integers(0, weight_modes, size=shape)]


def plant_groups(n_out: int, dup_fraction: float) -> list:
    """Partition n_out outputs into round((1 - dup_fraction) * n_out)
    groups of near-equal size; members of a group share one weight vector,
    so dup_fraction is the fraction of outputs that are redundant copies."""
    unique = int(round((1.0 - dup_fraction) * n_out))
    if unique < 1 or unique > n_out:
        raise ValueError(f"duplicate fraction {dup_fraction} not achievable for {n_out} outputs")
    base, extra = divmod(n_out, unique)
    components, j = [], 0
    for g in range(unique):
        size = base + (1 if g < extra else 0)
        components.append(list(range(j, j + size)))
        j += size
    return components


def gen_multimodal_layer(spec: PlantSpec) -> tuple:
    """Dense layer whose weights cluster around spec.modes.

    Returns (layer, assignment) where assignment[i, j] indexes the true
    mode of each weight. Mode separation must exceed 6 * spec.noise.
    """
    modes = np.asarray(spec.modes, dtype=np.float64)
    if modes.size > 1 and np.min(np.diff(np.sort(modes))) <= 6.0 * spec.noise:
        raise ValueError("mode separation must exceed 6 * noise")
    rng = spec.rng()
    shape = (spec.width, spec.in_features)
    assignment = rng.integers(0, modes.size, size=shape)
    weights = modes[assignment] + spec.noise * rng.standard_normal(shape)
    return M.dense(_f32(weights)), assignment


def gen_multimodal_model(spec: PlantSpec) -> M.Model:
    """Dense classifier stack with multimodal weights in every layer."""
    rng = spec.rng()
    modes = np.asarray(spec.modes, dtype=np.float64)
    layers: list = []
    n_in = spec.in_features
    for l in range(spec.layers):
        n_out = spec.classes if l == spec.layers - 1 else spec.width
        a = rng.integers(0, modes.size, size=(n_out, n_in))
        w = _f32(modes[a] + spec.noise * rng.standard_normal((n_out, n_in)))
        b = _f32(0.1 * rng.standard_normal(n_out))
        layers.append(M.dense(w, b))
        if l < spec.layers - 1:
            layers.append(M.relu())
        n_in = n_out
    return M.sequential(layers, name=f"multimodal-{spec.seed}")


def _planted_rows(rng, n_out: int, n_in: int, dup_fraction: float, weight_modes: int) -> tuple:
    """Rows with planted duplicate groups; returns (weights, components)."""
    components = plant_groups(n_out, dup_fraction)
    w = _draw(rng, (n_out, n_in), weight_modes, fan_in=n_in)
    for comp in components:
        w[comp] = w[comp[0]]
    return w, components


def gen_model_with_duplicates(spec: PlantSpec) -> tuple:
    """Dense stack with duplicate output groups planted in every layer but
    the classifier. Returns (model, ground truth components per path)."""
    rng = spec.rng()
    layers: list = []
    truth: dict = {}
    n_in = spec.in_features
    path = 0
    for l in range(spec.layers):
        last = l == spec.layers - 1
        n_out = spec.classes if last else spec.width
        if last:
            w = _draw(rng, (n_out, n_in), spec.weight_modes, fan_in=n_in)
            comps = [[k] for k in range(n_out)]
        else:
            w, comps = _planted_rows(rng, n_out, n_in, spec.duplicate_fraction, spec.weight_modes)
        b = _draw(rng, (n_out,), spec.weight_modes)
        for comp in comps:
            b[comp] = b[comp[0]]
        layers.append(M.dense(w, b))
        if not last:
            truth[str(path)] = comps
        path += 1
        if not last:
            layers.append(M.relu())
            path += 1
        n_in = n_out
    return M.sequential(layers, name=f"duplicates-{spec.seed}"), truth


def gen_separable_conv(spec: PlantSpec, n_out: Optional[int] = None) -> M.Layer:
    """Conv kernel built exactly as depthwise * pointwise: W = D_i * P_ij.

    Channels beyond spec.separable_fraction get independent full filters
    instead, so their channel matrices have generic (full) rank.
    """
    rng = spec.rng()
    n_out = n_out or spec.width
    k, c = spec.kernel, spec.channels
    D = _draw(rng, (k, k, c), spec.weight_modes)
    P = _draw(rng, (c, n_out), spec.weight_modes, fan_in=k * k * c)
    w = D[:, :, :, None] * P[None, None, :, :]
    dense_channels = int(round((1.0 - spec.separable_fraction) * c))
    for i in range(dense_channels):
        w[:, :, i, :] = _draw(rng, (k, k, n_out), spec.weight_modes, fan_in=k * k * c)
    return M.conv2d(w, _draw(rng, (n_out,), spec.weight_modes), padding=spec.kernel // 2)


def gen_conv_classifier(spec: PlantSpec, resolution=(8, 8)) -> M.Model:
    """Plain conv stack (conv/relu pairs) with a dense head; convolutions
    are planted separable and carry duplicate output pairs."""
    rng = spec.rng()
    layers: list = []
    c_in = spec.channels
    for l in range(spec.layers):
        sub = PlantSpec(
            seed=int(rng.integers(0, 2**31)),
            kernel=spec.kernel,
            channels=c_in,
            separable_fraction=spec.separable_fraction,
        )
        conv = gen_separable_conv(sub, n_out=spec.width)
        w = conv.weight.copy()
        for comp in plant_groups(spec.width, spec.duplicate_fraction):
            w[:, :, :, comp] = w[:, :, :, comp[0]][:, :, :, None]
            conv.bias[comp] = conv.bias[comp[0]]
        conv.tensors["weight"] = w
        layers.extend([conv, M.relu()])
        c_in = spec.width
    head_in = c_in * resolution[0] * resolution[1]
    layers.append(M.dense(_draw(rng, (spec.classes, head_in), spec.weight_modes, fan_in=head_in)))
    return M.sequential(layers, name=f"convnet-{spec.seed}")


def gen_residual_model(spec: PlantSpec, blocks: int = 1) -> tuple:
    """Conv stem + residual blocks + dense head, with one duplicate channel
    pair planted jointly across every producer on the shortcut chain.

    Returns (model, chain components ground truth).
    """
    rng = spec.rng()
    c = spec.width
    fan = spec.kernel * spec.kernel * spec.channels
    stem_w = _draw(rng, (spec.kernel, spec.kernel, spec.channels, c), spec.weight_modes, fan_in=fan)
    stem_b = _draw(rng, (c,), spec.weight_modes)
    stem_w[:, :, :, 1] = stem_w[:, :, :, 0]
    stem_b[1] = stem_b[0]
    out_blocks = [M.plain(M.conv2d(stem_w, stem_b, padding=spec.kernel // 2))]
    for _ in range(blocks):
        fan = spec.kernel * spec.kernel * c
        w1 = _draw(rng, (spec.kernel, spec.kernel, c, c), spec.weight_modes, fan_in=fan)
        w2 = _draw(rng, (spec.kernel, spec.kernel, c, c), spec.weight_modes, fan_in=fan)
        b2 = _draw(rng, (c,), spec.weight_modes)
        w2[:, :, :, 1] = w2[:, :, :, 0]
        b2[1] = b2[0]
        out_blocks.append(
            M.residual(
                [
                    M.conv2d(w1, None, padding=spec.kernel // 2),
                    M.relu(),
                    M.conv2d(w2, b2, padding=spec.kernel // 2),
                ]
            )
        )
    out_blocks.append(M.plain(M.relu()))
    head = _draw(rng, (spec.classes, c * 16), spec.weight_modes, fan_in=c * 16)
    out_blocks.append(M.plain(M.dense(head)))
    truth = [[0, 1]] + [[j] for j in range(2, c)]
    return M.Model(out_blocks, name=f"residual-{spec.seed}"), truth


def gen_random_model(seed: int, conv: bool = False) -> M.Model:
    """Small valid random model (no planted structure); format-test fodder."""
    rng = np.random.default_rng(seed)
    layers: list = []
    if conv:
        c = int(rng.integers(1, 4))
        f = int(rng.integers(2, 6))
        k = int(rng.integers(1, 4))
        layers.append(M.conv2d(_f32(rng.standard_normal((k, k, c, f))), padding=k // 2))
        layers.append(M.relu())
        layers.append(M.batchnorm(_f32(rng.uniform(0.5, 2, f)), _f32(rng.standard_normal(f)),
                                  _f32(rng.standard_normal(f)), _f32(rng.uniform(0.5, 2, f))))
        layers.append(M.dense(_f32(rng.standard_normal((3, f * 16)))))
    else:
        widths = [int(rng.integers(2, 9)) for _ in range(int(rng.integers(1, 4)) + 1)]
        for a, b in zip(widths, widths[1:]):
            use_bias = bool(rng.integers(0, 2))
            layers.append(
                M.dense(_f32(rng.standard_normal((b, a))),
                        _f32(rng.standard_normal(b)) if use_bias else None)
            )
            layers.append(M.relu())
        layers.pop()
    return M.sequential(layers, name=f"random-{seed}")
