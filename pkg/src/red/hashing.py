"""Adaptive scalar weight hashing.

Per layer: estimate the weight-value density with a Gaussian KDE on a
regular grid, extract its interleaved local minima/maxima, optionally
collapse low-contrast adjacent modes, then snap every weight to the mode
of its enclosing inter-minima interval. Weights and biases of a layer are
pooled into one distribution, so both are hashed against the same modes.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .errors import DegenerateDistribution, EstimationError
from .model import BATCHNORM, DENSE, CONV2D, DEPTHWISE, Model
from .strategies import allocate_levels

_HASHED_KINDS = (DENSE, CONV2D, DEPTHWISE)
_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class DensityEstimate:
    grid: np.ndarray  # G ascending abscissae
    values: np.ndarray  # density at each abscissa, >= 0
    bandwidth: float


@dataclass
class ModeSet:
    """Interleaved extrema: minima carry -inf/+inf sentinels at the ends,
    so len(minima) == len(maxima) + 1 and m_k < M_k < m_{k+1}."""

    minima: np.ndarray
    maxima: np.ndarray


@dataclass
class HashConfig:
    tau: float = 0.0  # global mean contrast, fraction of each layer's range
    tau_strategy: str = "constant"
    grid_size: int = 2048
    # optional bandwidth override: scalar for all layers or {layer path: value}
    bandwidth: Union[float, dict, None] = None
    hash_bias: bool = True


def bandwidth(weights) -> float:
    """Median adjacent difference of the sorted distinct weight values."""
    distinct = np.unique(np.asarray(weights, dtype=np.float64).ravel())
    if distinct.size < 2:
        raise DegenerateDistribution("all weight values are identical")
    return float(np.median(np.diff(distinct)))


def estimate_density(weights, delta: float, grid_size: int) -> DensityEstimate:
    """Gaussian-kernel density of the weights on a uniform grid.

    The grid spans [min - 3*delta, max + 3*delta] with `grid_size` points,
    so kernel tails at the extremes stay inside the grid.
    """
    if delta <= 0:
        raise ValueError("bandwidth must be positive")
    if grid_size < 16:
        raise ValueError("grid_size must be at least 16")
    w = np.asarray(weights, dtype=np.float64).ravel()
    grid = np.linspace(w.min() - 3.0 * delta, w.max() + 3.0 * delta, grid_size)
    values = np.zeros(grid_size)
    # chunked so the [G, n] kernel matrix stays small
    for lo in range(0, w.size, 4096):
        z = (grid[:, None] - w[None, lo : lo + 4096]) / delta
        values += np.exp(-0.5 * z * z).sum(axis=1)
    values /= w.size * delta * _SQRT_2PI
    return DensityEstimate(grid, values, float(delta))


def extract_extrema(density: DensityEstimate) -> ModeSet:
    """Strict local extrema of the gridded density.

    Plateaus (runs of equal values) count as a single extremum at the
    plateau midpoint. A run touching the grid boundary can only be a
    maximum (when it strictly dominates its inward neighbor): the padded
    tails make boundary minima meaningless, but on a coarse grid the
    discretized peak of an edge cluster may land on the boundary run.
    """
    v, grid = density.values, density.grid
    change = np.flatnonzero(np.diff(v))
    starts = np.concatenate(([0], change + 1))
    ends = np.concatenate((change, [v.size - 1]))

    kinds, positions = [], []
    for s, e in zip(starts, ends):
        if s == 0 and e == v.size - 1:
            continue  # constant density: no usable structure
        left = v[s - 1] if s > 0 else -np.inf
        right = v[e + 1] if e < v.size - 1 else -np.inf
        val = v[s]
        if left < val > right:
            kinds.append(1)
            positions.append(0.5 * (grid[s] + grid[e]))
        elif (s > 0 and e < v.size - 1) and left > val < right:
            kinds.append(-1)
            positions.append(0.5 * (grid[s] + grid[e]))

    if 1 not in kinds:
        raise EstimationError("density has no maximum; grid is unusable")
    if kinds[0] != 1 or kinds[-1] != 1 or any(a == b for a, b in zip(kinds, kinds[1:])):
        raise EstimationError("extrema do not alternate max/min/.../max")

    maxima = np.array([p for k, p in zip(kinds, positions) if k == 1])
    interior = np.array([p for k, p in zip(kinds, positions) if k == -1])
    minima = np.concatenate(([-np.inf], interior, [np.inf]))
    return ModeSet(minima, maxima)


def collapse_modes(modes: ModeSet, density: DensityEstimate, tau_l: float, value_range: float) -> ModeSet:
    """Collapse adjacent maxima closer than tau_l * value_range.

    Pairs are processed closest-first; the mode with the lower density is
    removed together with the minimum between the pair (density ties keep
    the smaller abscissa). Closest-first makes the surviving mode count
    non-increasing in tau_l.
    """
    maxima = list(modes.maxima)
    minima = list(modes.minima)
    dens = list(np.interp(modes.maxima, density.grid, density.values))
    threshold = tau_l * value_range
    while len(maxima) > 1:
        gaps = np.diff(maxima)
        j = int(np.argmin(gaps))
        if gaps[j] >= threshold:
            break
        drop = j if dens[j] < dens[j + 1] else j + 1
        del maxima[drop], dens[drop]
        del minima[j + 1]  # the interior minimum between the pair
    return ModeSet(np.asarray(minima), np.asarray(maxima))


def hash_layer(weights, modes: ModeSet) -> np.ndarray:
    """Snap every weight to the maximum of its enclosing minima interval."""
    w = np.asarray(weights, dtype=np.float64)
    idx = np.searchsorted(modes.minima[1:-1], w.ravel(), side="right")
    return modes.maxima[idx].reshape(w.shape)


def snap_modes(modes: ModeSet, weights) -> ModeSet:
    """Move each mode abscissa to the nearest weight value in its interval.

    Grid maxima are only grid-step accurate; snapping makes hashing an
    exact identity on layers whose weights already sit on k values, hence
    hash(hash(m)) == hash(m).
    """
    w = np.unique(np.asarray(weights, dtype=np.float64).ravel())
    interior = modes.minima[1:-1]
    snapped = []
    for k, m in enumerate(modes.maxima):
        lo = modes.minima[k]
        hi = modes.minima[k + 1]
        inside = w[(w >= lo) & (w < hi)]
        snapped.append(inside[np.argmin(np.abs(inside - m))] if inside.size else m)
    return ModeSet(np.concatenate(([-np.inf], interior, [np.inf])), np.asarray(snapped))


def _layer_bandwidth(cfg: HashConfig, path: str, pool: np.ndarray) -> float:
    if isinstance(cfg.bandwidth, dict):
        if path in cfg.bandwidth:
            return float(cfg.bandwidth[path])
    elif cfg.bandwidth is not None:
        return float(cfg.bandwidth)
    return bandwidth(pool)


def _discrete_modes(distinct: np.ndarray, counts: np.ndarray) -> tuple:
    """ModeSet and pseudo-density of an already-discrete value multiset:
    every distinct value is a mode, multiplicities play the density role."""
    interior = 0.5 * (distinct[:-1] + distinct[1:])
    modes = ModeSet(np.concatenate(([-np.inf], interior, [np.inf])), distinct.copy())
    density = DensityEstimate(distinct.copy(), counts.astype(np.float64), 1.0)
    return modes, density


def _hash_named(layer, names, cfg: HashConfig, tau_l: float, path: str) -> None:
    """Hash the pooled values of the named tensors in place."""
    arrays = [layer.tensors[n] for n in names if n in layer.tensors]
    pool = np.concatenate([a.ravel() for a in arrays])
    distinct, counts = np.unique(pool, return_counts=True)
    if distinct.size < 2:
        return  # degenerate: already a single value

    # Discreteness gate: when most values repeat, the median difference of
    # consecutive (sorted, duplicates kept) values is 0, the KDE bandwidth
    # degenerates, and the layer counts as hashed already. tau > 0 can
    # still collapse modes of such a layer, on the empirical pmf directly.
    if np.median(np.diff(np.sort(pool))) == 0.0 and cfg.bandwidth is None:
        if tau_l == 0.0:
            return
        modes, density = _discrete_modes(distinct, counts)
        modes = collapse_modes(modes, density, tau_l, float(pool.max() - pool.min()))
    else:
        try:
            delta = _layer_bandwidth(cfg, path, pool)
        except DegenerateDistribution:
            return
        density = estimate_density(pool, delta, cfg.grid_size)
        modes = extract_extrema(density)
        modes = collapse_modes(modes, density, tau_l, float(pool.max() - pool.min()))
        modes = snap_modes(modes, pool)
    for n in names:
        if n in layer.tensors:
            layer.tensors[n] = hash_layer(layer.tensors[n], modes)


def hashable_paths(model: Model) -> list:
    """Paths of layers that own a hashable parameter pool, in order."""
    out = []
    for path, layer in model.iter_layers():
        if layer.kind in _HASHED_KINDS or layer.kind == BATCHNORM:
            out.append(path)
    return out


def allocate_taus(tau: float, count: int, strategy: str) -> np.ndarray:
    """Per-layer contrast levels averaging (by strategy) to `tau`."""
    return allocate_levels(tau, count, strategy)


def hash_model(model: Model, cfg: Optional[HashConfig] = None) -> Model:
    """Hash every parameter-bearing layer with its own density and tau.

    Dense/conv/depthwise layers pool weight (+ bias when cfg.hash_bias).
    Batchnorm layers, when still present, pool gamma/beta/mean; var stays
    untouched so it remains positive. Uneven depthwise layers are left
    alone (hashing runs before separation in the pipeline).
    """
    cfg = cfg or HashConfig()
    from copy import deepcopy

    out = deepcopy(model)
    paths = hashable_paths(out)
    taus = allocate_taus(cfg.tau, len(paths), cfg.tau_strategy)
    tau_of = dict(zip(paths, taus))

    def work(item):
        path, layer = item
        if layer.kind in _HASHED_KINDS:
            names = ("weight", "bias") if cfg.hash_bias else ("weight",)
            _hash_named(layer, names, cfg, tau_of[path], path)
        elif layer.kind == BATCHNORM:
            _hash_named(layer, ("gamma", "beta", "mean"), cfg, tau_of[path], path)

    items = [(p, l) for p, l in out.iter_layers() if p in tau_of]
    threads = int(os.environ.get("RED_THREADS", "1"))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, items))
    else:
        for item in items:
            work(item)
    return out
