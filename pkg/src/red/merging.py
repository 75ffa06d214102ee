"""Similarity-based neuron merging with consumer rewiring.

Per merge site, output neurons are compared by the Euclidean distance of
their weight vectors (weights + bias). Pairs below the alpha-percentile
threshold (or at distance exactly 0) are connected; connected components
are merged to their mean, and every consumer of those outputs gets the
corresponding input slices summed, which preserves the function exactly
for components of identical neurons.

A run of residual blocks shares one output-channel space with the layer
feeding it, so such a chain forms a single site: all producers on the
chain are merged jointly on concatenated vectors. Depthwise filters each
act on their own input and are never merged; a site whose consumer is
depthwise is skipped too, since its kernels cannot absorb an input merge.
"""

from __future__ import annotations

from copy import deepcopy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import StructureError
from .model import (
    BATCHNORM,
    BN_EPS,
    CONV2D,
    DENSE,
    DEPTHWISE,
    RELU,
    UNEVEN,
    WEIGHTED_KINDS,
    Block,
    Layer,
    Model,
)
from .separation import separate_layer, to_conv2d
from .strategies import allocate_levels


@dataclass
class MergeConfig:
    alpha: float = 0.0  # global mean merge fraction
    alpha_strategy: str = "block"
    fold_bn: bool = True
    distance_bias: bool = True  # include bias in the neuron vectors


@dataclass
class MergeSite:
    """One merge decision: producers share an output-channel space."""

    producers: list  # layer paths whose outputs are merged
    consumers: list  # layer paths whose input slices are summed
    followers: list  # batchnorm paths carrying per-channel parameters
    alpha: float = 0.0
    threshold: float = 0.0
    components: list = field(default_factory=list)
    gamma: float = 1.0  # measured fraction of unique neurons
    realized_alpha: float = 0.0  # fraction of unique neurons merged away

    def to_json(self) -> dict:
        return {
            "producers": list(self.producers),
            "consumers": list(self.consumers),
            "followers": list(self.followers),
            "alpha": float(self.alpha),
            "threshold": float(self.threshold),
            "components": [[int(j) for j in comp] for comp in self.components],
            "gamma": float(self.gamma),
            "realized_alpha": float(self.realized_alpha),
        }


@dataclass
class MergePlan:
    sites: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {"sites": [s.to_json() for s in self.sites]}


class UnionFind:
    def __init__(self, size: int):
        self.parent = list(range(size))

    def find(self, u: int) -> int:
        while self.parent[u] != u:
            self.parent[u] = self.parent[self.parent[u]]
            u = self.parent[u]
        return u

    def union(self, u: int, v: int) -> None:
        ru, rv = self.find(u), self.find(v)
        if ru != rv:
            self.parent[max(ru, rv)] = min(ru, rv)

    def components(self) -> list:
        groups: dict = {}
        for u in range(len(self.parent)):
            groups.setdefault(self.find(u), []).append(u)
        return [sorted(g) for g in sorted(groups.values(), key=min)]


# -- batchnorm folding --------------------------------------------------------


def _fold_into(layer: Layer, bn: Layer) -> None:
    g, b = bn.tensors["gamma"], bn.tensors["beta"]
    mu, var = bn.tensors["mean"], bn.tensors["var"]
    scale = g / np.sqrt(var + BN_EPS)
    if layer.kind == DENSE:
        layer.tensors["weight"] = layer.weight * scale[:, None]
    elif layer.kind == CONV2D:
        layer.tensors["weight"] = layer.weight * scale[None, None, None, :]
    elif layer.kind == DEPTHWISE:
        layer.tensors["weight"] = layer.weight * scale[None, None, :, None]
    else:
        raise StructureError(f"cannot fold batchnorm into a {layer.kind} layer")
    bias = layer.bias if layer.bias is not None else np.zeros_like(g)
    layer.tensors["bias"] = (bias - mu) * scale + b


def fold_batchnorm(model: Model) -> Model:
    """Absorb every batchnorm into the immediately preceding dense/conv
    layer; forward outputs are preserved to float accuracy."""
    out = deepcopy(model)
    blocks = []
    prev: Optional[Layer] = None  # last emitted plain layer
    for bi, block in enumerate(out.blocks):
        if block.residual:
            new_layers: list = []
            for li, layer in enumerate(block.layers):
                if layer.kind == BATCHNORM:
                    if not new_layers or new_layers[-1].kind not in (DENSE, CONV2D, DEPTHWISE):
                        raise StructureError(
                            f"{bi}.{li}: batchnorm has no preceding affine layer in the block"
                        )
                    _fold_into(new_layers[-1], layer)
                else:
                    new_layers.append(layer)
            blocks.append(Block(new_layers, residual=True))
            prev = None
        else:
            layer = block.layers[0]
            if layer.kind == BATCHNORM:
                if prev is None or prev.kind not in (DENSE, CONV2D, DEPTHWISE):
                    raise StructureError(f"{bi}: batchnorm has no preceding affine layer")
                _fold_into(prev, layer)
            else:
                blocks.append(Block([layer]))
                prev = layer
    return Model(blocks, name=out.name, meta=dict(out.meta))


# -- neuron vectors and components --------------------------------------------


def neuron_vector(layer: Layer, j: int, include_bias: bool = True) -> np.ndarray:
    """Flat weight vector of output neuron j (bias appended when present)."""
    if layer.kind == DENSE:
        vec = layer.weight[j]
    elif layer.kind == CONV2D:
        vec = layer.weight[:, :, :, j].ravel()
    elif layer.kind == UNEVEN:
        from .separation import reconstruct_kernel

        vec = reconstruct_kernel(layer)[:, :, :, j].ravel()
    elif layer.kind == DEPTHWISE:
        raise StructureError("depthwise filters act on distinct inputs; not mergeable")
    else:
        raise StructureError(f"{layer.kind} layer has no output neurons")
    if include_bias and layer.bias is not None:
        vec = np.concatenate([vec, layer.bias[j : j + 1]])
    return vec


def _neuron_matrix(layer: Layer, include_bias: bool) -> np.ndarray:
    n = layer.out_channels
    return np.stack([neuron_vector(layer, j, include_bias) for j in range(n)])


def _components_from_vectors(vectors: np.ndarray, alpha_l: float) -> tuple:
    """(components, threshold): edges where distance < threshold or == 0."""
    n = vectors.shape[0]
    uf = UnionFind(n)
    if n < 2:
        return uf.components(), 0.0
    diff = vectors[:, None, :] - vectors[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    iu, ju = np.triu_indices(n, k=1)
    offdiag = dist[iu, ju]
    threshold = float(np.percentile(offdiag, 100.0 * alpha_l)) if offdiag.size else 0.0
    for a, b, d in zip(iu, ju, offdiag):
        if d == 0.0 or d < threshold:
            uf.union(int(a), int(b))
    return uf.components(), threshold


def build_components(layer: Layer, alpha_l: float, include_bias: bool = True) -> tuple:
    """Merge components of one layer's outputs at the alpha_l percentile."""
    return _components_from_vectors(_neuron_matrix(layer, include_bias), alpha_l)


# -- site enumeration ----------------------------------------------------------


def _node_list(model: Model) -> list:
    """[(path, block index, layer)] in evaluation order."""
    nodes = []
    for bi, block in enumerate(model.blocks):
        if block.residual:
            for li, layer in enumerate(block.layers):
                nodes.append((f"{bi}.{li}", bi, layer))
        else:
            nodes.append((str(bi), bi, block.layers[0]))
    return nodes


def _is_transparent(block: Block) -> bool:
    return not block.residual and block.layers[0].kind in (BATCHNORM, RELU)


def _chain_extent(model: Model, start: int) -> int:
    """Last block index of the residual chain starting at block `start`,
    crossing transparent (batchnorm/relu) plain blocks between residuals."""
    end = start
    i = start + 1
    while i < len(model.blocks):
        if model.blocks[i].residual:
            end = i
        elif not _is_transparent(model.blocks[i]):
            break
        i += 1
    return end


def _forward_walk(layers: list, paths: list) -> tuple:
    """(consumer path or None, follower batchnorm paths) along one path."""
    followers = []
    for layer, path in zip(layers, paths):
        if layer.kind == BATCHNORM:
            followers.append(path)
        elif layer.kind == RELU:
            continue
        elif layer.kind in WEIGHTED_KINDS:
            return path, followers
    return None, followers


_PRODUCER_KINDS = (DENSE, CONV2D, UNEVEN)


def _path_key(path: str) -> tuple:
    parts = path.split(".")
    return (int(parts[0]), int(parts[1]) if len(parts) > 1 else -1)


def enumerate_merge_sites(model: Model) -> list:
    """Merge sites front to back; the final weighted layer (the classifier)
    is never a producer. Returns MergeSite stubs without components."""
    sites: list = []
    nodes = _node_list(model)
    weighted_paths = [p for p, _, l in nodes if l.kind in WEIGHTED_KINDS]
    if not weighted_paths:
        return sites
    classifier = weighted_paths[-1]

    bi = 0
    while bi < len(model.blocks):
        if model.blocks[bi].residual:
            end = _chain_extent(model, bi)
            site = _chain_site(model, bi, end, classifier)
            if site is not None:
                sites.append(site)
            bi = end + 1
        else:
            bi += 1

    for path, _, layer in nodes:
        if layer.kind not in _PRODUCER_KINDS or path == classifier:
            continue
        if "." in path:
            # inside a residual main: the consumer must live in the same
            # main; the main's last weighted layer belongs to the chain site
            b, li = (int(x) for x in path.split("."))
            block = model.blocks[b]
            rest = block.layers[li + 1 :]
            rest_paths = [f"{b}.{k}" for k in range(li + 1, len(block.layers))]
            consumer, followers = _forward_walk(rest, rest_paths)
        else:
            # plain layer: walk following blocks, truncating at a residual
            # chain start (a producer feeding a shortcut is chain-site turf)
            b = int(path)
            rest, rest_paths = [], []
            for nb in range(b + 1, len(model.blocks)):
                if model.blocks[nb].residual:
                    break
                rest.append(model.blocks[nb].layers[0])
                rest_paths.append(str(nb))
            consumer, followers = _forward_walk(rest, rest_paths)
        if consumer is None:
            continue
        if model.layer_at(consumer).kind == DEPTHWISE:
            continue
        sites.append(MergeSite([path], [consumer], followers))

    sites.sort(key=lambda s: _path_key(s.producers[0]))
    return sites


def _chain_site(model: Model, start: int, end: int, classifier: str):
    """Joint site for the residual chain spanning blocks start..end."""
    producers, consumers, followers = [], [], []

    # producer feeding the chain input, walking back over transparent blocks
    pre = None
    i = start - 1
    while i >= 0:
        b = model.blocks[i]
        if _is_transparent(b):
            i -= 1
            continue
        if not b.residual and b.layers[0].kind in _PRODUCER_KINDS:
            pre = str(i)
        break
    if pre is None:
        return None  # chain rides on the raw input; nothing to merge
    producers.append(pre)

    for bi in range(start, end + 1):
        block = model.blocks[bi]
        if not block.residual:
            if block.layers[0].kind == BATCHNORM:
                followers.append(str(bi))
            continue
        paths = [f"{bi}.{li}" for li in range(len(block.layers))]
        first, entry_followers = _forward_walk(block.layers, paths)
        if first is None or model.layer_at(first).kind == DEPTHWISE:
            return None  # cannot remap this main's input channels
        consumers.append(first)
        followers.extend(entry_followers)
        last = None
        for li in range(len(block.layers) - 1, -1, -1):
            layer = block.layers[li]
            if layer.kind in WEIGHTED_KINDS:
                last = li
                break
            if layer.kind == BATCHNORM:
                followers.append(f"{bi}.{li}")
        last_path = f"{bi}.{last}"
        if model.layer_at(last_path).kind not in _PRODUCER_KINDS:
            return None  # depthwise tail: chain outputs not mergeable
        producers.append(last_path)

    # batchnorm plains between the pre-producer and the chain ride on it
    for j in range(int(pre) + 1, start):
        if model.blocks[j].layers[0].kind == BATCHNORM:
            followers.append(str(j))

    # weighted consumer after the chain
    rest, rest_paths = [], []
    for bi in range(end + 1, len(model.blocks)):
        rest.append(model.blocks[bi].layers[0])
        rest_paths.append(str(bi))
    consumer, post_followers = _forward_walk(rest, rest_paths)
    if consumer is None:
        return None  # chain output is the model output: logits, never merged
    if model.layer_at(consumer).kind == DEPTHWISE:
        return None
    followers.extend(post_followers)
    consumers.append(consumer)

    if classifier in producers:
        return None
    return MergeSite(
        producers,
        sorted(set(consumers), key=_path_key),
        sorted(set(followers), key=_path_key),
    )


# -- applying a merge ----------------------------------------------------------


def _merge_producer(layer: Layer, components: list) -> None:
    if layer.kind == DENSE:
        layer.tensors["weight"] = np.stack([layer.weight[c].mean(axis=0) for c in components])
    elif layer.kind == CONV2D:
        layer.tensors["weight"] = np.stack(
            [layer.weight[:, :, :, c].mean(axis=3) for c in components], axis=3
        )
    else:
        raise StructureError(f"cannot merge outputs of a {layer.kind} layer")
    if layer.bias is not None:
        layer.tensors["bias"] = np.array([layer.bias[c].mean() for c in components])


def _merge_follower(layer: Layer, components: list) -> None:
    for name in ("gamma", "beta", "mean", "var"):
        t = layer.tensors[name]
        layer.tensors[name] = np.array([t[c].mean() for c in components])


def _merge_consumer(layer: Layer, components: list, producer_out: int) -> None:
    if layer.kind == DENSE:
        w = layer.weight
        if w.shape[1] == producer_out:
            layer.tensors["weight"] = np.stack(
                [w[:, c].sum(axis=1) for c in components], axis=1
            )
        else:
            # flattened convolutional input: one column block per channel
            if w.shape[1] % producer_out:
                raise StructureError(
                    f"dense input {w.shape[1]} not divisible by {producer_out} channels"
                )
            hw = w.shape[1] // producer_out
            w3 = w.reshape(w.shape[0], producer_out, hw)
            merged = np.stack([w3[:, c, :].sum(axis=1) for c in components], axis=1)
            layer.tensors["weight"] = merged.reshape(w.shape[0], -1)
    elif layer.kind == CONV2D:
        w = layer.weight
        layer.tensors["weight"] = np.stack(
            [w[:, :, c, :].sum(axis=2) for c in components], axis=2
        )
    else:
        raise StructureError(f"cannot sum input slices of a {layer.kind} layer")


def apply_merge(model: Model, path: str, components: list) -> Model:
    """Merge one plain layer's outputs per `components` and rewire its
    consumer; returns a new model."""
    out = deepcopy(model)
    sites = [s for s in enumerate_merge_sites(out) if s.producers == [path]]
    if not sites:
        raise StructureError(f"layer {path} is not a mergeable producer")
    site = sites[0]
    site.components = components
    for p in site.producers + site.consumers:
        if out.layer_at(p).kind == UNEVEN:
            _replace_layer(out, p, to_conv2d(out.layer_at(p)))
    _apply_site(out, site)
    return out


def _apply_site(model: Model, site: MergeSite) -> None:
    components = site.components
    producer_out = model.layer_at(site.producers[0]).out_channels
    if sorted(j for c in components for j in c) != list(range(producer_out)):
        raise StructureError("components must partition the producer outputs")
    for p in site.producers:
        layer = model.layer_at(p)
        if layer.out_channels != producer_out:
            raise StructureError("chain producers disagree on the channel count")
        _merge_producer(layer, components)
    for p in site.followers:
        _merge_follower(model.layer_at(p), components)
    for p in site.consumers:
        _merge_consumer(model.layer_at(p), components, producer_out)


def merge_model(model: Model, cfg: Optional[MergeConfig] = None, rel_tol: float = 1e-6) -> tuple:
    """Merge every site front to back; returns (model, MergePlan).

    Uneven depthwise layers touched by a merge are rebuilt as dense
    convolutions, merged, then re-separated at the end, so running the
    merge before or after separation yields the same model.
    """
    cfg = cfg or MergeConfig()
    out = model
    if cfg.fold_bn and any(l.kind == BATCHNORM for _, l in model.iter_layers()):
        out = fold_batchnorm(out)
    out = deepcopy(out)

    sites = enumerate_merge_sites(out)
    alphas = allocate_levels(cfg.alpha, len(sites), cfg.alpha_strategy)
    plan = MergePlan()
    reseparate: set = set()

    for site, alpha_l in zip(sites, alphas):
        vectors = np.concatenate(
            [_neuron_matrix(out.layer_at(p), cfg.distance_bias) for p in site.producers],
            axis=1,
        )
        components, threshold = _components_from_vectors(vectors, float(alpha_l))
        n = vectors.shape[0]
        unique = np.unique(vectors, axis=0).shape[0]
        site.alpha = float(alpha_l)
        site.threshold = threshold
        site.components = components
        site.gamma = unique / n
        site.realized_alpha = 1.0 - len(components) / unique
        plan.sites.append(site)
        if len(components) == n:
            continue
        for p in site.producers + site.consumers:
            layer = out.layer_at(p)
            if layer.kind == UNEVEN:
                _replace_layer(out, p, to_conv2d(layer))
                reseparate.add(p)
        _apply_site(out, site)

    for p in sorted(reseparate, key=_path_key):
        new, plan_entry = separate_layer(out.layer_at(p), rel_tol, p)
        if plan_entry.applied:
            _replace_layer(out, p, new)
    return out, plan


def _replace_layer(model: Model, path: str, layer: Layer) -> None:
    parts = path.split(".")
    block = model.blocks[int(parts[0])]
    block.layers[int(parts[1]) if len(parts) > 1 else 0] = layer
