"""Parameter/FLOPs accounting, closed-form pruning predictions, zip ratio,
and report assembly.

Conventions: one multiply-accumulate = 2 FLOPs for weighted layers;
elementwise work (batchnorm, relu, residual additions) is tallied in a
separate column so headline numbers stay comparable.
"""

from __future__ import annotations

import zlib
from typing import Optional

import numpy as np

from .errors import EvaluationError
from .model import BATCHNORM, CONV2D, DENSE, DEPTHWISE, RELU, UNEVEN, Layer, Model
from .redm import save_bytes


def layer_params(layer: Layer) -> int:
    if layer.kind == DENSE:
        n_out, n_in = layer.weight.shape
        return n_out * n_in + (n_out if layer.bias is not None else 0)
    if layer.kind in (CONV2D, DEPTHWISE):
        count = int(np.prod(layer.weight.shape))
        return count + (layer.out_channels if layer.bias is not None else 0)
    if layer.kind == UNEVEN:
        p = layer.uneven
        h, w = layer.kernel_size
        count = sum(b.shape[0] for b in p.bases) * h * w
        count += int(np.count_nonzero(p.coeff_value))
        return count + (layer.out_channels if layer.bias is not None else 0)
    if layer.kind == BATCHNORM:
        return 4 * layer.out_channels
    return 0


def count_params(model: Model) -> dict:
    """{"layers": {path: count}, "total": int}"""
    per = {path: layer_params(layer) for path, layer in model.iter_layers()}
    return {"layers": per, "total": int(sum(per.values()))}


def _conv_out(hw: tuple, kernel: tuple, stride: int, padding: int) -> tuple:
    h = (hw[0] + 2 * padding - kernel[0]) // stride + 1
    w = (hw[1] + 2 * padding - kernel[1]) // stride + 1
    if h <= 0 or w <= 0:
        raise EvaluationError(f"resolution {hw} too small for kernel {kernel}")
    return h, w


def _layer_flops(layer: Layer, state) -> tuple:
    """(mac flops, elementwise flops, new activation state)."""
    kind, shape = state
    if layer.kind == DENSE:
        n_out, n_in = layer.weight.shape
        return 2 * n_in * n_out, 0, ("vec", (n_out,))
    if layer.kind == CONV2D:
        h, w, n_in, n_out = layer.weight.shape
        oh, ow = _conv_out(shape[1:], (h, w), layer.stride, layer.padding)
        return 2 * h * w * n_in * n_out * oh * ow, 0, ("map", (n_out, oh, ow))
    if layer.kind == DEPTHWISE:
        h, w, n_in, _ = layer.weight.shape
        oh, ow = _conv_out(shape[1:], (h, w), layer.stride, layer.padding)
        return 2 * h * w * n_in * oh * ow, 0, ("map", (n_in, oh, ow))
    if layer.kind == UNEVEN:
        p = layer.uneven
        h, w = layer.kernel_size
        n_out = layer.out_channels
        oh, ow = _conv_out(shape[1:], (h, w), layer.stride, layer.padding)
        basis_count = sum(b.shape[0] for b in p.bases)
        macs = 2 * basis_count * h * w * oh * ow
        macs += 2 * int(np.count_nonzero(p.coeff_value)) * oh * ow
        return macs, 0, ("map", (n_out, oh, ow))
    if layer.kind == BATCHNORM:
        return 0, int(np.prod(shape)), state
    if layer.kind == RELU:
        return 0, int(np.prod(shape)), state
    raise EvaluationError(f"unknown layer kind {layer.kind!r}")


def count_flops(model: Model, resolution) -> dict:
    """Per-layer and total FLOPs for one input at the given resolution.

    Dense stages flatten the incoming activation; a model starting with a
    dense layer ignores the resolution.
    """
    per_mac, per_elem = {}, {}
    first = next(l for _, l in model.iter_layers() if l.kind != RELU)
    if first.kind == DENSE:
        state = ("vec", (first.in_channels,))
    else:
        state = ("map", (first.in_channels, int(resolution[0]), int(resolution[1])))
    for bi, block in enumerate(model.blocks):
        if block.residual:
            inner = state
            for li, layer in enumerate(block.layers):
                if layer.kind == DENSE and inner[0] == "map":
                    inner = ("vec", (int(np.prod(inner[1])),))
                mac, elem, inner = _layer_flops(layer, inner)
                per_mac[f"{bi}.{li}"], per_elem[f"{bi}.{li}"] = mac, elem
            per_elem[f"{bi}.{li}"] += int(np.prod(inner[1]))  # shortcut addition
            state = inner
        else:
            layer = block.layers[0]
            if layer.kind == DENSE and state[0] == "map":
                state = ("vec", (int(np.prod(state[1])),))
            mac, elem, state = _layer_flops(layer, state)
            per_mac[str(bi)], per_elem[str(bi)] = mac, elem
    return {
        "layers": per_mac,
        "elementwise": per_elem,
        "total": int(sum(per_mac.values())),
        "total_elementwise": int(sum(per_elem.values())),
    }


def expected_merge_ratio(gamma_l: float, alpha_l: float) -> float:
    """Fraction of outputs kept after merging: gamma^l * (1 - alpha^l)."""
    if not (0.0 <= gamma_l <= 1.0 and 0.0 <= alpha_l <= 1.0):
        raise ValueError("gamma_l and alpha_l must lie in [0, 1]")
    return gamma_l * (1.0 - alpha_l)


def expected_red_ratio(w: int, h: int, n_in: int, n_out: int, r_merge: float, ranks) -> float:
    """Predicted remaining-parameter fraction after merge + separation.

    (wh + r_merge*n_out) / (wh*n_out), scaled by mean rank when the
    per-channel ranks are not all 1. The scaled form prices the pointwise
    coefficients as a dense [sum(r_i), n_out] matrix, so for mixed ranks
    it upper-bounds the sparse one-coefficient-per-pair layout actually
    stored.
    """
    ranks = list(ranks)
    if len(ranks) != n_in:
        raise ValueError(f"expected {n_in} ranks, got {len(ranks)}")
    base = (w * h + r_merge * n_out) / (w * h * n_out)
    if all(r == 1 for r in ranks):
        return base
    return base * (sum(ranks) / n_in)


def zip_ratio(original: Model, processed: Model, level: int = 6) -> float:
    """Compressed-size ratio of the serialized models (DEFLATE level 6)."""
    a = len(zlib.compress(save_bytes(original), level))
    b = len(zlib.compress(save_bytes(processed), level))
    return a / b


def _removed_pct(before: float, after: float) -> float:
    return 100.0 * (1.0 - after / before) if before else 0.0


def build_report(
    baseline: Model,
    processed: Model,
    resolution=(32, 32),
    stages: Optional[dict] = None,
    logit_stats: Optional[tuple] = None,
    merge_plan=None,
    separation_plans=None,
) -> dict:
    """Assemble the JSON-ready compression report.

    `stages` maps stage name -> model snapshot (in pipeline order);
    `logit_stats` is the (delta, gap mean, gap std) triple.
    """
    p_before = count_params(baseline)
    p_after = count_params(processed)
    f_before = count_flops(baseline, resolution)
    f_after = count_flops(processed, resolution)

    layers = []
    before_layers = list(p_before["layers"].items())
    after_layers = list(p_after["layers"].items())
    aligned = len(before_layers) == len(after_layers)
    for i, (path, before) in enumerate(before_layers):
        entry = {"layer": path, "params_before": before}
        if aligned:
            entry["params_after"] = after_layers[i][1]
            entry["removed_params_pct"] = _removed_pct(before, after_layers[i][1])
        layers.append(entry)

    report = {
        "total": {
            "params_before": p_before["total"],
            "params_after": p_after["total"],
            "removed_params_pct": _removed_pct(p_before["total"], p_after["total"]),
            "flops_before": f_before["total"],
            "flops_after": f_after["total"],
            "removed_flops_pct": _removed_pct(f_before["total"], f_after["total"]),
            "elementwise_flops_before": f_before["total_elementwise"],
            "elementwise_flops_after": f_after["total_elementwise"],
        },
        "layers": layers,
        "zip_ratio": zip_ratio(baseline, processed),
    }
    if stages:
        report["stages"] = [
            {"name": name, "params": count_params(m)["total"]} for name, m in stages.items()
        ]
    if logit_stats is not None:
        delta, gap_mean, gap_std = logit_stats
        report["logit_delta"] = {
            "mean_abs_delta": delta,
            "gap_mean": gap_mean,
            "gap_std": gap_std,
        }
    if merge_plan is not None:
        report["merge"] = merge_plan.to_json()
    if separation_plans is not None:
        report["separation"] = [p.to_json() for p in separation_plans]
    return report


def report_text(report: dict) -> str:
    """Plain-text table of the report's per-layer and total numbers."""
    lines = []
    header = f"{'layer':>10} {'params before':>14} {'params after':>13} {'removed %':>10}"
    lines.append(header)
    lines.append("-" * len(header))
    for entry in report["layers"]:
        after = entry.get("params_after")
        pct = entry.get("removed_params_pct")
        lines.append(
            f"{entry['layer']:>10} {entry['params_before']:>14} "
            f"{after if after is not None else '-':>13} "
            f"{f'{pct:.2f}' if pct is not None else '-':>10}"
        )
    t = report["total"]
    lines.append("-" * len(header))
    lines.append(
        f"{'total':>10} {t['params_before']:>14} {t['params_after']:>13} "
        f"{t['removed_params_pct']:>10.2f}"
    )
    lines.append(
        f"flops: {t['flops_before']} -> {t['flops_after']} "
        f"({t['removed_flops_pct']:.2f}% removed, elementwise "
        f"{t['elementwise_flops_before']} -> {t['elementwise_flops_after']})"
    )
    if "zip_ratio" in report:
        lines.append(f"zip ratio: {report['zip_ratio']:.3f}")
    if "logit_delta" in report:
        d = report["logit_delta"]
        lines.append(
            f"logit delta: {d['mean_abs_delta']:.6g} "
            f"(top1-top2 gap {d['gap_mean']:.6g} +/- {d['gap_std']:.6g})"
        )
    return "\n".join(lines)
