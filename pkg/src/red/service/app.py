"""FastAPI front end for the compression engine.

The service owns no state: every endpoint decodes a model, runs the core
package, and returns bytes plus numbers produced by the metrics and
inference modules. The CLI is a thin client of these endpoints.
"""

from __future__ import annotations

import binascii

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..errors import EvaluationError, RedError
from ..inference import forward, logit_delta, random_inputs
from ..metrics import build_report, count_flops, count_params
from ..pipeline import PipelineConfig, run_pipeline
from ..redm import load_bytes, save_bytes
from .schemas import (
    CompressRequest,
    CompressResponse,
    PipelineOptions,
    ReportRequest,
    SynthRequest,
    SynthResponse,
    VerifyRequest,
    VerifyResponse,
    decode_model,
    encode_model,
)

app = FastAPI(title="red compression service", version=__version__)


def _load(b64: str, what: str):
    try:
        raw = decode_model(b64)
    except (binascii.Error, ValueError) as exc:
        raise HTTPException(400, f"{what}: invalid base64: {exc}") from exc
    try:
        return load_bytes(raw)
    except RedError as exc:
        raise HTTPException(422, f"{what}: {exc}") from exc


def _config(opts: PipelineOptions) -> PipelineConfig:
    return PipelineConfig(
        tau=opts.tau,
        tau_strategy=opts.tau_strategy,
        alpha=opts.alpha,
        alpha_strategy=opts.alpha_strategy,
        rel_tol=opts.rel_tol,
        fold_bn=opts.fold_bn,
        hash_bias=opts.hash_bias,
        distance_bias=opts.distance_bias,
        grid_size=opts.grid_size,
        seed=opts.seed,
        stages=tuple(opts.stages),
        order=opts.order,
        bandwidth=opts.bandwidth,
    )


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/compress", response_model=CompressResponse)
def compress(req: CompressRequest) -> CompressResponse:
    model = _load(req.model_b64, "model")
    opts = req.options
    try:
        result = run_pipeline(model, _config(opts))
    except (RedError, ValueError) as exc:
        raise HTTPException(422, str(exc)) from exc

    logit_stats = None
    if opts.delta_inputs > 0:
        try:
            inputs = random_inputs(model, opts.delta_inputs, opts.seed, opts.resolution)
            logit_stats = logit_delta(model, result.model, inputs)
        except EvaluationError:
            logit_stats = None  # single-logit or mismatched heads: skip the stat
    report = build_report(
        model,
        result.model,
        resolution=opts.resolution,
        stages=result.snapshots,
        logit_stats=logit_stats,
        merge_plan=result.merge_plan,
        separation_plans=result.separation_plans,
    )
    return CompressResponse(model_b64=encode_model(save_bytes(result.model)), report=report)


@app.post("/verify", response_model=VerifyResponse)
def verify(req: VerifyRequest) -> VerifyResponse:
    a = _load(req.model_a_b64, "model_a")
    b = _load(req.model_b_b64, "model_b")
    try:
        inputs = random_inputs(a, req.inputs, req.seed, req.resolution)
        max_delta = 0.0
        for x in inputs:
            ya = np.asarray(forward(a, x)).ravel()
            yb = np.asarray(forward(b, x)).ravel()
            if ya.shape != yb.shape:
                raise HTTPException(409, f"output dims differ: {ya.shape} vs {yb.shape}")
            max_delta = max(max_delta, float(np.abs(ya - yb).max()))
        delta_mean, gap_mean, gap_std = logit_delta(a, b, inputs)
    except EvaluationError as exc:
        raise HTTPException(422, str(exc)) from exc
    return VerifyResponse(
        max_delta=max_delta,
        mean_delta=delta_mean,
        gap_mean=gap_mean,
        gap_std=gap_std,
        within_tolerance=bool(max_delta <= req.tolerance),
    )


@app.post("/report")
def report(req: ReportRequest) -> dict:
    model = _load(req.model_b64, "model")
    try:
        if req.baseline_b64 is None:
            params = count_params(model)
            flops = count_flops(model, req.resolution)
            return {
                "total": {
                    "params": params["total"],
                    "flops": flops["total"],
                    "elementwise_flops": flops["total_elementwise"],
                },
                "layers": [
                    {"layer": path, "params": n} for path, n in params["layers"].items()
                ],
            }
        baseline = _load(req.baseline_b64, "baseline")
        return build_report(baseline, model, resolution=req.resolution)
    except (RedError, ValueError) as exc:
        raise HTTPException(422, str(exc)) from exc


@app.post("/synth", response_model=SynthResponse)
def synth_model(req: SynthRequest) -> SynthResponse:
    from .. import synth as S

    spec = S.PlantSpec(
        seed=req.seed,
        modes=tuple(req.modes),
        noise=req.noise,
        duplicate_fraction=req.duplicate_fraction,
        separable_fraction=req.separable_fraction,
        weight_modes=req.weight_modes,
        layers=req.layers,
        width=req.width,
        in_features=req.in_features,
        classes=req.classes,
        kernel=req.kernel,
        channels=req.channels,
    )
    truth = None
    try:
        if req.kind == "duplicates":
            model, comps = S.gen_model_with_duplicates(spec)
            truth = {"components": comps}
        elif req.kind == "multimodal":
            model = S.gen_multimodal_model(spec)
        elif req.kind == "separable-conv":
            from ..model import sequential

            model = sequential([S.gen_separable_conv(spec)], name=f"separable-{spec.seed}")
        elif req.kind == "convnet":
            model = S.gen_conv_classifier(spec)
        elif req.kind == "residual":
            model, comps = S.gen_residual_model(spec, blocks=req.residual_blocks)
            truth = {"chain_component": comps}
        elif req.kind == "random":
            model = S.gen_random_model(req.seed)
        else:
            raise HTTPException(400, f"unknown synth kind {req.kind!r}")
    except (RedError, ValueError) as exc:
        raise HTTPException(422, str(exc)) from exc
    return SynthResponse(
        model_b64=encode_model(save_bytes(model)), name=model.name, truth=truth
    )
