"""Pydantic request/response models for the compression service.

Model payloads travel as base64-encoded REDM bytes so any client can
submit and receive checkpoints without sharing a filesystem.
"""

from __future__ import annotations

import base64
from typing import Optional

from pydantic import BaseModel, Field


class PipelineOptions(BaseModel):
    tau: float = Field(0.0, ge=0.0, lt=1.0, description="mean mode-collapse contrast, fraction of each layer's weight range")
    tau_strategy: str = "constant"
    alpha: float = Field(0.0, ge=0.0, lt=1.0, description="mean neuron-merge fraction")
    alpha_strategy: str = "block"
    rel_tol: float = Field(1e-6, gt=0.0, description="rank / proportionality tolerance for separation")
    fold_bn: bool = True
    hash_bias: bool = True
    distance_bias: bool = Field(True, description="include bias entries in merge distance vectors")
    grid_size: int = Field(2048, ge=16)
    seed: int = 0
    stages: list[str] = ["hash", "merge", "separate"]
    order: str = Field("merge-first", description="merge-first or separate-first")
    bandwidth: Optional[float] = Field(None, gt=0.0, description="KDE bandwidth override")
    resolution: tuple[int, int] = (8, 8)
    delta_inputs: int = Field(16, ge=0, description="synthetic inputs for the logit-delta report entry (0 = skip)")


class CompressRequest(BaseModel):
    model_b64: str = Field(description="REDM v1 file, base64")
    options: PipelineOptions = PipelineOptions()


class CompressResponse(BaseModel):
    model_b64: str
    report: dict


class VerifyRequest(BaseModel):
    model_a_b64: str
    model_b_b64: str
    inputs: int = Field(16, ge=1)
    seed: int = 0
    tolerance: float = Field(1e-6, ge=0.0)
    resolution: tuple[int, int] = (8, 8)


class VerifyResponse(BaseModel):
    max_delta: float
    mean_delta: float
    gap_mean: float
    gap_std: float
    within_tolerance: bool


class ReportRequest(BaseModel):
    model_b64: str
    baseline_b64: Optional[str] = None
    resolution: tuple[int, int] = (32, 32)


class SynthRequest(BaseModel):
    kind: str = Field(description="duplicates | multimodal | separable-conv | convnet | residual | random")
    seed: int = 0
    layers: int = 4
    width: int = 16
    in_features: int = 8
    classes: int = 5
    channels: int = 4
    kernel: int = 3
    duplicate_fraction: float = Field(0.5, ge=0.0, le=1.0)
    separable_fraction: float = Field(1.0, ge=0.0, le=1.0)
    weight_modes: int = Field(16, ge=0)
    modes: list[float] = [-1.0, 1.0]
    noise: float = Field(0.0, ge=0.0)
    residual_blocks: int = 1


class SynthResponse(BaseModel):
    model_b64: str
    name: str
    truth: Optional[dict] = None


def encode_model(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def decode_model(b64: str) -> bytes:
    return base64.b64decode(b64.encode("ascii"), validate=True)
