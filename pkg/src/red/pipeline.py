"""Stage orchestration: hash, then merge and separate (in either order).

Batchnorm folding, when enabled and a merge is requested, runs before
hashing so the densities reflect the effective weights. Merging and
separation commute: the pipeline exposes the order as a switch and both
orders land on the same compressed model.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .hashing import HashConfig, hash_model
from .merging import MergeConfig, MergePlan, fold_batchnorm, merge_model
from .model import BATCHNORM, Model
from .separation import separate_model

STAGES = ("hash", "merge", "separate")
ORDERS = ("merge-first", "separate-first")


@dataclass
class PipelineConfig:
    tau: float = 0.0  # fraction of each layer's weight range
    tau_strategy: str = "constant"
    alpha: float = 0.0
    alpha_strategy: str = "block"
    rel_tol: float = 1e-6
    fold_bn: bool = True
    hash_bias: bool = True
    distance_bias: bool = True  # include bias in merge distance vectors
    grid_size: int = 2048
    seed: int = 0
    stages: tuple = STAGES
    order: str = "merge-first"
    bandwidth: Optional[float] = None  # KDE bandwidth override

    def hash_config(self) -> HashConfig:
        return HashConfig(
            tau=self.tau,
            tau_strategy=self.tau_strategy,
            grid_size=self.grid_size,
            bandwidth=self.bandwidth,
            hash_bias=self.hash_bias,
        )

    def merge_config(self) -> MergeConfig:
        # folding already happened at the pipeline level
        return MergeConfig(
            alpha=self.alpha,
            alpha_strategy=self.alpha_strategy,
            fold_bn=False,
            distance_bias=self.distance_bias,
        )


@dataclass
class PipelineResult:
    model: Model
    snapshots: dict = field(default_factory=dict)  # stage name -> model
    merge_plan: Optional[MergePlan] = None
    separation_plans: list = field(default_factory=list)


def run_pipeline(model: Model, cfg: Optional[PipelineConfig] = None) -> PipelineResult:
    """Run the configured stages and return the compressed model plus the
    per-stage snapshots and plans."""
    cfg = cfg or PipelineConfig()
    bad = [s for s in cfg.stages if s not in STAGES]
    if bad:
        raise ValueError(f"unknown stages {bad}; valid: {STAGES}")
    if cfg.order not in ORDERS:
        raise ValueError(f"unknown order {cfg.order!r}; valid: {ORDERS}")

    result = PipelineResult(model)
    current = model

    has_bn = any(l.kind == BATCHNORM for _, l in current.iter_layers())
    if cfg.fold_bn and has_bn and "merge" in cfg.stages:
        current = fold_batchnorm(current)
        result.snapshots["fold_bn"] = current

    if "hash" in cfg.stages:
        current = hash_model(current, cfg.hash_config())
        result.snapshots["hash"] = current

    order = ("merge", "separate") if cfg.order == "merge-first" else ("separate", "merge")
    for stage in order:
        if stage not in cfg.stages:
            continue
        if stage == "merge":
            current, plan = merge_model(current, cfg.merge_config(), rel_tol=cfg.rel_tol)
            result.merge_plan = plan
        else:
            current, plans = separate_model(current, cfg.rel_tol)
            result.separation_plans = plans
        result.snapshots[stage] = current

    result.model = current
    return result
