"""Data-free structured network compression.

Three stages: adaptive scalar weight hashing (KDE modes), similarity-based
neuron merging with consumer rewiring, and uneven depthwise separation of
convolutions. Ships with a bit-exact model format (REDM v1), an exact
forward evaluator for equivalence checks, pruning/FLOPs/footprint
reporting, seeded synthetic model generators, a FastAPI service, and a
CLI (`red`) that fronts the service.
"""

__version__ = "0.1.0"

from .model import Model, Layer, Block, validate_model  # noqa: F401
from .redm import load_model, save_model  # noqa: F401
from .pipeline import PipelineConfig, run_pipeline  # noqa: F401
