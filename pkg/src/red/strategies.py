"""Layer-wise allocation of a global compression level.

The same four schedules are used for the hashing contrast (tau) and the
merge fraction (alpha): per-block thirds, constant, and the two linear
ramps. Results are clamped to [0, 1].
"""

from __future__ import annotations

import numpy as np

STRATEGIES = ("block", "constant", "linear_ascending", "linear_descending")


def allocate_levels(level: float, count: int, strategy: str) -> np.ndarray:
    """Per-layer levels for a global mean `level` over `count` layers.

    block:             max(2a-1, 0) | a | min(2a, 1) over thirds of the net
    constant:          a everywhere
    linear_ascending:  a * l / L        for l = 1..L
    linear_descending: a * (L - l) / L  for l = 1..L
    """
    if count <= 0:
        return np.zeros(0)
    if strategy == "constant":
        out = np.full(count, level, dtype=np.float64)
    elif strategy == "block":
        idx = np.arange(count)
        out = np.where(
            idx < count / 3,
            max(2.0 * level - 1.0, 0.0),
            np.where(idx < 2 * count / 3, level, min(2.0 * level, 1.0)),
        )
    elif strategy == "linear_ascending":
        out = level * np.arange(1, count + 1) / count
    elif strategy == "linear_descending":
        out = level * (count - np.arange(1, count + 1)) / count
    else:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    return np.clip(out, 0.0, 1.0)
