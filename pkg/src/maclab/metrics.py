"""Per-episode goodput series scoring: resilience against a target level and
its average over a whole range of target levels.

Resilience of a series {G_n} against a target g is the episode mean of
min(G_n/g, 1): full credit for any episode meeting the target, proportional
credit below it. When no single target is meaningful (after an environmental
shift the attainable goodput is unknown), the target-averaged variant takes
the mean of that number over an evenly spaced grid of candidate targets.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TargetGrid", "resilience", "meta_resilience", "resilience_curve"]


@dataclass(frozen=True)
class TargetGrid:
    """Evenly spaced candidate target-goodput levels."""

    g_min: float = 0.01
    g_max: float = 1.0
    count: int = 100

    def __post_init__(self):
        if not 0 < self.g_min <= self.g_max:
            raise ValueError("need 0 < g_min <= g_max")
        if self.count < 2:
            raise ValueError("grid needs at least 2 points")

    def points(self) -> np.ndarray:
        return np.linspace(self.g_min, self.g_max, self.count)


def _as_series(series) -> np.ndarray:
    arr = np.asarray(series, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("goodput series must be a non-empty 1-D sequence")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError("goodput values must lie in [0, 1]")
    return arr


def resilience(series, target: float) -> float:
    """Mean over episodes of min(G_n/target, 1)."""
    arr = _as_series(series)
    if target <= 0:
        raise ValueError("target goodput must be > 0")
    return float(np.minimum(arr / target, 1.0).mean())


def meta_resilience(series, grid: TargetGrid | None = None) -> float:
    """Mean resilience over the candidate-target grid."""
    if grid is None:
        grid = TargetGrid()
    arr = _as_series(series)
    targets = grid.points()
    per_target = np.minimum(arr[None, :] / targets[:, None], 1.0).mean(axis=1)
    return float(per_target.mean())


def resilience_curve(series, grid: TargetGrid | None = None) -> list:
    """(target, resilience) pairs across the grid; non-increasing in target."""
    if grid is None:
        grid = TargetGrid()
    return [(float(g), resilience(series, float(g))) for g in grid.points()]
