"""Decision-boundary grids for two-feature problems."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .data import Dataset
from .model import PfnModel, predict_proba


def grid_points(bounds: Sequence[float], resolution: Union[int, Sequence[int]]) -> np.ndarray:
    """Regular lattice over ``(x1_min, x1_max, x2_min, x2_max)``; x2 varies fastest."""
    x1_min, x1_max, x2_min, x2_max = (float(b) for b in bounds)
    r1, r2 = (resolution, resolution) if np.isscalar(resolution) else resolution
    if r1 < 2 or r2 < 2:
        raise ValueError("resolution must be at least 2 per axis")
    g1 = np.linspace(x1_min, x1_max, int(r1))
    g2 = np.linspace(x2_min, x2_max, int(r2))
    a, b = np.meshgrid(g1, g2, indexing="ij")
    return np.stack([a.reshape(-1), b.reshape(-1)], axis=1)


def boundary_grid(
    model: PfnModel,
    context: Dataset,
    bounds: Sequence[float],
    resolution: Union[int, Sequence[int]] = 100,
) -> np.ndarray:
    """Rows ``(x1, x2, p_0, ..., p_{C-1})`` of predicted probabilities on a grid."""
    if context.d != 2:
        raise ValueError(f"boundary grids need exactly 2 features, got {context.d}")
    pts = grid_points(bounds, resolution)
    return np.concatenate([pts, predict_proba(model, context, pts)], axis=1)


def write_grid_csv(grid: np.ndarray, path) -> None:
    C = grid.shape[1] - 2
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x1", "x2"] + [f"p_class{k}" for k in range(C)])
        for row in grid:
            w.writerow([repr(float(v)) for v in row])


def padded_bounds(X: np.ndarray, margin: float = 0.5) -> tuple:
    lo, hi = X.min(axis=0) - margin, X.max(axis=0) + margin
    return (float(lo[0]), float(hi[0]), float(lo[1]), float(hi[1]))
