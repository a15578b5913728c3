"""Synthetic classification tasks for meta-training, and the two-moons toy set."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, zscore


@dataclass
class PriorConfig:
    """Ranges are inclusive ``[min, max]``."""

    n_range: tuple = (24, 200)
    d_range: tuple = (1, 10)
    C_range: tuple = (2, 5)
    hidden_widths: list = field(default_factory=lambda: [16, 16])
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.n_range = tuple(int(v) for v in self.n_range)
        self.d_range = tuple(int(v) for v in self.d_range)
        self.C_range = tuple(int(v) for v in self.C_range)
        self.hidden_widths = [int(v) for v in self.hidden_widths]
        for name in ("n_range", "d_range", "C_range"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ValueError(f"{name} must be a non-empty positive range, got {(lo, hi)}")
        if self.C_range[0] < 2:
            raise ValueError("tasks need at least 2 classes")
        if self.n_range[0] < self.C_range[1]:
            raise ValueError("n_range minimum must be at least the largest class count")
        if len(self.hidden_widths) != 2 or min(self.hidden_widths) < 1:
            raise ValueError("hidden_widths must hold two positive widths")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("n_range", "d_range", "C_range"):
            d[k] = list(d[k])
        return d


def _draw(rng: np.random.Generator, bounds: tuple) -> int:
    return int(rng.integers(bounds[0], bounds[1] + 1))


def random_network_scores(X: np.ndarray, widths, rng: np.random.Generator) -> np.ndarray:
    """Scalar output of a random two-hidden-layer tanh network (weights ~ N(0, 1/fan_in))."""
    h = X
    for width in widths:
        fan_in = h.shape[1]
        W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, width))
        b = rng.normal(0.0, 1.0, width)
        h = np.tanh(h @ W + b)
    w_out = rng.normal(0.0, 1.0 / np.sqrt(h.shape[1]), h.shape[1])
    return h @ w_out


def quantile_bins(scores: np.ndarray, num_classes: int) -> np.ndarray:
    """Rank-based binning into ``num_classes`` groups whose sizes differ by at most one."""
    n = scores.shape[0]
    ranks = np.empty(n, dtype=np.int64)
    ranks[np.argsort(scores, kind="stable")] = np.arange(n)
    return ranks * num_classes // n


def sample_task(config: PriorConfig, rng: np.random.Generator, n: int | None = None) -> Dataset:
    """One z-scored task; ``n`` overrides the sampled row count."""
    n_rows = _draw(rng, config.n_range)
    d = _draw(rng, config.d_range)
    C = _draw(rng, config.C_range)
    if n is not None:
        n_rows = int(n)
    X = rng.normal(size=(n_rows, d))
    scores = random_network_scores(X, config.hidden_widths, rng)
    scores = scores + config.noise_std * rng.normal(size=n_rows)
    relabel = rng.permutation(C)
    y = relabel[quantile_bins(scores, C)]
    return zscore(Dataset(X, y, C))


def two_moons_geometry(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free interleaving half circles, ``n // 2`` points each, unshuffled."""
    if n % 2:
        raise ValueError(f"two moons needs an even number of points, got {n}")
    half = n // 2
    t = np.linspace(0.0, np.pi, half)
    outer = np.stack([np.cos(t), np.sin(t)], axis=1)
    inner = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    X = np.concatenate([outer, inner])
    y = np.repeat([0, 1], half)
    return X, y


def sample_two_moons(n: int, noise: float, rng: np.random.Generator) -> Dataset:
    if noise < 0:
        raise ValueError("noise must be >= 0")
    X, y = two_moons_geometry(n)
    X = X + noise * rng.normal(size=X.shape)
    perm = rng.permutation(n)
    return zscore(Dataset(X[perm], y[perm], 2))
