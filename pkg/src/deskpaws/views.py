"""Stochastic global/local view generation for flat feature vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from deskpaws.autodiff import DomainError, as_matrix
from deskpaws.encoder import ConfigError


@dataclass
class AugmentConfig:
    noise_sigma: float = 0.1
    scale_low: float = 0.9
    scale_high: float = 1.1
    mask_fraction_local: float = 0.5

    def validate(self):
        if self.noise_sigma < 0:
            raise DomainError("noise_sigma must be non-negative")
        if not 0 < self.scale_low <= self.scale_high:
            raise DomainError(f"need 0 < scale_low <= scale_high, got ({self.scale_low}, {self.scale_high})")
        if not 0 <= self.mask_fraction_local < 1:
            raise DomainError("mask_fraction_local must be in [0, 1)")


@dataclass
class ViewBatch:
    global_views: list[np.ndarray]
    local_views: list[np.ndarray]
    source_indices: np.ndarray

    @property
    def num_views(self):
        return len(self.global_views) + len(self.local_views)


def global_view(x, cfg: AugmentConfig, rng) -> np.ndarray:
    n = x.shape[0]
    s = rng.uniform(cfg.scale_low, cfg.scale_high, size=(n, 1))
    out = x * s
    if cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, size=x.shape)
    return out


def local_view(x, cfg: AugmentConfig, rng) -> np.ndarray:
    out = global_view(x, cfg, rng)
    n, d = x.shape
    k = int(round(cfg.mask_fraction_local * d))
    if k:
        # k distinct coordinates per row: argsort of uniform keys
        cols = np.argsort(rng.random((n, d)), axis=1)[:, :k]
        out[np.arange(n)[:, None], cols] = 0.0
    return out


def generate_views(x, cfg: AugmentConfig, num_global: int = 2, num_local: int = 6, rng=None, source_indices=None) -> ViewBatch:
    """Global views: per-row random scale plus Gaussian noise. Local views:
    the same perturbation, then a random subset of coordinates zeroed."""
    cfg.validate()
    if num_global < 2:
        raise ConfigError("at least two global views are needed")
    if num_local < 0:
        raise ConfigError("num_local must be non-negative")
    x = as_matrix(x)
    rng = rng if rng is not None else np.random.default_rng()
    g = [global_view(x, cfg, rng) for _ in range(num_global)]
    loc = [local_view(x, cfg, rng) for _ in range(num_local)]
    idx = np.arange(x.shape[0]) if source_indices is None else np.asarray(source_indices)
    return ViewBatch(g, loc, idx)


def pair_structure(batch: ViewBatch) -> dict[int, list[int]]:
    """Map each view index to the view indices whose predictions form its
    target. Globals are 0 and 1; locals follow. Locals are never targets."""
    if len(batch.global_views) != 2:
        raise ConfigError("positive-pair structure is defined for exactly 2 global views")
    pairs = {0: [1], 1: [0]}
    for k in range(len(batch.local_views)):
        pairs[2 + k] = [0, 1]
    return pairs
