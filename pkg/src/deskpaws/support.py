"""Class-balanced support sampling and smoothed label encoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from deskpaws.autodiff import DomainError, as_matrix
from deskpaws.encoder import ConfigError


@dataclass
class LabeledPool:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_indices: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.labels.shape[0] != self.inputs.shape[0]:
            raise ValueError("labels and inputs differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"class ids must lie in [0, {self.num_classes})")
        self.class_indices = [np.flatnonzero(self.labels == c) for c in range(self.num_classes)]

    def __len__(self):
        return self.labels.shape[0]


@dataclass
class SupportDraw:
    indices: np.ndarray
    classes: np.ndarray
    images_per_class: int


def sample_support(pool: LabeledPool, classes_per_batch: int, images_per_class: int, rng) -> SupportDraw:
    """Pick C classes uniformly without replacement, then s distinct samples of
    each. Draws are independent, so samples recur across calls."""
    if images_per_class < 1:
        raise ConfigError("images_per_class must be at least 1")
    eligible = [c for c in range(pool.num_classes) if len(pool.class_indices[c]) >= images_per_class]
    if classes_per_batch > len(eligible):
        short = [c for c in range(pool.num_classes) if c not in eligible]
        raise ConfigError(
            f"need {classes_per_batch} classes with >= {images_per_class} samples; "
            f"classes {short} have too few"
        )
    if classes_per_batch == pool.num_classes:
        classes = np.arange(pool.num_classes)
    else:
        classes = np.sort(rng.choice(eligible, size=classes_per_batch, replace=False))
    picks = [rng.choice(pool.class_indices[c], size=images_per_class, replace=False) for c in classes]
    return SupportDraw(np.concatenate(picks), classes, images_per_class)


def smooth_labels(labels, num_classes: int, smoothing: float) -> np.ndarray:
    """One-hot rows with 1 - eps + eps/K on the true class, eps/K elsewhere."""
    if not 0 <= smoothing < 1:
        raise DomainError(f"label smoothing must be in [0, 1), got {smoothing}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    out = np.full((labels.shape[0], num_classes), smoothing / num_classes)
    out[np.arange(labels.shape[0]), labels] = 1.0 - smoothing + smoothing / num_classes
    return out


def encode_labels(draw: SupportDraw, pool: LabeledPool, smoothing: float = 0.1) -> np.ndarray:
    return smooth_labels(pool.labels[draw.indices], pool.num_classes, smoothing)


def support_views(pool: LabeledPool, draw: SupportDraw, augment, views_per_support: int = 1, rng=None):
    """Stack ``views_per_support`` augmented copies of the drawn inputs.

    ``augment(x, rng)`` returns one augmented copy of ``x``. Returns the
    stacked inputs and the matching class ids (copies are laid out view-major).
    """
    if views_per_support < 1:
        raise ConfigError("views_per_support must be at least 1")
    x = pool.inputs[draw.indices]
    inputs = np.concatenate([augment(x, rng) for _ in range(views_per_support)], axis=0)
    labels = np.tile(pool.labels[draw.indices], views_per_support)
    return inputs, labels
