"""The PAWS loss: soft nearest-neighbour pseudo-labels, target sharpening,
mean-entropy maximisation and the two-view / multi-crop objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from deskpaws import autodiff as ad
from deskpaws import kernels
from deskpaws.autodiff import LOG_FLOOR, DomainError, Node, ShapeError
from deskpaws.encoder import ConfigError

ME_MAX_VARIANTS = ("differentiable", "detached")


@dataclass
class SupportBatch:
    z: Node
    labels: np.ndarray  # m x K, rows sum to 1

    def __post_init__(self):
        self.labels = ad.as_matrix(self.labels)
        if self.z.shape[0] != self.labels.shape[0]:
            raise ShapeError(f"support has {self.z.shape[0]} representations but {self.labels.shape[0]} labels")
        sums = self.labels.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("support label rows must sum to 1")

    @property
    def num_classes(self) -> int:
        return self.labels.shape[1]


@dataclass
class LossBreakdown:
    total: Node
    consistency: float
    me_max: float
    p_bar: np.ndarray
    extra: float = 0.0


def similarity_classifier(z: Node, support: SupportBatch, tau: float, normalize: bool = True) -> Node:
    """p = softmax_tau(z_hat @ z_S_hat^T) @ y_S with rows L2-normalised.

    Differentiable with respect to both ``z`` and the support representations.
    ``normalize=False`` uses raw dot products (analysis only).
    """
    if not tau > 0:
        raise DomainError(f"cosine temperature must be positive, got {tau}")
    if support.z.shape[0] == 0:
        raise ConfigError("empty support set")
    if z.shape[1] != support.z.shape[1]:
        raise ShapeError(f"embedding dims differ: queries {z.shape}, support {support.z.shape}")
    zn = ad.row_l2_normalize(z) if normalize else z
    sn = ad.row_l2_normalize(support.z) if normalize else support.z
    weights = ad.softmax_rows(ad.matmul(zn, ad.transpose(sn)), tau)
    return ad.matmul(weights, support.labels)


def sharpen(p, temperature: float) -> np.ndarray:
    """Constant sharpened targets: p**(1/T) renormalised per row."""
    if not temperature > 0:
        raise DomainError(f"sharpening temperature must be positive, got {temperature}")
    p = ad.as_matrix(p.value if isinstance(p, Node) else p)
    if np.any(p.sum(axis=1) <= 0):
        raise ValueError("cannot sharpen an all-zero row")
    return kernels.sharpen_rows(p, temperature, LOG_FLOOR)


def entropy(p: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy (natural log), for constant arrays."""
    p = np.atleast_2d(p)
    return -(p * np.log(np.maximum(p, LOG_FLOOR))).sum(axis=1)


def me_max_regularizer(p_nodes: Sequence[Node], temperature: float, variant: str = "differentiable") -> Node:
    """H(p_bar) as a graph node, p_bar the mean prediction over all views.

    ``differentiable`` sharpens each live prediction with a differentiable
    op before averaging; ``detached`` averages the unsharpened predictions.
    """
    if not p_nodes:
        raise ConfigError("me-max needs at least one prediction batch")
    if variant not in ME_MAX_VARIANTS:
        raise ConfigError(f"unknown me-max variant {variant!r}")
    stacked = ad.concat_rows(list(p_nodes)) if len(p_nodes) > 1 else p_nodes[0]
    if variant == "differentiable":
        stacked = ad.sharpen_rows(stacked, temperature)
    return ad.entropy_rows(ad.mean_rows(stacked))


def _check_same_shape(nodes):
    shapes = {n.shape for n in nodes}
    if len(shapes) != 1:
        raise ShapeError(f"prediction batches differ in shape: {sorted(shapes)}")


def paws_loss_multicrop(
    p_global: Sequence[Node],
    p_local: Sequence[Node],
    temperature: float,
    enable_me_max: bool = True,
    me_max_variant: str = "differentiable",
    target_probs: Sequence[np.ndarray] | None = None,
    labeled_targets: np.ndarray | None = None,
    labeled_mask: np.ndarray | None = None,
    entropy_weight: float = 0.0,
) -> LossBreakdown:
    """Multi-crop PAWS objective for exactly two global views.

    Global view 1 is trained toward the sharpened prediction of view 2 and
    vice versa; every local view is trained toward the average of the two
    sharpened global predictions. The consistency sum is divided by the
    number of views. ``target_probs`` overrides the unsharpened global
    predictions used to build targets (prediction-head setting).
    """
    if len(p_global) != 2:
        raise ConfigError(f"the multi-crop objective needs exactly 2 global views, got {len(p_global)}")
    views = list(p_global) + list(p_local)
    _check_same_shape(views)
    src = target_probs if target_probs is not None else [p.value for p in p_global]
    t1, t2 = sharpen(src[0], temperature), sharpen(src[1], temperature)
    if labeled_mask is not None:
        t1 = semi_supervised_target_override(t1, labeled_targets, labeled_mask)
        t2 = semi_supervised_target_override(t2, labeled_targets, labeled_mask)
    t_local = 0.5 * (t1 + t2)

    terms = [ad.cross_entropy_rows(t2, p_global[0]), ad.cross_entropy_rows(t1, p_global[1])]
    terms += [ad.cross_entropy_rows(t_local, p) for p in p_local]
    consistency = terms[0]
    for t in terms[1:]:
        consistency = ad.add(consistency, t)
    consistency = ad.scale(consistency, 1.0 / len(views))
    total = consistency

    if enable_me_max:
        reg = me_max_regularizer(views, temperature, me_max_variant)
        total = ad.sub(total, reg)
        me_max_value = float(reg.value[0, 0])
    else:
        me_max_value = 0.0

    extra = 0.0
    if entropy_weight > 0:
        ent = entropy_minimization_term(views, entropy_weight)
        total = ad.add(total, ent)
        extra = float(ent.value[0, 0])

    p_bar = np.concatenate([sharpen(p, temperature) for p in views]).mean(axis=0, keepdims=True)
    return LossBreakdown(total, float(consistency.value[0, 0]), me_max_value, p_bar, extra)


def paws_loss_two_view(
    p_anchor: Node,
    p_positive: Node,
    temperature: float,
    enable_me_max: bool = True,
    **kwargs,
) -> LossBreakdown:
    """(1/2n) sum_i [H(rho(p+_i), p_i) + H(rho(p_i), p+_i)] - H(p_bar)."""
    if p_anchor.shape != p_positive.shape:
        raise ShapeError(f"anchor {p_anchor.shape} vs positive {p_positive.shape}")
    return paws_loss_multicrop([p_anchor, p_positive], [], temperature, enable_me_max, **kwargs)


def semi_supervised_target_override(targets, labels, labeled_mask) -> np.ndarray:
    """Replace targets of labeled anchors with their (smoothed) label rows."""
    targets = ad.as_matrix(targets)
    if labeled_mask is None:
        return targets.copy()
    mask = np.asarray(labeled_mask, dtype=bool).reshape(-1)
    labels = ad.as_matrix(labels)
    if mask.shape[0] != targets.shape[0] or labels.shape != targets.shape:
        raise ShapeError(
            f"labels {labels.shape} / mask {mask.shape} do not match targets {targets.shape}"
        )
    out = targets.copy()
    out[mask] = labels[mask]
    return out


def entropy_minimization_term(p_nodes, weight: float) -> Node:
    """weight * mean row entropy of the predictions (all views pooled)."""
    if weight < 0:
        raise DomainError("entropy-minimization weight must be non-negative")
    if isinstance(p_nodes, Node):
        p_nodes = [p_nodes]
    stacked = ad.concat_rows(list(p_nodes)) if len(p_nodes) > 1 else p_nodes[0]
    return ad.scale(ad.entropy_rows(stacked), weight)
