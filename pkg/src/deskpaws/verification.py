"""Numerical checks of the non-collapse guarantees.

A collapsed encoder is built exactly: the last projection layer gets zero
weights and a shared non-zero bias, so every input maps to the same vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from deskpaws import autodiff as ad
from deskpaws import objective, optim
from deskpaws.config import TrainConfig
from deskpaws.data import Dataset, build_dataset
from deskpaws.encoder import EncoderConfig, EncoderParams, embed, encode, init_params
from deskpaws.objective import SupportBatch, similarity_classifier
from deskpaws.support import LabeledPool, smooth_labels

GRAD_THRESHOLD = 1e-8


class PreconditionError(ValueError):
    pass


@dataclass
class CollapseConstruction:
    params: EncoderParams
    anchors: np.ndarray  # n x input_dim
    support_x: np.ndarray  # m x input_dim
    support_labels: np.ndarray  # m x K rows
    tau: float = 0.1

    @property
    def num_classes(self):
        return self.support_labels.shape[1]


def collapsed_encoder(config: EncoderConfig, seed: int) -> EncoderParams:
    params = init_params(config, seed)
    last = (params.trunk + params.projection)[-1]
    last.weight.value[...] = 0.0
    rng = np.random.default_rng([seed, 7])
    last.bias.value[...] = rng.normal(size=last.bias.shape) + 0.5
    return params


def make_collapse(num_classes=4, per_class=2, n_anchors=8, seed=0, counts=None, smoothing=0.0,
                  config: EncoderConfig | None = None, tau=0.1) -> CollapseConstruction:
    """Collapsed encoder, random inputs and a support set with ``per_class``
    hard (or smoothed) labels per class; ``counts`` overrides the per-class
    counts to build an unbalanced support."""
    config = config or EncoderConfig(input_dim=6, hidden_dim=8, trunk_layers=1, proj_hidden=8, proj_layers=2, embed_dim=5)
    params = collapsed_encoder(config, seed)
    rng = np.random.default_rng([seed, 11])
    counts = list(counts) if counts is not None else [per_class] * num_classes
    labels = np.repeat(np.arange(len(counts)), counts)
    support_x = rng.normal(size=(len(labels), config.input_dim))
    anchors = rng.normal(size=(n_anchors, config.input_dim))
    return CollapseConstruction(params, anchors, support_x, smooth_labels(labels, len(counts), smoothing), tau)


def _is_balanced(labels: np.ndarray) -> bool:
    counts = np.bincount(labels.argmax(axis=1), minlength=labels.shape[1])
    present = counts[counts > 0]
    return len(set(present.tolist())) == 1


def predictions(c: CollapseConstruction, normalize: bool = True) -> ad.Node:
    z = encode(c.params, c.anchors)
    zs = encode(c.params, c.support_x)
    return similarity_classifier(z, SupportBatch(zs, c.support_labels), c.tau, normalize=normalize)


def check_uniform_under_collapse(c: CollapseConstruction, tol: float = 1e-12) -> dict:
    """Predictions at collapse are the class-frequency vector of the support;
    under balanced sampling that is exactly uniform."""
    if not _is_balanced(c.support_labels):
        raise PreconditionError("support is not class-balanced; uniformity is only claimed for balanced support")
    p = predictions(c).value
    dev = float(np.abs(p - 1.0 / c.num_classes).max())
    return {"max_deviation": dev, "passed": dev <= tol, "prediction": p[0].copy()}


def collapsed_prediction(c: CollapseConstruction) -> np.ndarray:
    """Prediction rows without the balance precondition (negative control)."""
    return predictions(c).value


def _param_grad_norm(params: EncoderParams, loss: ad.Node) -> float:
    nodes = params.parameters()
    ad.zero_grad(nodes)
    ad.backward(loss)
    norm = math.sqrt(sum(float((p.grad**2).sum()) for p in nodes))
    ad.zero_grad(nodes)
    return norm


def noncollapse_gradient_norm(c: CollapseConstruction, target, normalize: bool = True) -> float:
    """||d H(target, p) / d theta|| at the collapsed configuration.

    With ``normalize=False`` the classifier uses raw dot products instead of
    cosine similarity.
    """
    target = ad.as_matrix(target)
    if target.shape[0] == 1:
        target = np.repeat(target, c.anchors.shape[0], axis=0)
    return _param_grad_norm(c.params, ad.cross_entropy_rows(target, predictions(c, normalize)))


def prediction_gradient_norm(c: CollapseConstruction, target) -> float:
    """||d H(target, p) / d p|| at collapse, p treated as a free variable."""
    target = ad.as_matrix(target)
    if target.shape[0] == 1:
        target = np.repeat(target, c.anchors.shape[0], axis=0)
    p = ad.parameter(predictions(c).value)
    ad.backward(ad.cross_entropy_rows(target, p))
    return float(np.linalg.norm(p.grad))


def check_noncollapse_gradient(c: CollapseConstruction, target, threshold: float = GRAD_THRESHOLD) -> dict:
    """Gradient of the consistency loss at collapse for a non-uniform target.

    A uniform target is the degenerate boundary case: it is reported, not
    asserted.
    """
    target = ad.as_matrix(target)
    uniform = bool(np.allclose(target, 1.0 / target.shape[1], atol=1e-15, rtol=0))
    norm = noncollapse_gradient_norm(c, target)
    return {"grad_norm": norm, "degenerate": uniform, "passed": (not uniform) and norm > threshold}


def prop2_gradient_norm(c: CollapseConstruction, labeled_mask, true_labels) -> float:
    """Consistency gradient norm at collapse, T = 1, with labeled anchors
    taking their label as target (the rest use the positive prediction)."""
    mask = np.asarray(labeled_mask, dtype=bool)
    p = predictions(c)
    targets = objective.semi_supervised_target_override(
        objective.sharpen(p.value, 1.0), true_labels, mask if mask.any() else None
    )
    return _param_grad_norm(c.params, ad.cross_entropy_rows(targets, p))


def check_prop2_path(c: CollapseConstruction, labeled_mask, true_labels, threshold=GRAD_THRESHOLD) -> dict:
    if not np.asarray(labeled_mask, dtype=bool).any():
        raise PreconditionError("at least one labeled anchor is required")
    norm = prop2_gradient_norm(c, labeled_mask, true_labels)
    return {"grad_norm": norm, "labeled": int(np.sum(labeled_mask)), "passed": norm > threshold}


def gradient_scaling(c: CollapseConstruction, target, scales=(1e-1, 1e-2, 1e-3, 1e-4, 0.0), seed=0) -> list[tuple[float, float]]:
    """Gradient norm as the final-layer weights move away from exact collapse
    by ``scale``: shows the norm shrinking linearly to zero."""
    last = (c.params.trunk + c.params.projection)[-1]
    base = np.random.default_rng([seed, 5]).normal(size=last.weight.shape)
    out = []
    for s in scales:
        last.weight.value[...] = s * base
        out.append((s, noncollapse_gradient_norm(c, target)))
    last.weight.value[...] = 0.0
    return out


# ---------------------------------------------------------------------------
# collapse escape


@dataclass
class EscapeReport:
    distances: list[float] = field(default_factory=list)  # raw representations
    cosine_distances: list[float] = field(default_factory=list)  # L2-normalised
    entropies: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    @property
    def growth(self) -> float:
        return self.distances[-1] / self.distances[0]

    def rows(self):
        yield from zip(range(len(self.distances)), self.distances, self.cosine_distances, self.entropies, self.losses)


def mean_pairwise_distance(z: np.ndarray, normalize: bool = False) -> float:
    if normalize:
        z = z / np.maximum(np.linalg.norm(z, axis=1, keepdims=True), ad.NORM_EPS)
    sq = (z * z).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * z @ z.T, 0.0)
    return float(np.sqrt(d2)[np.triu_indices(z.shape[0], 1)].mean())


def escape_config(T=0.25, me_max=True, entropy_min=0.0) -> TrainConfig:
    cfg = TrainConfig()
    cfg.paws.T = T
    cfg.paws.me_max = me_max
    cfg.paws.entropy_min = entropy_min
    cfg.views.num_local = 2
    cfg.optim.start_lr = cfg.optim.peak_lr = 0.5
    return cfg


def run_collapse_escape(config: TrainConfig | None = None, seed=0, steps=100, init_scale=0.1,
                        dataset: Dataset | None = None) -> EscapeReport:
    """Train from a near-collapsed encoder (final projection weights scaled
    to ``init_scale``, shared non-zero bias) and track representation spread
    on a fixed probe batch."""
    cfg = config or escape_config()
    cfg.train.seed = seed
    dataset = dataset if dataset is not None else build_dataset(cfg.data)
    params = collapsed_encoder(cfg.model, seed)
    last = (params.trunk + params.projection)[-1]
    last.weight.value[...] = init_scale * np.random.default_rng([seed, 9]).normal(size=last.weight.shape)

    pool = LabeledPool(dataset.labeled_x, dataset.labeled_y, dataset.num_classes)
    aug = cfg.augment(float(dataset.train_x.std()))
    state = optim.init_state(params, cfg.optim.momentum, cfg.optim.weight_decay)
    probe = dataset.test_x[:128]
    zs_ref = dataset.labeled_x
    ys_ref = smooth_labels(dataset.labeled_y, dataset.num_classes, 0.0)
    report = EscapeReport()
    from deskpaws.train import soft_nn_predict, train_step

    def record(loss):
        z = embed(params, probe)
        report.distances.append(mean_pairwise_distance(z))
        report.cosine_distances.append(mean_pairwise_distance(z, normalize=True))
        p = soft_nn_predict(params, zs_ref, dataset.labeled_y, probe, dataset.num_classes, cfg.paws.tau)
        report.entropies.append(float(objective.entropy(p).mean()))
        report.losses.append(loss)

    record(math.nan)
    for step in range(steps):
        row = train_step(params, state, cfg, dataset, pool, aug, step, cfg.optim.peak_lr, diagnostics=False)
        record(row.loss)
    return report


# ---------------------------------------------------------------------------
# the full table used by the ``verify`` command


def run_all(seed_count: int = 20, escape_steps: int = 100) -> list[tuple[str, bool, str]]:
    """Run every check; returns (name, passed, detail) rows."""
    rows = []
    worst = 0.0
    for K in (2, 4, 8):
        for s in (1, 2, 4):
            worst = max(worst, check_uniform_under_collapse(make_collapse(K, s, seed=K * 10 + s))["max_deviation"])
    rows.append(("uniform predictions at collapse (K in 2,4,8; s in 1,2,4)", worst <= 1e-12, f"max |p - 1/K| = {worst:.2e}"))

    p = collapsed_prediction(make_collapse(2, counts=[3, 1]))[0]
    ok = np.allclose(p, [0.75, 0.25], atol=1e-12)
    rows.append(("unbalanced support breaks uniformity", bool(ok), f"p = [{p[0]:.6f}, {p[1]:.6f}]"))

    norms, pnorms = [], []
    for seed in range(seed_count):
        c = make_collapse(4, 2, seed=seed)
        rng = np.random.default_rng([seed, 13])
        t = objective.sharpen(0.25 + 0.01 * rng.normal(size=(8, 4)).clip(-5, 5), 0.25)
        norms.append(noncollapse_gradient_norm(c, t))
        pnorms.append(prediction_gradient_norm(c, t))
    rows.append((
        "nonzero gradient w.r.t. the prediction p at collapse (report only)",
        True,
        f"min ||dH/dp|| = {min(pnorms):.2e}",
    ))
    rows.append((
        f"nonzero gradient at collapse, sharpened targets ({seed_count} seeds)",
        min(norms) > GRAD_THRESHOLD,
        f"min grad norm = {min(norms):.2e}",
    ))

    c = make_collapse(4, 2, n_anchors=8, seed=0)
    labels = smooth_labels(np.arange(8) % 4, 4, 0.0)
    mask = np.zeros(8, bool)
    mask[0] = True
    r1 = check_prop2_path(c, mask, labels)
    g0 = prop2_gradient_norm(c, np.zeros(8, bool), labels)
    rows.append(("labeled-anchor targets at collapse, T=1", r1["passed"], f"grad norm = {r1['grad_norm']:.2e}"))
    rows.append(("no labeled anchors, T=1: gradient vanishes", g0 < 1e-10, f"grad norm = {g0:.2e}"))

    scaling = gradient_scaling(make_collapse(4, 2, seed=0), np.eye(4)[[0]])
    rows.append((
        "gradient shrinks to zero approaching collapse (cosine similarity)",
        scaling[-1][1] < 1e-10 and all(a[1] > b[1] for a, b in zip(scaling, scaling[1:])),
        ", ".join(f"{s:g}:{g:.1e}" for s, g in scaling),
    ))

    g = noncollapse_gradient_norm(make_collapse(4, 2, seed=0), np.eye(4)[[0]], normalize=False)
    rows.append(("dot-product similarity: nonzero gradient at collapse (report only)", True, f"grad norm = {g:.2e}"))

    rep = run_collapse_escape(escape_config(T=0.25), steps=escape_steps)
    rows.append(("collapse escape with sharpening T=0.25", rep.growth > 10, f"spread x{rep.growth:.1f}"))
    rep = run_collapse_escape(escape_config(T=1.0, me_max=False), steps=escape_steps)
    rows.append(("collapse escape, T=1, no me-max (report only)", True, f"spread x{rep.growth:.1f}"))
    rep = run_collapse_escape(escape_config(T=1.0, me_max=False, entropy_min=1.0), steps=escape_steps)
    rows.append(("collapse escape, T=1, entropy minimization", rep.growth > 10, f"spread x{rep.growth:.1f}"))
    return rows
