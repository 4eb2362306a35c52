"""PAWS pre-training loop, soft-NN evaluation, linear fine-tuning and the
reporting-only diagnostic losses."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from deskpaws import autodiff as ad
from deskpaws import kernels, objective, optim
from deskpaws.config import TrainConfig, dump_config
from deskpaws.data import Dataset, build_dataset
from deskpaws.encoder import (
    ConfigError,
    EncoderParams,
    embed,
    encode,
    first_projection_features,
    init_params,
    load_checkpoint,
    predict_head,
    save_checkpoint,
)
from deskpaws.objective import SupportBatch, similarity_classifier
from deskpaws.support import LabeledPool, sample_support, smooth_labels, support_views
from deskpaws.views import generate_views, global_view

log = logging.getLogger(__name__)

METRIC_FIELDS = [
    "epoch",
    "step",
    "lr",
    "loss",
    "paws_consistency",
    "me_max_entropy",
    "instance_discrimination_loss",
    "support_classification_loss",
    "mean_target_confidence",
    "nn_accuracy",
]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MetricsRow:
    epoch: int
    step: int
    lr: float
    loss: float
    paws_consistency: float
    me_max_entropy: float
    instance_discrimination_loss: float = math.nan
    support_classification_loss: float = math.nan
    mean_target_confidence: float = math.nan
    nn_accuracy: float = math.nan

    def as_csv(self) -> list[str]:
        out = []
        for name in METRIC_FIELDS:
            v = getattr(self, name)
            if isinstance(v, float):
                out.append("" if math.isnan(v) else f"{v:.17g}")
            else:
                out.append(str(v))
        return out


@dataclass
class TrainResult:
    params: EncoderParams
    state: optim.OptimizerState
    metrics: list[MetricsRow] = field(default_factory=list)
    dataset: Dataset | None = None


# ---------------------------------------------------------------------------
# diagnostics (never differentiated)


def _normalize(z):
    return kernels.l2_normalize_rows(np.ascontiguousarray(z, dtype=np.float64), ad.NORM_EPS)


def _logsumexp(a, axis=1):
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def nt_xent(z1, z2, tau: float) -> float:
    """Instance-discrimination loss over two views: each row's positive is the
    other view of the same sample, every other row is a negative."""
    n = z1.shape[0]
    z = _normalize(np.concatenate([z1, z2]))
    sim = z @ z.T / tau
    np.fill_diagonal(sim, -np.inf)
    pos = np.concatenate([np.arange(n, 2 * n), np.arange(n)])
    return float(np.mean(_logsumexp(sim) - sim[np.arange(2 * n), pos]))


def supervised_nce(z, labels, tau: float) -> float:
    """-log(sum over same-class others / sum over all others), averaged over
    rows that have at least one same-class partner."""
    z = _normalize(z)
    labels = np.asarray(labels)
    sim = z @ z.T / tau
    np.fill_diagonal(sim, -np.inf)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    keep = same.any(axis=1)
    if not keep.any():
        return math.nan
    pos = np.where(same, sim, -np.inf)
    return float(np.mean((_logsumexp(sim) - _logsumexp(pos))[keep]))


# ---------------------------------------------------------------------------
# evaluation


def soft_nn_predict(params: EncoderParams, support_x, support_y, query_x, num_classes, tau) -> np.ndarray:
    """Class probabilities of the similarity classifier for ``query_x`` with
    the (un-augmented, one-hot) labeled pool as support."""
    zs = _normalize(embed(params, support_x))
    zq = _normalize(embed(params, query_x))
    w = kernels.softmax_rows(np.ascontiguousarray(zq @ zs.T), tau)
    return w @ smooth_labels(support_y, num_classes, 0.0)


def eval_nn(params: EncoderParams, support_x, support_y, test_x, test_y, num_classes, tau=0.1) -> float:
    """Arg-max accuracy of the soft nearest-neighbour classifier (ties go to
    the lowest class index)."""
    p = soft_nn_predict(params, support_x, support_y, test_x, num_classes, tau)
    return float(np.mean(np.argmax(p, axis=1) == np.asarray(test_y)))


# ---------------------------------------------------------------------------
# training


def _schedule(config: TrainConfig, steps_per_epoch: int) -> optim.LrSchedule:
    o = config.optim
    total = o.epochs * steps_per_epoch
    return optim.LrSchedule(o.start_lr, o.peak_lr, o.final_lr, int(round(o.warmup_fraction * total)), total)


def steps_per_epoch(config: TrainConfig, dataset: Dataset) -> int:
    n = config.optim.batch_size
    if n > len(dataset.train_y):
        raise ConfigError("batch size exceeds the number of training samples")
    return len(dataset.train_y) // n


def train_step(params, state, config, dataset, pool, aug, step, lr, diagnostics=True):
    """One PAWS optimisation step. Returns the metrics for the step."""
    cfg_p, cfg_v = config.paws, config.views
    rng = np.random.default_rng([config.train.seed, step])
    n, K = config.optim.batch_size, dataset.num_classes
    idx = rng.choice(len(dataset.train_y), size=n, replace=False)
    vb = generate_views(dataset.train_x[idx], aug, cfg_v.num_global, cfg_v.num_local, rng, idx)
    draw = sample_support(pool, config.support.classes, config.support.per_class, rng)
    sx, sy = support_views(pool, draw, lambda x, r: global_view(x, aug, r), config.support.views, rng)
    ys = smooth_labels(sy, K, cfg_p.smoothing)

    views = vb.global_views + vb.local_views
    V = len(views)
    head = params.has_prediction_head
    with ad.Tape() as tape:
        z_all = encode(params, np.concatenate(views + [sx]))
        z_views = ad.slice_rows(z_all, 0, V * n)
        z_sup = ad.slice_rows(z_all, V * n, z_all.shape[0])
        if head:
            p_all = similarity_classifier(
                predict_head(params, z_views), SupportBatch(predict_head(params, z_sup), ys), cfg_p.tau
            )
            # targets come from the representations before the prediction head
            zv = _normalize(z_views.value[: 2 * n])
            w = kernels.softmax_rows(np.ascontiguousarray(zv @ _normalize(z_sup.value).T), cfg_p.tau)
            tp = w @ ys
            target_probs = [tp[:n], tp[n:]]
        else:
            p_all = similarity_classifier(z_views, SupportBatch(z_sup, ys), cfg_p.tau)
            target_probs = None
        p_views = [ad.slice_rows(p_all, k * n, (k + 1) * n) for k in range(V)]

        mask = labeled_targets = None
        if cfg_p.prop2_targets:
            is_labeled = np.isin(idx, dataset.labeled_idx)
            if is_labeled.any():
                mask = is_labeled
                labeled_targets = smooth_labels(dataset.train_y[idx], K, cfg_p.smoothing)

        out = objective.paws_loss_multicrop(
            p_views[:2],
            p_views[2:],
            cfg_p.T,
            enable_me_max=cfg_p.me_max,
            me_max_variant=cfg_p.me_max_variant,
            target_probs=target_probs,
            labeled_targets=labeled_targets,
            labeled_mask=mask,
            entropy_weight=cfg_p.entropy_min,
        )
        loss = float(out.total.value[0, 0])
        nodes = params.parameters()
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step} (lr={lr})")
        ad.backward(out.total, tape)

    grads = [p.grad for p in nodes]
    norms = [float(np.linalg.norm(g)) for g in grads]
    if not all(math.isfinite(v) for v in norms):
        raise TrainingDiverged(f"non-finite gradient at step {step} (lr={lr}); grad norms {norms}")
    optim.step(nodes, grads, state, lr)
    ad.zero_grad(nodes)

    src = target_probs if target_probs is not None else [p.value for p in p_views[:2]]
    targets = np.concatenate([objective.sharpen(s, cfg_p.T) for s in src])
    row = MetricsRow(
        epoch=0,
        step=step,
        lr=lr,
        loss=loss,
        paws_consistency=out.consistency,
        me_max_entropy=float(objective.entropy(out.p_bar)[0]),
        mean_target_confidence=float(targets.max(axis=1).mean()),
    )
    if diagnostics:
        row.instance_discrimination_loss = nt_xent(z_views.value[:n], z_views.value[n : 2 * n], cfg_p.tau)
        row.support_classification_loss = supervised_nce(z_sup.value, sy, cfg_p.tau)
    return row


def train(
    config: TrainConfig,
    out_dir=None,
    resume=None,
    params: EncoderParams | None = None,
    dataset: Dataset | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Run PAWS pre-training.

    ``resume`` is a checkpoint path or :class:`Checkpoint` holding optimizer
    state; training continues at its stored step. Every step draws its
    randomness from ``(train.seed, step)``, so a resumed run replays the same
    batches as an uninterrupted one.
    """
    config.validate()
    dataset = dataset if dataset is not None else build_dataset(config.data)
    pool = LabeledPool(dataset.labeled_x, dataset.labeled_y, dataset.num_classes)
    spe = steps_per_epoch(config, dataset)
    schedule = _schedule(config, spe)
    aug = config.augment(float(dataset.train_x.std()))

    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume) if not hasattr(resume, "params") else resume
        if ckpt.velocity is None:
            raise ConfigError("checkpoint has no optimizer state to resume from")
        params = ckpt.params
        state = optim.init_state(params, config.optim.momentum, config.optim.weight_decay)
        state.velocity = [v.copy() for v in ckpt.velocity]
        state.step_count = start = ckpt.step
    else:
        if params is None:
            params = init_params(config.model, config.train.seed)
        state = optim.init_state(params, config.optim.momentum, config.optim.weight_decay)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(dump_config(config))

    result = TrainResult(params, state, [], dataset)
    last_epoch = config.optim.epochs if stop_after_epoch is None else min(stop_after_epoch, config.optim.epochs)
    total = last_epoch * spe
    for step in range(start, total):
        epoch = step // spe + 1
        lr = optim.lr_at(schedule, step)
        try:
            row = train_step(params, state, config, dataset, pool, aug, step, lr, config.train.diagnostics)
        except TrainingDiverged:
            if out is not None:
                _dump_params(out / "diverged.paws", params, state, step, epoch)
            raise
        row.epoch = epoch
        end_of_epoch = (step + 1) % spe == 0
        every = config.train.eval_every
        if end_of_epoch and ((every and epoch % every == 0) or epoch == config.optim.epochs):
            row.nn_accuracy = eval_nn(
                params, dataset.labeled_x, dataset.labeled_y, dataset.test_x, dataset.test_y,
                dataset.num_classes, config.paws.tau,
            )
        result.metrics.append(row)
        if end_of_epoch and out is not None and config.train.checkpoint_every and epoch % config.train.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_epoch{epoch:04d}.paws", params, state.velocity, step + 1, epoch)

    if out is not None:
        final_epoch = total // spe if spe else 0
        save_checkpoint(out / "checkpoint.paws", params, state.velocity, total, final_epoch)
        write_metrics(out / "metrics.csv", result.metrics, append=resume is not None)
    return result


def _dump_params(path, params, state, step, epoch):
    save_checkpoint(path, params, state.velocity, step, epoch)
    log.error("training diverged at step %d; state dumped to %s", step, path)


def write_metrics(path, rows, append=False):
    """Write rows to a CSV. With ``append``, rows at or beyond the first new
    step are replaced."""
    path = Path(path)
    kept = []
    if append and path.exists() and rows:
        first = rows[0].step
        with path.open() as fh:
            reader = csv.reader(fh)
            next(reader, None)
            kept = [r for r in reader if r and int(r[1]) < first]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        w.writerows(kept)
        for row in rows:
            w.writerow(row.as_csv())


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def epoch_means(rows: list[MetricsRow], name: str) -> dict[int, float]:
    by = {}
    for r in rows:
        by.setdefault(r.epoch, []).append(getattr(r, name))
    return {e: float(np.mean(v)) for e, v in sorted(by.items())}


# ---------------------------------------------------------------------------
# linear fine-tuning


@dataclass
class FineTuneResult:
    lr: float
    epochs: int
    val_accuracy: float
    test_accuracy: float
    classifier: tuple[np.ndarray, np.ndarray] | None = None
    params: EncoderParams | None = None
    grid: list[tuple[float, int, float, float]] = field(default_factory=list)


def split_validation(labels, fraction, seed):
    """Stratified split of the labeled pool; returns (train_idx, val_idx)."""
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 2])
    tr, va = [], []
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        k = int(round(fraction * len(members)))
        if fraction > 0:
            k = max(k, 1)
        if k >= len(members):
            raise ConfigError(f"class {c} has {len(members)} labeled samples, too few for a validation split")
        va.append(members[:k])
        tr.append(members[k:])
    return np.sort(np.concatenate(tr)), np.sort(np.concatenate(va))


def _classifier_logits(params, W, b, x):
    return ad.add(ad.matmul(first_projection_features(params, x), W), b)


def _predict_linear(params, W, b, x):
    h = embed_first_projection(params, x)
    return h @ W.value + b.value


def embed_first_projection(params, x):
    h = ad.as_matrix(x)
    for layer in params.trunk:
        h = np.maximum(h @ layer.weight.value + layer.bias.value, 0.0)
    layer = params.projection[0]
    return np.maximum(h @ layer.weight.value + layer.bias.value, 0.0)


def _fit_linear(params, x, y, num_classes, lr, epochs, cfg, aug, seed):
    params = params.copy()
    width = params.projection[0].fan_out
    W = ad.parameter(np.zeros((width, num_classes)))
    b = ad.parameter(np.zeros((1, num_classes)))
    nodes = [p for layer in params.trunk + params.projection[:1] for p in (layer.weight, layer.bias)] + [W, b]
    state = optim.OptimizerState([np.zeros_like(p.value) for p in nodes], cfg.momentum, 0.0)
    n = len(y)
    bs = min(cfg.batch_size, n)
    spe = max(1, n // bs)
    schedule = optim.LrSchedule(lr, lr, 0.0, 0, epochs * spe)
    onehot = smooth_labels(y, num_classes, 0.0)
    step = 0
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, 3, epoch])
        order = rng.permutation(n)
        for k in range(spe):
            batch = order[k * bs : (k + 1) * bs]
            xb = global_view(x[batch], aug, rng)
            with ad.Tape() as tape:
                loss = ad.cross_entropy_rows(onehot[batch], ad.softmax_rows(_classifier_logits(params, W, b, xb)))
                ad.backward(loss, tape)
            optim.step(nodes, [p.grad for p in nodes], state, optim.lr_at(schedule, step))
            ad.zero_grad(nodes)
            step += 1
    return params, W, b


def _score(params, W, b, x, y, num_classes):
    logits = _predict_linear(params, W, b, x)
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    probs = kernels.softmax_rows(np.ascontiguousarray(logits), 1.0)
    ce = float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-12))))
    return acc, ce


def fine_tune_linear(params, labeled_x, labeled_y, test_x, test_y, num_classes, config: TrainConfig,
                     feature_std=1.0, epoch_grid=None, seed=None) -> FineTuneResult:
    """Attach a zero-initialised linear classifier to the first projection
    layer and fine-tune trunk, first projection layer and classifier jointly
    on the labeled pool. The (lr, epochs) pair is picked on a held-out
    validation split (accuracy, then cross-entropy); the test set is only
    scored for the selected model."""
    cfg = config.finetune
    seed = config.train.seed if seed is None else seed
    labeled_y = np.asarray(labeled_y)
    tr, va = split_validation(labeled_y, cfg.val_fraction, seed)
    aug = dataclasses.replace(config.augment(feature_std), mask_fraction_local=0.0)
    epochs_list = cfg.epoch_grid if epoch_grid is None else list(epoch_grid)
    best, best_key, grid = None, None, []
    for lr in cfg.lr_grid:
        for epochs in epochs_list:
            fitted = _fit_linear(params, labeled_x[tr], labeled_y[tr], num_classes, lr, epochs, cfg, aug, seed)
            acc, ce = _score(*fitted, labeled_x[va], labeled_y[va], num_classes)
            grid.append((lr, epochs, acc, ce))
            key = (-acc, ce)
            if best_key is None or key < best_key:
                best, best_key = (lr, epochs, acc, fitted), key
    lr, epochs, acc, (p, W, b) = best
    test_acc, _ = _score(p, W, b, test_x, np.asarray(test_y), num_classes)
    return FineTuneResult(lr, epochs, acc, test_acc, (W.value, b.value), p, grid)
