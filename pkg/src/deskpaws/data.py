"""Synthetic Gaussian-blob datasets and the raw-feature 1-NN baseline."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from deskpaws.encoder import ConfigError

MIN_ANGLE_DEG = 60.0


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    labeled_idx: np.ndarray  # indices into the training split

    @property
    def labeled_x(self):
        return self.train_x[self.labeled_idx]

    @property
    def labeled_y(self):
        return self.train_y[self.labeled_idx]


def _directions(rng, k, dim):
    if k > 2 * dim:
        raise ConfigError(f"cannot place {k} cluster directions {MIN_ANGLE_DEG} degrees apart in {dim} dimensions")
    cos_max = np.cos(np.radians(MIN_ANGLE_DEG))
    for _ in range(1000):
        u = rng.normal(size=(k, dim))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        gram = u @ u.T - 2 * np.eye(k)
        if gram.max() <= cos_max + 1e-12:
            return u
    # signed coordinate axes always satisfy the angle floor
    axes = np.concatenate([np.eye(dim), -np.eye(dim)])
    return axes[rng.permutation(2 * dim)[:k]]


def make_blobs(classes, per_class, dim, separation, seed=0, test_fraction=0.2):
    """K unit-covariance Gaussian clusters centred at separation * u_k, with
    the unit directions u_k pairwise at least 60 degrees apart. Each class is
    split train/test by ``test_fraction``.

    Returns (train_x, train_y, test_x, test_y).
    """
    if classes < 2:
        raise ConfigError("need at least 2 classes")
    if dim < 1 or per_class < 2:
        raise ConfigError("dim must be >= 1 and per_class >= 2")
    rng = np.random.default_rng(seed)
    centers = separation * _directions(rng, classes, dim)
    n_test = int(round(per_class * test_fraction))
    parts = {"train": ([], []), "test": ([], [])}
    for c in range(classes):
        x = centers[c] + rng.normal(size=(per_class, dim))
        parts["test"][0].append(x[:n_test])
        parts["test"][1].append(np.full(n_test, c))
        parts["train"][0].append(x[n_test:])
        parts["train"][1].append(np.full(per_class - n_test, c))
    order_tr = rng.permutation(classes * (per_class - n_test))
    order_te = rng.permutation(classes * n_test)
    train_x = np.concatenate(parts["train"][0])[order_tr]
    train_y = np.concatenate(parts["train"][1])[order_tr]
    test_x = np.concatenate(parts["test"][0])[order_te]
    test_y = np.concatenate(parts["test"][1])[order_te]
    return train_x, train_y, test_x, test_y


def choose_labeled(train_y, num_classes, per_class, seed):
    rng = np.random.default_rng([seed, 1])
    picks = []
    for c in range(num_classes):
        members = np.flatnonzero(train_y == c)
        if len(members) < per_class:
            raise ConfigError(f"class {c} has only {len(members)} training samples, {per_class} requested")
        picks.append(np.sort(rng.choice(members, size=per_class, replace=False)))
    return np.concatenate(picks)


def build_dataset(cfg) -> Dataset:
    tx, ty, ex, ey = make_blobs(cfg.classes, cfg.per_class, cfg.dim, cfg.separation, cfg.seed, cfg.test_fraction)
    labeled = choose_labeled(ty, cfg.classes, cfg.labeled_per_class, cfg.seed)
    return Dataset(tx, ty, ex, ey, cfg.classes, labeled)


def nearest_neighbor_accuracy(ref_x, ref_y, query_x, query_y) -> float:
    """Euclidean 1-NN accuracy (ties go to the lowest reference index)."""
    d2 = (query_x**2).sum(1)[:, None] - 2 * query_x @ ref_x.T + (ref_x**2).sum(1)[None, :]
    pred = np.asarray(ref_y)[np.argmin(d2, axis=1)]
    return float(np.mean(pred == query_y))


def write_dataset_csv(dataset: Dataset, out_dir) -> list[Path]:
    """Write train.csv / test.csv (label, labeled flag, features)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    flags = np.zeros(len(dataset.train_y), dtype=int)
    flags[dataset.labeled_idx] = 1
    paths = []
    for name, x, y, f in (
        ("train", dataset.train_x, dataset.train_y, flags),
        ("test", dataset.test_x, dataset.test_y, np.zeros(len(dataset.test_y), dtype=int)),
    ):
        path = out_dir / f"{name}.csv"
        header = ",".join(["label", "labeled"] + [f"x{i}" for i in range(x.shape[1])])
        with path.open("w") as fh:
            fh.write(header + "\n")
            for row, lab, flag in zip(x, y, f):
                fh.write(f"{int(lab)},{int(flag)}," + ",".join(f"{v:.17g}" for v in row) + "\n")
        paths.append(path)
    return paths
