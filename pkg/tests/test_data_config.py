import numpy as np
import pytest

from deskpaws.config import TrainConfig, dump_config, load_config, parse_config_text
from deskpaws.data import build_dataset, make_blobs, nearest_neighbor_accuracy, write_dataset_csv
from deskpaws.encoder import ConfigError


def test_blobs_deterministic_and_split():
    a = make_blobs(4, 100, 16, 3.0, seed=1)
    b = make_blobs(4, 100, 16, 3.0, seed=1)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    tx, ty, ex, ey = a
    assert tx.shape == (320, 16) and ex.shape == (80, 16)
    np.testing.assert_array_equal(np.bincount(ey), [20] * 4)


def brute_1nn(rx, ry, qx, qy):
    hits = 0
    for q, t in zip(qx, qy):
        best, lab = None, None
        for r, l in zip(rx, ry):
            d = float(((q - r) ** 2).sum())
            if best is None or d < best:
                best, lab = d, l
        hits += lab == t
    return hits / len(qy)


def test_well_separated_blobs_are_easy():
    tx, ty, ex, ey = make_blobs(4, 250, 16, 10.0, seed=0)
    acc = nearest_neighbor_accuracy(tx, ty, ex, ey)
    assert acc > 0.99
    assert brute_1nn(tx, ty, ex[:100], ey[:100]) == nearest_neighbor_accuracy(tx, ty, ex[:100], ey[:100])


def test_coincident_blobs_are_chance():
    tx, ty, ex, ey = make_blobs(4, 500, 16, 0.0, seed=0)
    assert abs(nearest_neighbor_accuracy(tx, ty, ex, ey) - 0.25) < 0.06


def test_direction_angles():
    from deskpaws.data import _directions

    u = _directions(np.random.default_rng(0), 8, 4)
    g = u @ u.T - 2 * np.eye(8)
    assert g.max() <= 0.5 + 1e-12
    with pytest.raises(ConfigError):
        _directions(np.random.default_rng(0), 9, 4)


def test_nn_accuracy_matches_brute_force():
    tx, ty, ex, ey = make_blobs(3, 40, 5, 1.5, seed=3)
    assert nearest_neighbor_accuracy(tx, ty, ex, ey) == brute_1nn(tx, ty, ex, ey)


def test_labeled_subset(tiny_config):
    ds = build_dataset(tiny_config.data)
    np.testing.assert_array_equal(np.bincount(ds.labeled_y), [5, 5, 5])
    assert len(set(ds.labeled_idx.tolist())) == 15


def test_dataset_csv(tmp_path, tiny_config):
    ds = build_dataset(tiny_config.data)
    train_csv, test_csv = write_dataset_csv(ds, tmp_path)
    rows = np.loadtxt(train_csv, delimiter=",", skiprows=1)
    np.testing.assert_array_equal(rows[:, 2:], ds.train_x)
    assert rows[:, 1].sum() == 15
    assert np.loadtxt(test_csv, delimiter=",", skiprows=1).shape == (len(ds.test_y), 8)


def test_config_round_trip():
    cfg = load_config(None, ["paws.T=0.5", "paws.me_max=false", "optim.peak_lr=0.3"])
    text = dump_config(cfg)
    again = parse_config_text(text)
    assert dump_config(again) == text
    assert again.paws.T == 0.5 and again.paws.me_max is False


def test_config_file_and_override_precedence(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# comment\npaws.T = 0.3   # inline\noptim.epochs = 7\n")
    cfg = load_config(path, ["paws.T=0.5"])
    assert cfg.paws.T == 0.5 and cfg.optim.epochs == 7


@pytest.mark.parametrize("item", ["nosuch.key=1", "paws.nosuch=1", "paws.T=abc", "paws.me_max=maybe", "paws.T"])
def test_bad_overrides(item):
    with pytest.raises(ConfigError):
        load_config(None, [item])


def test_validation():
    cfg = TrainConfig()
    cfg.validate()
    cfg.support.per_class = 20
    with pytest.raises(ConfigError, match="label budget"):
        cfg.validate()
    cfg = TrainConfig()
    cfg.paws.tau = 0.0
    with pytest.raises(ConfigError):
        cfg.validate()
