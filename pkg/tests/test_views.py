import numpy as np
import pytest

from deskpaws.autodiff import DomainError
from deskpaws.encoder import ConfigError
from deskpaws.views import AugmentConfig, generate_views, pair_structure


def x_batch(n=10, d=16):
    return np.random.default_rng(0).normal(size=(n, d)) + 0.5


def test_identity_augmentation():
    x = x_batch()
    cfg = AugmentConfig(noise_sigma=0.0, scale_low=1.0, scale_high=1.0, mask_fraction_local=0.0)
    b = generate_views(x, cfg, rng=np.random.default_rng(0))
    assert b.num_views == 8
    for v in b.global_views + b.local_views:
        np.testing.assert_array_equal(v, x)


def test_local_views_zero_half_the_coordinates():
    x = x_batch()  # no exact zeros in the source
    cfg = AugmentConfig(noise_sigma=0.0, mask_fraction_local=0.5)
    b = generate_views(x, cfg, rng=np.random.default_rng(1))
    for v in b.local_views:
        np.testing.assert_array_equal((v == 0).sum(axis=1), 8)
    for v in b.global_views:
        assert not np.any(v == 0)


def test_seed_determinism():
    x = x_batch()
    a = generate_views(x, AugmentConfig(), rng=np.random.default_rng(7))
    b = generate_views(x, AugmentConfig(), rng=np.random.default_rng(7))
    for u, v in zip(a.global_views + a.local_views, b.global_views + b.local_views):
        np.testing.assert_array_equal(u, v)


def test_rows_do_not_mix():
    x = x_batch()
    cfg = AugmentConfig(noise_sigma=0.0)
    b = generate_views(x, cfg, rng=np.random.default_rng(2))
    # noise-free global view is a positive multiple of its own source row
    ratio = b.global_views[0] / x
    np.testing.assert_allclose(ratio, ratio[:, :1] * np.ones_like(ratio), rtol=1e-12)
    assert np.all((ratio >= 0.9) & (ratio <= 1.1))


@pytest.mark.parametrize("kw", [
    {"noise_sigma": -1.0},
    {"scale_low": 0.0},
    {"scale_low": 1.2, "scale_high": 1.1},
    {"mask_fraction_local": 1.0},
])
def test_invalid_config(kw):
    with pytest.raises(DomainError):
        generate_views(x_batch(), AugmentConfig(**kw), rng=np.random.default_rng(0))


def test_pair_structure():
    x = x_batch()
    b0 = generate_views(x, AugmentConfig(), num_local=0, rng=np.random.default_rng(0))
    assert pair_structure(b0) == {0: [1], 1: [0]}
    b6 = generate_views(x, AugmentConfig(), num_local=6, rng=np.random.default_rng(0))
    pairs = pair_structure(b6)
    for k in range(2, 8):
        assert pairs[k] == [0, 1]
    assert not any(t >= 2 for targets in pairs.values() for t in targets)
    b3 = generate_views(x, AugmentConfig(), num_global=3, rng=np.random.default_rng(0))
    with pytest.raises(ConfigError):
        pair_structure(b3)
    with pytest.raises(ConfigError):
        generate_views(x, AugmentConfig(), num_global=1)
