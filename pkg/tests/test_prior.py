import math

import numpy as np
import pytest
from scipy.stats import entropy
from sklearn.tree import DecisionTreeClassifier

from icdistill.prior import (
    PriorConfig,
    quantile_bins,
    sample_task,
    sample_two_moons,
    two_moons_geometry,
)


def test_config_validation():
    with pytest.raises(ValueError):
        PriorConfig(C_range=(1, 3))
    with pytest.raises(ValueError):
        PriorConfig(n_range=(50, 40))
    with pytest.raises(ValueError):
        PriorConfig(noise_std=-0.1)
    with pytest.raises(ValueError):
        PriorConfig(hidden_widths=[8])


def test_binary_task_is_split_at_the_median():
    cfg = PriorConfig(n_range=(256, 256), C_range=(2, 2))
    for seed in range(5):
        counts = sample_task(cfg, np.random.default_rng(seed)).class_counts()
        assert abs(int(counts[0]) - 128) <= 1 and counts.sum() == 256


def test_quantile_bins_sizes_differ_by_at_most_one():
    rng = np.random.default_rng(0)
    for n, C in [(10, 3), (101, 4), (7, 7), (256, 5)]:
        counts = np.bincount(quantile_bins(rng.normal(size=n), C), minlength=C)
        assert counts.max() - counts.min() <= 1


def test_same_seed_same_task():
    cfg = PriorConfig()
    a = sample_task(cfg, np.random.default_rng(42))
    b = sample_task(cfg, np.random.default_rng(42))
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)
    assert a.num_classes == b.num_classes


def test_tasks_respect_ranges_and_are_z_scored():
    cfg = PriorConfig(n_range=(30, 60), d_range=(2, 5), C_range=(2, 4))
    rng = np.random.default_rng(1)
    for _ in range(50):
        t = sample_task(cfg, rng)
        assert 30 <= t.n <= 60 and 2 <= t.d <= 5 and 2 <= t.num_classes <= 4
        assert np.unique(t.y).size >= 2
        np.testing.assert_allclose(t.X.mean(axis=0), 0.0, atol=1e-12)
        np.testing.assert_allclose(t.X.std(axis=0), 1.0, atol=1e-12)


def test_label_entropy_is_near_maximal_on_average():
    cfg = PriorConfig()
    rng = np.random.default_rng(0)
    ratios = []
    for _ in range(1000):
        t = sample_task(cfg, rng)
        ratios.append(entropy(t.class_counts()) / math.log(t.num_classes))
    assert np.mean(ratios) >= 0.9


def test_n_override():
    t = sample_task(PriorConfig(), np.random.default_rng(0), n=500)
    assert t.n == 500


def test_two_moons_geometry_noise_free():
    X, y = two_moons_geometry(200)
    assert np.bincount(y).tolist() == [100, 100]
    # the outer arc sits on or above y=0, the inner arc on or below y=0.5
    # and is shifted by (1, -0.5): every class-0 height is at least the
    # lowest inner-arc offset
    assert X[y == 0, 1].min() >= 0.0 - 1e-12
    assert X[y == 1, 1].max() <= 0.5 + 1e-12
    assert X[y == 0, 1].min() >= X[y == 1, 1].min()


def test_two_moons_counts_and_scaling():
    ds = sample_two_moons(200, 0.0, np.random.default_rng(0))
    assert ds.class_counts().tolist() == [100, 100]
    np.testing.assert_allclose(ds.X.mean(axis=0), 0.0, atol=1e-12)


def test_two_moons_rejects_odd_n_and_negative_noise():
    with pytest.raises(ValueError):
        sample_two_moons(201, 0.1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_two_moons(200, -1.0, np.random.default_rng(0))


def test_two_moons_deterministic():
    a = sample_two_moons(100, 0.1, np.random.default_rng(3))
    b = sample_two_moons(100, 0.1, np.random.default_rng(3))
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_array_equal(a.y, b.y)


def test_two_moons_is_learnable_by_a_shallow_tree():
    train = sample_two_moons(400, 0.1, np.random.default_rng(0))
    tree = DecisionTreeClassifier(max_depth=3, random_state=0).fit(train.X, train.y)
    assert tree.score(train.X, train.y) >= 0.95


def test_two_moons_geometry_matches_reference_construction():
    from sklearn.datasets import make_moons

    X_ref, y_ref = make_moons(400, noise=0.0, shuffle=False)
    X, y = two_moons_geometry(400)
    np.testing.assert_allclose(X, X_ref, atol=1e-12)
    np.testing.assert_array_equal(y, y_ref)
