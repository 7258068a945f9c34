import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masking import (
    InvalidSignals, MaskPattern, MaskingConfig, MissingSignals, QualitySignals, RatioOutOfRange,
    adaptive_weight, adaptive_weights, build_mask,
)


def flat_signals(T, J, V=4, rho=0.5, sigma=0.1):
    return QualitySignals(np.full((V, T, J), rho), np.full((T, J), sigma))


def test_adaptive_weight_examples():
    assert adaptive_weight(np.zeros(4), 0.0, 1.0) == 1.0
    assert adaptive_weight(np.full(4, 1e3), 0.25, 1.0) == pytest.approx(0.25)
    assert adaptive_weight([0.5, 0.5], 0.1, 0.5) == pytest.approx(0.283940, abs=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=6), st.floats(0, 1), st.floats(0, 5),
       st.floats(0.01, 0.5))
def test_adaptive_weight_monotone(rho, sigma, omega, bump):
    w = adaptive_weight(rho, sigma, omega)
    higher_rho = list(rho)
    higher_rho[0] = higher_rho[0] + bump
    assert adaptive_weight(higher_rho, sigma, omega) <= w
    assert adaptive_weight(rho, sigma + bump, omega) > w
    assert adaptive_weight(np.zeros(len(rho)), sigma, omega) >= w


def test_vectorised_weights_match_scalar_rule():
    rng = np.random.default_rng(0)
    signals = QualitySignals(rng.random((3, 4, 5)), rng.random((4, 5)))
    weights = adaptive_weights(signals, 0.7)
    for t in range(4):
        for j in range(5):
            assert weights[t, j] == pytest.approx(adaptive_weight(signals.rho[:, t, j], signals.sigma[t, j], 0.7))


def test_config_validation():
    with pytest.raises(RatioOutOfRange):
        MaskingConfig(ratio=0.0)
    with pytest.raises(RatioOutOfRange):
        MaskingConfig(ratio=1.0)
    assert MaskingConfig(pattern='C').pattern is MaskPattern.C


def test_signal_validation():
    with pytest.raises(InvalidSignals):
        QualitySignals(np.full((2, 3, 4), 1.5), np.zeros((3, 4)))
    with pytest.raises(InvalidSignals):
        QualitySignals(np.zeros((2, 3, 4)), np.zeros((4, 3)))


def test_signals_follow_a_joint_permutation():
    rho = np.zeros((2, 3, 4))
    rho[..., 1] = 0.5
    sigma = np.tile(np.array([0.1, 0.2, 0.3, 0.4]), (3, 1))
    moved = QualitySignals(rho, sigma).reorder_joints([0, 3, 2, 1])
    np.testing.assert_array_equal(moved.sigma[0], [0.1, 0.4, 0.3, 0.2])
    np.testing.assert_array_equal(moved.rho[..., 3], 0.5)
    with pytest.raises(InvalidSignals):
        QualitySignals(rho, sigma).reorder_joints([0, 0, 1, 2])


def test_pattern_a_per_frame_count():
    mask = build_mask(MaskingConfig(MaskPattern.A, 0.3, seed=1), 10, 17)
    assert np.all(mask.sum(axis=1) == 5)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.01, 0.99), st.integers(1, 30), st.integers(1, 30), st.integers(0, 1000))
def test_cardinality_formulas(ratio, T, J, seed):
    a = build_mask(MaskingConfig(MaskPattern.A, ratio, seed=seed), T, J)
    assert np.all(a.sum(axis=1) == int(np.floor(ratio * J)))
    b = build_mask(MaskingConfig(MaskPattern.B, ratio, seed=seed), T, J)
    assert b.sum() == int(np.floor(ratio * T * J))
    rng = np.random.default_rng(seed)
    signals = QualitySignals(rng.uniform(0.1, 1, (3, T, J)), rng.random((T, J)))
    c = build_mask(MaskingConfig(MaskPattern.C, ratio, seed=seed), T, J, signals)
    assert c.sum() == int(np.floor(ratio * T * J))


def test_pattern_b_inclusion_frequency():
    T, J, runs = 10, 17, 10_000
    counts = np.zeros((T, J))
    for seed in range(runs):
        mask = build_mask(MaskingConfig(MaskPattern.B, 0.5, seed=seed), T, J)
        assert mask.sum() == 85
        counts += mask
    assert np.all(np.abs(counts / runs - 0.5) < 0.025)
    assert abs(counts.sum() / (runs * T * J) - 0.5) < 0.01


def test_pattern_c_requires_signals():
    with pytest.raises(MissingSignals):
        build_mask(MaskingConfig(MaskPattern.C, 0.3), 4, 5)


def test_pattern_c_dominant_joint_always_masked():
    T, J = 4, 6
    sigma = np.full((T, J), 1e-6)
    sigma[2, 3] = 1.0
    signals = QualitySignals(np.ones((3, T, J)), sigma)
    for seed in range(1000):
        mask = build_mask(MaskingConfig(MaskPattern.C, 0.2, omega=0.0, seed=seed), T, J, signals)
        assert mask[2, 3]


def test_pattern_c_frequencies_follow_weights():
    T, J, runs = 2, 5, 10_000
    sigma = np.tile(np.array([0.05, 0.2, 0.4, 0.7, 1.0]), (T, 1))
    signals = QualitySignals(np.ones((2, T, J)), sigma)
    weights = adaptive_weights(signals, 1.0)
    counts = np.zeros((T, J))
    for seed in range(runs):
        counts += build_mask(MaskingConfig(MaskPattern.C, 0.3, seed=seed), T, J, signals)
    freq = (counts / runs).mean(axis=0)
    column_weights = weights[0]
    assert np.all(np.diff(column_weights) > 0)
    assert np.all(np.diff(freq) > 0)
    assert counts.sum() / runs == pytest.approx(3.0)


def test_force_invisible():
    T, J = 5, 6
    rho = np.ones((3, T, J))
    rho[:, :, 4] = 0.0
    signals = QualitySignals(rho, np.zeros((T, J)))
    mask = build_mask(MaskingConfig(MaskPattern.C, 0.3, seed=3), T, J, signals)
    assert np.all(mask[:, 4])
    assert mask.sum() == 9
    # More invisible cells than the target: the mask holds all of them
    rho[:, :, :3] = 0.0
    mask = build_mask(MaskingConfig(MaskPattern.C, 0.3, seed=3), T, J, QualitySignals(rho, np.zeros((T, J))))
    assert mask.sum() == 20 and np.all(mask[:, [0, 1, 2, 4]])


def test_build_mask_deterministic():
    signals = flat_signals(6, 7)
    for pattern in MaskPattern:
        cfg = MaskingConfig(pattern, 0.4, seed=11)
        assert np.array_equal(build_mask(cfg, 6, 7, signals), build_mask(cfg, 6, 7, signals))
