import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from scipy.stats import norm

from evoattack.oracle import (
    ConfidenceVector,
    HalfBrightnessOracle,
    PrototypeOracle,
    monte_carlo_confidence,
)
from evoattack.tensors import ImageTensor, ShapeError, save_flat

from helpers import prototype_images


def test_confidence_vector_validation():
    with pytest.raises(ValueError):
        ConfidenceVector(np.array([1.0]))
    with pytest.raises(ValueError):
        ConfidenceVector(np.array([0.7, 0.2]))
    with pytest.raises(ValueError):
        ConfidenceVector(np.array([-0.1, 1.1]))
    cv = ConfidenceVector(np.array([0.25, 0.75]))
    assert cv.label == 1 and len(cv) == 2


def test_top_two_ties_break_to_lowest_index():
    cv = ConfidenceVector(np.array([0.25, 0.25, 0.25, 0.25]))
    assert cv.top_two() == (0, 1)
    cv = ConfidenceVector(np.array([0.2, 0.4, 0.4]))
    assert cv.top_two() == (1, 2)


def test_half_brightness_matches_closed_form():
    # Independent evaluation: plain-Python means and softmax.
    rng = np.random.default_rng(5)
    arr = rng.uniform(0, 1, size=(6, 8, 1))
    tau = 0.07
    oracle = HalfBrightnessOracle(6, 8, temperature=tau)
    got = oracle.query(ImageTensor(arr)).probs
    left = sum(arr[r, c, 0] for r in range(6) for c in range(4)) / 24
    right = sum(arr[r, c, 0] for r in range(6) for c in range(4, 8)) / 24
    el, er = math.exp(left / tau), math.exp(right / tau)
    assert got[0] == pytest.approx(el / (el + er), abs=1e-12)
    assert got[1] == pytest.approx(er / (el + er), abs=1e-12)


def test_half_brightness_brighter_left_concentrates_class0():
    arr = np.full((4, 4, 1), 0.2)
    arr[:, :2, :] = 0.9
    oracle = HalfBrightnessOracle(4, 4, temperature=0.05)
    probs = oracle.query(ImageTensor(arr)).probs
    assert probs[0] > 0.99


def test_half_brightness_uniform_gray_is_symmetric():
    oracle = HalfBrightnessOracle(8, 8, temperature=0.1)
    probs = oracle.query(ImageTensor(np.full((8, 8, 1), 0.5))).probs
    assert probs[0] == pytest.approx(0.5, abs=1e-12)
    assert probs[1] == pytest.approx(0.5, abs=1e-12)


def test_query_counts_exactly_once():
    oracle = HalfBrightnessOracle(4, 4)
    img = ImageTensor(np.full((4, 4, 1), 0.5))
    for expected in range(1, 6):
        oracle.query(img)
        assert oracle.stats.total_queries == expected
    oracle.query_uncounted(img)
    assert oracle.stats.total_queries == 5


def test_query_rejects_shape_mismatch():
    oracle = HalfBrightnessOracle(4, 4)
    with pytest.raises(ShapeError):
        oracle.query(ImageTensor(np.full((4, 5, 1), 0.5)))


def test_query_binary_argmax_one_hot_and_tie():
    oracle = HalfBrightnessOracle(4, 4, temperature=0.05)
    arr = np.full((4, 4, 1), 0.2)
    arr[:, 2:, :] = 0.8
    out = oracle.query_binary(ImageTensor(arr))
    assert np.array_equal(out.probs, [0.0, 1.0])
    tie = oracle.query_binary(ImageTensor(np.full((4, 4, 1), 0.5)))
    assert np.array_equal(tie.probs, [1.0, 0.0])  # tie goes to class 0
    assert oracle.stats.total_queries == 2


def test_binary_only_oracle_answers_one_hot():
    oracle = HalfBrightnessOracle(4, 4, binary_only=True)
    arr = np.full((4, 4, 1), 0.3)
    arr[:, :2, :] = 0.7
    probs = oracle.query(ImageTensor(arr)).probs
    assert np.array_equal(probs, [1.0, 0.0])


def test_built_in_oracle_is_deterministic_bit_exact():
    rng = np.random.default_rng(11)
    img = ImageTensor(rng.uniform(0, 1, size=(6, 6, 1)))
    a = HalfBrightnessOracle(6, 6, temperature=0.03)
    b = HalfBrightnessOracle(6, 6, temperature=0.03)
    assert np.array_equal(a.query(img).probs, b.query(img).probs)


def test_prototype_oracle_prefers_nearest_and_normalizes():
    protos = prototype_images()
    oracle = PrototypeOracle(protos, temperature=0.05)
    for k, proto in enumerate(protos):
        cv = oracle.query(proto)
        assert cv.label == k
        assert cv.probs.sum() == pytest.approx(1.0, abs=1e-12)


def test_prototype_oracle_from_files(tmp_path):
    protos = prototype_images()
    paths = []
    for i, p in enumerate(protos):
        path = tmp_path / f"proto{i}.pten"
        save_flat(p, path)
        paths.append(path)
    oracle = PrototypeOracle.from_files(paths, temperature=0.05)
    direct = PrototypeOracle(protos, temperature=0.05)
    img = protos[2]
    assert np.allclose(oracle.query(img).probs, direct.query(img).probs, atol=1e-7)


def test_prototype_batch_matches_single():
    protos = prototype_images()
    oracle = PrototypeOracle(protos, temperature=0.1)
    rng = np.random.default_rng(2)
    batch = rng.uniform(0, 1, size=(5, *protos[0].shape))
    labels = oracle.query_binary_batch(batch)
    for i in range(5):
        assert labels[i] == oracle.query_uncounted(ImageTensor(batch[i])).label
    assert oracle.stats.total_queries == 5


def test_counter_is_correct_under_concurrent_queries():
    oracle = HalfBrightnessOracle(4, 4)
    img = ImageTensor(np.full((4, 4, 1), 0.5))
    with ThreadPoolExecutor(max_workers=8) as pool:
        list(pool.map(lambda _: oracle.query(img), range(200)))
    assert oracle.stats.total_queries == 200


def test_monte_carlo_constant_oracle_is_one_hot():
    class Constant(HalfBrightnessOracle):
        def _predict(self, arr):
            return np.array([0.0, 1.0])

        def _predict_batch(self, batch):
            out = np.zeros((batch.shape[0], 2))
            out[:, 1] = 1.0
            return out

    oracle = Constant(4, 4)
    rng = np.random.default_rng(0)
    est = monte_carlo_confidence(oracle, ImageTensor(np.full((4, 4, 1), 0.5)), 50, 0.2, rng)
    assert np.array_equal(est.probs, [0.0, 1.0])
    assert oracle.stats.total_queries == 50


def test_monte_carlo_sigma_zero_equals_binary_query():
    oracle = HalfBrightnessOracle(4, 4, temperature=0.05)
    arr = np.full((4, 4, 1), 0.4)
    arr[:, :2, :] = 0.6
    img = ImageTensor(arr)
    rng = np.random.default_rng(1)
    est = monte_carlo_confidence(oracle, img, 25, 0.0, rng)
    assert np.array_equal(est.probs, oracle.query_binary(img).probs)
    assert oracle.stats.total_queries == 25 + 1


def test_monte_carlo_matches_independent_recomputation_bit_exact():
    # Same seeded draws, independent clamp/argmax/average implementation.
    side = 8
    oracle = HalfBrightnessOracle(side, side, binary_only=True)
    rng = np.random.default_rng(42)
    base = np.full((side, side, 1), 0.5)
    base[:, : side // 2, :] += 0.004
    img = ImageTensor(base)
    est = monte_carlo_confidence(oracle, img, 100, 30 / 255, rng)

    rng2 = np.random.default_rng(42)
    noise = rng2.normal(0.0, 30 / 255, size=(100, side, side, 1))
    counts = [0, 0]
    for k in range(100):
        noised = np.minimum(1.0, np.maximum(0.0, base + noise[k]))
        left = noised[:, : side // 2, :].mean()
        right = noised[:, side // 2 :, :].mean()
        counts[0 if left >= right else 1] += 1
    expected = np.array(counts, dtype=np.float64) / 100
    assert np.array_equal(est.probs, expected)


def test_monte_carlo_tracks_analytic_expectation():
    # Deviation within 3*sqrt(p(1-p)/N) in at least 99% of seeded trials.
    side = 16
    sigma = 30 / 255
    n = 100
    half_pixels = side * (side // 2)
    noise_sd = sigma * math.sqrt(2.0 / half_pixels)
    oracle = HalfBrightnessOracle(side, side, binary_only=True)
    within = 0
    trials = 100
    for trial in range(trials):
        rng = np.random.default_rng(500 + trial)
        gap = rng.uniform(-1.5, 1.5) * noise_sd
        base = np.full((side, side, 1), 0.5)
        base[:, : side // 2, :] += gap / 2
        base[:, side // 2 :, :] -= gap / 2
        img = ImageTensor(base)
        p_class0 = float(norm.cdf(gap / noise_sd))
        est = monte_carlo_confidence(oracle, img, n, sigma, rng)
        tol = 3 * math.sqrt(max(p_class0 * (1 - p_class0), 1e-12) / n) + 1e-9
        if abs(est.probs[0] - p_class0) <= tol:
            within += 1
    assert within >= 0.99 * trials


def test_monte_carlo_validates_inputs():
    oracle = HalfBrightnessOracle(4, 4)
    img = ImageTensor(np.full((4, 4, 1), 0.5))
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        monte_carlo_confidence(oracle, img, 0, 0.1, rng)
    with pytest.raises(ValueError):
        monte_carlo_confidence(oracle, img, 10, -0.1, rng)
    with pytest.raises(ShapeError):
        monte_carlo_confidence(oracle, ImageTensor(np.full((4, 5, 1), 0.5)), 10, 0.1, rng)
