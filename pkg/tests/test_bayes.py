import math

import numpy as np
import pytest

from bayesfpn import bayes
from bayesfpn.bayes import McSampleStack
from bayesfpn.model import build

H02_04 = 0.610864302054893  # -(0.3 ln 0.3 + 0.7 ln 0.7)
MI02_04 = 0.024157256781171  # H(0.3) - (H(0.2) + H(0.4)) / 2


def stack_of(values):
    return np.asarray(values, dtype=np.float64).reshape(-1, 1, 1, 1)


def test_mean_single_and_pair():
    s = np.random.default_rng(0).random((1, 2, 3, 3))
    np.testing.assert_array_equal(bayes.mean_mask(s), s[0])
    assert bayes.mean_mask(stack_of([0.0, 1.0])).item() == 0.5


def test_mean_matches_brute_force():
    s = np.random.default_rng(1).random((17, 2, 5, 5))
    ref = np.zeros((2, 5, 5))
    for c in range(2):
        for i in range(5):
            for j in range(5):
                ref[c, i, j] = math.fsum(s[:, c, i, j]) / 17
    np.testing.assert_allclose(bayes.mean_mask(s), ref, rtol=0, atol=1e-12)


def test_mean_is_permutation_invariant_bitwise():
    s = np.random.default_rng(2).random((23, 2, 4, 4))
    perm = np.random.default_rng(3).permutation(23)
    np.testing.assert_array_equal(bayes.mean_mask(s), bayes.mean_mask(s[perm]))


def test_entropy_hand_values():
    assert bayes.predictive_entropy(stack_of([1.0, 1.0])).item() == 0.0
    assert bayes.predictive_entropy(stack_of([0.0, 1.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    assert bayes.predictive_entropy(stack_of([0.2, 0.4])).item() == pytest.approx(H02_04, abs=1e-12)


def test_mutual_information_hand_values():
    assert bayes.mutual_information(stack_of([0.3] * 6)).item() == 0.0
    assert bayes.mutual_information(stack_of([0.0, 1.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    assert bayes.mutual_information(stack_of([0.2, 0.4])).item() == pytest.approx(MI02_04, abs=1e-12)


def test_report_sums():
    s = np.random.default_rng(4).random((5, 2, 3, 3))
    r = bayes.report(s)
    np.testing.assert_array_equal(r.entropy_sum, r.entropy[0] + r.entropy[1])
    np.testing.assert_array_equal(r.mi_sum, r.mutual_info[0] + r.mutual_info[1])
    np.testing.assert_array_equal(r.mutual_info, bayes.mutual_information(s))


def test_stack_validation():
    with pytest.raises(ValueError):
        McSampleStack(np.full((2, 2, 3, 3), 1.5), 0, (0, 1))
    with pytest.raises(ValueError):
        McSampleStack(np.zeros((2, 3, 3)), 0, (0, 1))


def test_to_uint8():
    np.testing.assert_array_equal(bayes.to_uint8(np.array([0.0, bayes.LN2 / 2, bayes.LN2, 5.0])),
                                  [0, 128, 255, 255])


@pytest.fixture(scope="module")
def small_model():
    return build(input_size=32, init_seed=1)


def test_mc_sample_shapes_and_determinism(small_model):
    img = np.random.default_rng(0).random((1, 32, 32)).astype(np.float32)
    a = bayes.mc_sample(small_model, img, T=4, seed=5)
    b = bayes.mc_sample(small_model, img, T=4, seed=5)
    assert a.samples.shape == (4, 2, 32, 32) and a.counters == (0, 1, 2, 3)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert np.any(a.samples[0] != a.samples[1])
    np.testing.assert_array_equal(a.prefix(2).samples, bayes.mc_sample(small_model, img, T=2, seed=5).samples)
    r = bayes.report(a)
    assert np.all(np.isfinite(r.entropy)) and np.all(r.mutual_info >= -1e-12)
    assert np.all(r.mutual_info <= r.entropy + 1e-12) and np.all(r.entropy <= math.log(2) + 1e-9)


def test_zero_dropout_samples_identical():
    model = build(build(input_size=32).config.without_dropout())
    img = np.random.default_rng(1).random((1, 32, 32)).astype(np.float32)
    st = bayes.mc_sample(model, img, T=5, seed=0)
    for t in range(1, 5):
        np.testing.assert_array_equal(st.samples[t], st.samples[0])
    assert np.abs(bayes.report(st).mi_sum).max() <= 1e-9


def test_mc_sample_rejects_bad_T(small_model):
    with pytest.raises(ValueError):
        bayes.mc_sample(small_model, np.zeros((1, 32, 32), np.float32), T=0)
