import numpy as np
import pytest

from bayesfpn.ctr import (CtrEstimationError, EmptyMaskError, ctr_statistics, estimate_ctr,
                          ground_truth_ctr, measure_ctr)
from bayesfpn.phantom import PhantomConfig, generate


def rect(shape, c0, c1, r0=10, r1=20):
    m = np.zeros(shape, dtype=np.uint8)
    m[r0:r1, c0:c1 + 1] = 1
    return m


def scan_oracle(heart, lungs):
    """Extreme columns by visiting every pixel."""
    def extent(mask):
        lo, hi = None, None
        for r in range(mask.shape[0]):
            for c in range(mask.shape[1]):
                if mask[r, c]:
                    lo = c if lo is None else min(lo, c)
                    hi = c if hi is None else max(hi, c)
        return hi - lo + 1
    return extent(heart) / extent(lungs)


def test_constructed_rectangles():
    m = measure_ctr(rect((200, 200), 80, 129), rect((200, 200), 40, 139))
    assert (m.heart_width, m.lung_width) == (50, 100)
    assert m.ctr == 0.5


def test_identical_masks_ratio_one():
    mask = rect((30, 30), 3, 17)
    assert measure_ctr(mask, mask).ctr == 1.0


def test_random_blobs_match_scan():
    rng = np.random.default_rng(0)
    for _ in range(20):
        heart = (rng.random((24, 24)) < 0.05).astype(np.uint8)
        lungs = (rng.random((24, 24)) < 0.1).astype(np.uint8)
        heart[rng.integers(24), rng.integers(24)] = 1
        lungs[rng.integers(24), rng.integers(24)] = 1
        assert measure_ctr(heart, lungs).ctr == scan_oracle(heart, lungs)


def test_empty_masks_raise():
    full = rect((10, 10), 2, 5, r0=1, r1=5)
    with pytest.raises(EmptyMaskError, match="heart"):
        measure_ctr(np.zeros((10, 10)), full)
    with pytest.raises(EmptyMaskError, match="lungs"):
        measure_ctr(full, np.zeros((10, 10)))
    with pytest.raises(ValueError):
        measure_ctr(full, np.zeros((10, 11)))


def test_statistics_hand_values():
    mean, std, (lo, hi) = ctr_statistics([0.48, 0.50, 0.52])
    assert mean == pytest.approx(0.50, abs=1e-15)
    assert std == pytest.approx(0.02, abs=1e-15)
    assert lo == pytest.approx(0.481, abs=1e-12)
    assert hi == pytest.approx(0.519, abs=1e-12)


def _stack(heart_cols, lung_cols, size=32):
    out = np.zeros((len(heart_cols), 2, size, size))
    for t, (h, l) in enumerate(zip(heart_cols, lung_cols)):
        out[t, 0] = rect((size, size), *h) * 0.9
        out[t, 1] = rect((size, size), *l) * 0.8
    return out


def test_estimate_single_sample_degenerate():
    est = estimate_ctr(_stack([(10, 19)], [(2, 29)]))
    assert est.std == 0.0
    assert est.bounds == (est.mean, est.mean) == (10 / 28, 10 / 28)


def test_estimate_identical_samples_zero_width():
    est = estimate_ctr(_stack([(10, 19)] * 5, [(2, 29)] * 5))
    assert est.width == 0.0 and est.std == 0.0


def test_estimate_flags_empty_samples():
    stack = _stack([(10, 19), (10, 21), (10, 19)], [(2, 29)] * 3)
    stack[1, 0] = 0.2
    est = estimate_ctr(stack)
    assert est.flagged == 1 and est.flagged_reasons == ["heart"]
    assert est.per_sample[1] is None
    np.testing.assert_array_equal(est.values, [10 / 28, 10 / 28])
    stack[:, 1] = 0.0
    with pytest.raises(CtrEstimationError):
        estimate_ctr(stack)


def test_threshold_is_inclusive():
    stack = _stack([(10, 19)], [(2, 29)])
    stack[0, 0] = rect((32, 32), 10, 19) * 0.5
    assert estimate_ctr(stack).mean == 10 / 28


@pytest.fixture(scope="module")
def phantoms():
    return generate(PhantomConfig(count=30, seed=3))


def test_ground_truth_matches_recorded(phantoms):
    for s in phantoms:
        assert ground_truth_ctr(s) == s.gt_ctr


def test_phantom_ctr_within_quantization_of_analytic(phantoms):
    for s in phantoms:
        assert abs(s.gt_ctr - s.params["target_ctr"]) <= 2 / 64


def test_mirrored_phantom_same_ctr(phantoms):
    for s in phantoms:
        assert measure_ctr(s.heart_mask[:, ::-1], s.lungs_mask[:, ::-1]).ctr == s.gt_ctr
