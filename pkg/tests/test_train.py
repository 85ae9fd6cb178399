import math

import numpy as np
import pytest

from bayesfpn import tensor as T
from bayesfpn import train as tr
from bayesfpn.ctr import measure_ctr
from bayesfpn.evaluate import iou
from bayesfpn.gradcheck import numerical_grad, relative_error
from bayesfpn.model import build
from bayesfpn.phantom import PhantomConfig, generate
from bayesfpn.tensor import Tensor


# -- losses ----------------------------------------------------------------------

def test_soft_jaccard_hand_values():
    ones4 = np.ones(4)
    assert tr.soft_jaccard(Tensor(ones4), ones4).item() == 1.0
    disjoint = tr.soft_jaccard(Tensor(np.r_[np.ones(4), np.zeros(4)]), np.r_[np.zeros(4), np.ones(4)])
    assert disjoint.item() == pytest.approx(1 / 9, abs=1e-15)
    # 0.5 over the 4 target pixels, 0 on the other 4: intersection 2, union 4
    half = tr.soft_jaccard(Tensor(np.r_[np.full(4, 0.5), np.zeros(4)]), np.r_[np.ones(4), np.zeros(4)])
    assert half.item() == pytest.approx(0.6, abs=1e-15)


def test_bce_hand_values():
    assert tr.bce(Tensor(np.array([0.5])), np.array([1.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    y = np.array([0.0, 1.0, 1.0])
    assert tr.bce(Tensor(y.copy()), y).item() <= -math.log(1 - 1e-7) + 1e-15


@pytest.mark.parametrize("fn", [tr.bce, tr.soft_jaccard])
def test_loss_gradients(fn):
    rng = np.random.default_rng(0)
    p = rng.uniform(0.05, 0.95, size=(2, 3, 3))
    y = (rng.random((2, 3, 3)) < 0.5).astype(np.float64)
    t = Tensor(p, requires_grad=True)
    fn(t, y).backward()
    num = numerical_grad(lambda: fn(Tensor(p), y).item(), p)
    assert relative_error(t.grad, num) < 1e-6


def test_total_loss_extremes():
    rng = np.random.default_rng(1)
    y = (rng.random((2, 2, 8, 8)) < 0.5).astype(np.float64)
    total, parts = tr.total_loss(Tensor(y.copy()), y)
    assert total.item() == pytest.approx(-2.0, abs=1e-5)
    _, parts = tr.total_loss(Tensor(np.full(y.shape, 0.5)), y)
    assert parts.bce_heart == pytest.approx(math.log(2), abs=1e-15)
    assert parts.bce_lungs == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(ValueError):
        tr.total_loss(Tensor(np.zeros((2, 3, 4, 4))), np.zeros((2, 3, 4, 4)))


# -- Adam ------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = tr.Adam([("w", w)], lr=0.1)
    w.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(w.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = tr.Adam([("w", w)], lr=0.1, eps=0.0)
    w.grad = np.array([3.0, -0.5])
    opt.step()
    np.testing.assert_allclose(w.data, [0.9, -1.9], rtol=0, atol=1e-15)


def test_adam_state_roundtrip():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = tr.Adam([("w", w)])
    w.grad = np.array([1.0, 2.0, 3.0])
    opt.step()
    other = tr.Adam([("w", Tensor(np.ones(3), requires_grad=True))])
    other.load_state_dict(opt.state_dict())
    assert other.t == 1
    np.testing.assert_array_equal(other.m["w"], opt.m["w"])


# -- augmentation ----------------------------------------------------------------

@pytest.fixture(scope="module")
def sample():
    return generate(PhantomConfig(count=1, seed=5))[0]


def test_disabled_augmentation_is_identity(sample):
    assert tr.augment(sample, tr.AugmentationSpec.disabled(), np.random.default_rng(0)) is sample


def test_hflip_mirrors_masks(sample):
    spec = tr.AugmentationSpec(crop_p=0, rotate_p=0, noise_p=0, blur_p=0, sharpen_p=0, brightness_p=0, hflip_p=1)
    out = tr.augment(sample, spec, np.random.default_rng(0))
    np.testing.assert_array_equal(out.heart_mask, sample.heart_mask[:, ::-1])
    np.testing.assert_array_equal(out.lungs_mask, sample.lungs_mask[:, ::-1])
    np.testing.assert_allclose(out.image, sample.image[:, :, ::-1], atol=1e-7)
    assert out.gt_ctr == sample.gt_ctr


def test_rotation_near_inverse(sample):
    for mask in (sample.heart_mask, sample.lungs_mask):
        back = tr.rotate_mask(tr.rotate_mask(mask, 5.0), -5.0)
        assert iou(back, mask) >= 0.95


def test_marker_follows_geometry():
    size = 64
    crop, angle = (6, 9, 50, 44), 4.0
    m = tr.geometric_matrix((size, size), crop, angle, hflip=True)
    img = np.zeros((size, size))
    img[30, 25] = 1.0
    out = tr.warp(img, m, is_mask=False)
    peak = np.unravel_index(np.argmax(out), out.shape)
    expected = tr.transform_point(m, (30, 25))
    assert np.hypot(*(np.array(peak) - expected)) <= 1.0


def test_augmentation_keeps_masks_binary(sample):
    rng = np.random.default_rng(3)
    spec = tr.AugmentationSpec(crop_p=1, rotate_p=1, noise_p=1, blur_p=1, sharpen_p=1, brightness_p=1)
    out = tr.augment(sample, spec, rng)
    assert set(np.unique(out.heart_mask)) <= {0, 1}
    assert out.image.dtype == np.float32 and 0 <= out.image.min() and out.image.max() <= 1
    assert out.gt_ctr == measure_ctr(out.heart_mask, out.lungs_mask).ctr


# -- training loop ---------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_set():
    return generate(PhantomConfig(count=8, size=32, seed=2, lung_extent_range=(0.7, 0.85),
                                  ctr_range=(0.45, 0.6)))


def test_loss_decreases_on_fixed_batch(tiny_set):
    model = build(input_size=32)
    cfg = tr.TrainConfig(batch_size=8, steps=50, learning_rate=1e-3, augmentation=tr.AugmentationSpec.disabled())
    res = tr.train(model, tiny_set, cfg)
    first, last = res.history[0][1].total, res.history[-1][1].total
    assert last < first


def test_training_deterministic(tiny_set):
    cfg = tr.TrainConfig(batch_size=4, steps=6)
    runs = [tr.train(build(input_size=32), tiny_set, cfg).history for _ in range(2)]
    assert runs[0] == runs[1]


def test_best_checkpoint_selection(tiny_set):
    cfg = tr.TrainConfig(batch_size=4, steps=4, eval_every=2)
    res = tr.train(build(input_size=32), tiny_set[:6], cfg, val_set=tiny_set[6:])
    assert [s for s, _ in res.val_history] == [1, 3]
    assert res.best_val_iou == max(v for _, v in res.val_history)


@pytest.mark.slow
def test_overfit_single_phantom():
    s = generate(PhantomConfig(count=1, size=32, seed=9, lung_extent_range=(0.7, 0.85)))[0]
    model = build(input_size=32)
    cfg = tr.TrainConfig(batch_size=2, steps=500, learning_rate=1e-3, augmentation=tr.AugmentationSpec.disabled())
    tr.train(model, [s], cfg)
    pred = model.predict(s.image[None]) >= 0.5
    assert iou(pred[0, 0], s.heart_mask) >= 0.95
    assert iou(pred[0, 1], s.lungs_mask) >= 0.95


def test_rejects_empty_training_set():
    with pytest.raises(ValueError):
        tr.train(build(input_size=32), [], tr.TrainConfig(steps=1))


def test_divergence_raises(tiny_set, monkeypatch):
    def bad_loss(pred, target):
        total = T.sum(pred) * float("nan")
        return total, tr.LossValue(float("nan"), 0, 0, 0, 0)
    monkeypatch.setattr(tr, "total_loss", bad_loss)
    with pytest.raises(tr.TrainingDivergedError):
        tr.train(build(input_size=32), tiny_set, tr.TrainConfig(steps=1, batch_size=2))
