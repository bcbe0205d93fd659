import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bcaf.losses import LossConfig, class_frequencies, dice_loss, median_freq_weights, total_loss, weighted_ce
from bcaf.metrics import ConfusionTally, iou_report, miou, oracle_fusion, oracle_select

from oracles import ce_loop, dice_loop, fd_check, iou_loop, miou_loop, oracle_pick_loop

D = torch.float64


# ----------------------------------------------------------------------------- weights

def test_median_freq_hand_values():
    assert np.allclose(median_freq_weights([0.5, 0.25, 0.25]), [0.5, 1.0, 1.0], atol=1e-5)
    w = median_freq_weights([0.9, 0.1, 0.0])
    assert np.allclose(w[:2], [0.5 / 0.9, 5.0], atol=1e-5)
    assert abs(w[2] - 5e5) / 5e5 < 1e-9


def test_median_freq_uniform_and_errors():
    assert np.allclose(median_freq_weights([0.25] * 4), 1.0, atol=1e-5)
    with pytest.raises(ValueError):
        median_freq_weights([0.0, 0.0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=st.floats(0.01, 1.0)), st.floats(0.1, 10.0))
def test_median_freq_scale_invariance(f, c):
    a, b = median_freq_weights(f), median_freq_weights(f * c)
    # only the eps in the denominator breaks exact invariance
    assert np.all(np.abs(a - b) / a <= 1e-6 / f.min() * max(c, 1 / c) + 1e-12)


def test_class_frequencies():
    masks = [np.array([[0, 1], [1, 2]]), np.array([[0, 0], [0, 0]])]
    assert np.allclose(class_frequencies(masks, 3), [5 / 8, 2 / 8, 1 / 8])


# ----------------------------------------------------------------------------- CE / Dice / total

def test_ce_uniform_two_class_is_ln2():
    logits = torch.zeros(1, 2, 3, 3, dtype=D)
    labels = torch.randint(0, 2, (1, 3, 3))
    assert abs(weighted_ce(logits, labels).item() - math.log(2)) <= 1e-8


def test_ce_confident_correct_near_zero():
    labels = torch.randint(0, 3, (1, 4, 4))
    logits = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).to(D) * 50
    assert weighted_ce(logits, labels).item() < 1e-20


def test_ce_matches_loop_oracle():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(1, 3, 3, 3, generator=g, dtype=D)
    labels = torch.randint(0, 3, (1, 3, 3), generator=g)
    w = torch.tensor([0.3, 1.2, 2.5], dtype=D)
    assert abs(weighted_ce(logits, labels, w).item() - ce_loop(logits[0].numpy(), labels[0].numpy(), w.numpy())) <= 1e-8
    assert abs(weighted_ce(logits, labels).item() - ce_loop(logits[0].numpy(), labels[0].numpy())) <= 1e-8


def test_ce_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        weighted_ce(torch.zeros(1, 2, 2, 2), torch.full((1, 2, 2), 2))


def test_dice_perfect_and_absent_class():
    labels = torch.tensor([[[0, 1], [1, 0]]])
    probs = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).to(D)
    # class 2 is absent from both: eps / eps = 1
    assert abs(dice_loss(probs, labels).item()) <= 1e-8


def test_dice_matches_loop_oracle():
    g = torch.Generator().manual_seed(1)
    probs = torch.randn(1, 2, 4, 4, generator=g, dtype=D).softmax(1)
    labels = torch.randint(0, 2, (1, 4, 4), generator=g)
    assert abs(dice_loss(probs, labels).item() - dice_loop(probs[0].numpy(), labels[0].numpy())) <= 1e-8


def test_total_linear_combination_and_recomposition():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(2, 4, 5, 5, generator=g, dtype=D)
    labels = torch.randint(0, 4, (2, 5, 5), generator=g)
    cfg = LossConfig(class_weights=[0.5, 1.0, 2.0, 1.5])
    w = torch.tensor(cfg.class_weights, dtype=D)
    ref = 0.5 * weighted_ce(logits, labels, w) + 1.5 * dice_loss(logits.softmax(1), labels, 1.0)
    assert abs(total_loss(logits, labels, cfg).item() - ref.item()) <= 1e-10


def test_total_perfect_prediction_near_zero():
    labels = torch.randint(0, 3, (1, 6, 6), generator=torch.Generator().manual_seed(3))
    for c in range(3):
        labels[0, 0, c] = c
    logits = torch.nn.functional.one_hot(labels, 3).permute(0, 3, 1, 2).to(D) * 60
    assert total_loss(logits, labels).item() < 1e-10


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(dice_eps=0)
    with pytest.raises(ValueError):
        LossConfig(class_weights=[1.0, -1.0])


def test_total_loss_gradient():
    g = torch.Generator().manual_seed(4)
    logits = torch.randn(1, 3, 4, 4, generator=g, dtype=D, requires_grad=True)
    labels = torch.randint(0, 3, (1, 4, 4), generator=g)
    cfg = LossConfig(class_weights=[0.7, 1.3, 2.0])
    assert fd_check(lambda: total_loss(logits, labels, cfg), [logits], samples=20) < 1e-4


# ----------------------------------------------------------------------------- IoU

def test_iou_perfect_and_disjoint():
    labels = np.array([[0, 1], [2, 2]])
    rep = iou_report(ConfusionTally(3).update(labels, labels))
    assert rep["miou"] == 1.0 and all(v == 1.0 for v in rep["per_class_iou"].values())
    pred = np.array([[0, 2], [1, 1]])
    assert iou_report(ConfusionTally(3).update(pred, labels))["per_class_iou"]["1"] == 0.0


def test_iou_hand_counted_case():
    labels = np.zeros((4, 4), dtype=int)
    labels[0, :] = 1
    labels[1, 0] = 1  # 5 positives
    pred = np.zeros((4, 4), dtype=int)
    pred[0, :3] = 1  # TP = 3
    pred[2, 0] = 1  # FP = 1; FN = 2
    t = ConfusionTally(2).update(pred, labels)
    assert (t.tp[1], t.fp[1], t.fn[1]) == (3, 1, 2)
    assert iou_report(t)["per_class_iou"]["1"] == 0.5


def test_iou_undefined_class_excluded_with_warning():
    labels = np.array([[0, 1], [1, 0]])
    with pytest.warns(UserWarning, match="undefined"):
        rep = iou_report(ConfusionTally(3).update(labels, labels))
    assert rep["per_class_iou"]["2"] is None and rep["miou"] == 1.0


def test_empty_tally_error():
    with pytest.raises(ValueError, match="empty"):
        iou_report(ConfusionTally(3))


def test_report_json_fields():
    rep = iou_report(ConfusionTally(2).update([0, 1], [0, 1]), ["bg", "a"])
    assert set(rep) == {"per_class_iou", "miou", "pixels"} and rep["pixels"] == 2
    assert set(rep["per_class_iou"]) == {"bg", "a"}


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(1, 40), st.integers(0, 2 ** 31 - 1))
def test_iou_matches_loop_and_is_order_invariant(n, size, seed):
    rng = np.random.default_rng(seed)
    pred, labels = rng.integers(0, n, size), rng.integers(0, n, size)
    t = ConfusionTally(n).update(pred, labels)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rep = iou_report(t)
    loop = iou_loop(pred, labels, n)
    for c in range(n):
        a, b = rep["per_class_iou"][str(c)], loop[c]
        assert (a is None and b is None) or abs(a - b) < 1e-12
    perm = rng.permutation(size)
    assert np.array_equal(ConfusionTally(n).update(pred[perm], labels[perm]).matrix, t.matrix)
    half = size // 2
    parts = ConfusionTally(n).update(pred[:half], labels[:half]).merge(ConfusionTally(n).update(pred[half:], labels[half:]))
    assert np.array_equal(parts.matrix, t.matrix)


def test_tally_merge_mismatch_and_monotone():
    a = ConfusionTally(3).update([1, 2], [1, 1])
    before = a.matrix.copy()
    a.update([0], [2])
    assert np.all(a.matrix >= before)
    with pytest.raises(ValueError):
        a.merge(ConfusionTally(4))


# ----------------------------------------------------------------------------- oracle fusion

def test_oracle_rgb_perfect():
    labels = np.array([[0, 1, 2], [2, 1, 0], [1, 1, 1]])
    hsi = np.zeros_like(labels)
    assert miou(oracle_fusion(labels, hsi, labels, 3)) == 1.0


def test_oracle_both_wrong_keeps_rgb_under_rgb_fallback():
    labels = np.zeros((3, 3), dtype=int)
    rgb, hsi = np.ones_like(labels), np.full_like(labels, 2)
    assert np.array_equal(oracle_fusion(rgb, hsi, labels, 3, fallback="rgb").matrix,
                          ConfusionTally(3).update(rgb, labels).matrix)


def test_oracle_complementary_3x3_brute_force():
    labels = np.array([[1, 1, 2], [0, 2, 2], [1, 0, 0]])
    rgb = np.array([[1, 0, 2], [0, 1, 1], [1, 2, 0]])
    hsi = np.array([[0, 1, 2], [1, 2, 1], [2, 0, 0]])
    for fb, fb_hsi in (("rgb", False), ("hsi", True)):
        ref = oracle_pick_loop(rgb, hsi, labels, fb_hsi)
        assert np.array_equal(oracle_select(rgb, hsi, labels, 3, fb), ref)
    assert abs(miou(oracle_fusion(rgb, hsi, labels, 3, "rgb")) - miou_loop(oracle_pick_loop(rgb, hsi, labels, False), labels, 3)) < 1e-12


def test_oracle_grid_mismatch():
    with pytest.raises(ValueError, match="grid mismatch"):
        oracle_select(np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), 2)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 5), st.integers(1, 30), st.integers(0, 2 ** 31 - 1))
def test_oracle_dominates_both_modalities(n, size, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, n, size)
    rgb, hsi = rng.integers(0, n, size), rng.integers(0, n, size)
    # mix in correct pixels so both modalities are partly right
    rgb = np.where(rng.random(size) < 0.4, labels, rgb)
    hsi = np.where(rng.random(size) < 0.4, labels, hsi)
    m = lambda p: miou(ConfusionTally(n).update(p, labels))
    pick = oracle_select(rgb, hsi, labels, n)
    o, a, b = m(pick), m(rgb), m(hsi)
    if np.isnan(o):
        # no foreground in labels or oracle: the oracle is then pixel-exact
        assert np.array_equal(pick, labels)
        return
    assert all(np.isnan(x) or o >= x for x in (a, b))
