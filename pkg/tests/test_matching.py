import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ifc_lab import tensor as T
from ifc_lab.matching import (Assignment, GroundTruthInstance, LossWeights, box_cost, clip_loss, cross_entropy, dice,
                              generalized_iou, hungarian_max, mask_boxes, sigmoid_focal, similarity_matrix)
from ifc_lab.tensor import ContractError, Tensor

from conftest import grad_check


def brute_force_max(s: np.ndarray) -> float:
    K, N = s.shape
    if K <= N:
        return max(math.fsum(s[i, p[i]] for i in range(K)) for p in itertools.permutations(range(N), K))
    return max(math.fsum(s[p[j], j] for j in range(N)) for p in itertools.permutations(range(K), N))


# ------------------------------------------------------------------ dice / focal
def test_dice_hand_values():
    assert dice([1, 1, 0, 0], np.array([1.0, 0, 1, 0]), eps=0.0) == 0.5
    assert dice([1, 1, 0, 0], np.array([1.0, 0, 1, 0]), eps=1.0) == pytest.approx(3 / 5)
    m = (np.random.default_rng(0).random((3, 8, 8)) > 0.5).astype(float)
    assert abs(dice(m, m) - 1.0) < 1e-6
    a = np.zeros((2, 48, 48)); a[:, :10] = 1
    b = np.zeros((2, 48, 48)); b[:, 20:30] = 1
    assert dice(a, b) < 1e-3


def test_dice_is_pooled_over_the_clip():
    gt = np.ones((4, 5, 5))
    pred = gt.copy()
    pred[2:] = 0.0
    pooled = dice(gt, pred, eps=0.0)
    per_frame = np.mean([dice(gt[t], pred[t], eps=0.0) if pred[t].any() else 0.0 for t in range(4)])
    assert pooled == pytest.approx(2 * 50 / (100 + 50))
    assert per_frame == pytest.approx(0.5)
    assert pooled != per_frame


def test_focal_hand_values():
    assert sigmoid_focal(np.array([1.0]), Tensor([0.0])).item() == pytest.approx(0.25 * 0.25 * np.log(2), abs=1e-6)
    assert sigmoid_focal(np.array([0.0]), Tensor([0.0])).item() == pytest.approx(0.75 * 0.25 * np.log(2), abs=1e-6)
    s = np.array([1.0, 0.0, 1.0])
    assert sigmoid_focal(s, Tensor([30.0, -30.0, 30.0])).item() < 1e-6


@given(st.integers(1, 6), st.integers(0, 10**6))
@settings(max_examples=30, deadline=None)
def test_dice_and_focal_ranges(n, seed):
    rng = np.random.default_rng(seed)
    s = (rng.random(n) > 0.5).astype(float)
    z = rng.normal(size=n) * 4
    d = dice(s, T._sigmoid_np(z))
    assert 0.0 <= d <= 1.0
    assert sigmoid_focal(s, Tensor(z)).item() >= 0.0


# ------------------------------------------------------------------ similarity
def _gt(cat, mask):
    return GroundTruthInstance(cat, np.asarray(mask, dtype=float))


def test_similarity_formula():
    mask = np.zeros((1, 1, 10)); mask[0, 0, :4] = 1  # dice with eps=0 computed below
    pm = np.full((1, 1, 10), -50.0); pm[0, 0, :4] = 50.0; pm[0, 0, 4:6] = 50.0
    probs = np.array([[0.9, 0.05, 0.05, 0.0]])
    w = LossWeights(dice_eps=0.0)
    s = similarity_matrix([_gt(0, mask)], probs, pm[None], w)
    assert s[0, 0] == pytest.approx(0.9 + 2 * 4 / (4 + 6))
    assert s[0, 0] == pytest.approx(1.7)


def test_similarity_impossible_and_symmetric():
    mask = np.zeros((2, 6, 6)); mask[:, :3] = 1
    logits = np.full((3, 2, 6, 6), -40.0); logits[:, :, 3:] = 40.0
    probs = np.array([[0.0, 0.5, 0.5, 0.0]] * 3)
    s = similarity_matrix([_gt(0, mask)], probs, logits)
    assert np.all(s < 0.05)
    assert np.all(s == s[:, :1])
    with pytest.raises(ContractError):
        similarity_matrix([_gt(0, mask)] * 4, probs, logits)


def test_box_mode_prefers_overlapping_boxes():
    gt = np.zeros((2, 10, 10)); gt[:, 2:5, 2:5] = 1
    near = np.full((2, 10, 10), -9.0); near[:, 2:5, 2:6] = 9.0
    far = np.full((2, 10, 10), -9.0); far[:, 7:9, 7:9] = 9.0
    probs = np.full((2, 4), 0.25)
    s = similarity_matrix([_gt(1, gt)], probs, np.stack([near, far]), mode="box")
    assert s[0, 0] > s[0, 1]
    with pytest.raises(ContractError):
        similarity_matrix([_gt(1, gt)], probs, np.stack([near, far]), mode="nope")


def test_boxes_and_giou():
    m = np.zeros((2, 4, 4)); m[0, 1:3, 0:2] = 1
    boxes, valid = mask_boxes(m)
    np.testing.assert_allclose(boxes[0], [0.0, 0.25, 0.5, 0.75])
    assert valid.tolist() == [True, False]
    a = np.array([0.0, 0.0, 1.0, 1.0])
    assert generalized_iou(a, a) == pytest.approx(1.0)
    assert generalized_iou(a, np.array([2.0, 0.0, 3.0, 1.0])) == pytest.approx(-1 / 3)
    c = box_cost(m[None], np.zeros((1, 2, 4, 4)))
    assert c[0, 0] == 3.0


# ------------------------------------------------------------------ hungarian
def test_hungarian_hand_cases():
    a = hungarian_max([[1.0, 2.0], [2.0, 1.0]])
    assert a.sigma_hat == {0: 1, 1: 0} and a.total == 4.0
    d = np.eye(4) * 10 + np.random.default_rng(0).random((4, 4))
    assert hungarian_max(d).sigma_hat == {i: i for i in range(4)}
    e = hungarian_max(np.zeros((0, 3)))
    assert e.sigma_hat == {} and e.negatives == [0, 1, 2]


@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1), st.booleans())
@settings(max_examples=60, deadline=None)
def test_hungarian_matches_brute_force(K, N, seed, ties):
    rng = np.random.default_rng(seed)
    s = rng.integers(0, 3, size=(K, N)).astype(float) if ties else rng.normal(size=(K, N))
    a = hungarian_max(s)
    assert a.total == brute_force_max(s)
    assert len(a.sigma_hat) == min(K, N)
    cols = list(a.sigma_hat.values())
    assert len(set(cols)) == len(cols)
    if K <= N:
        assert sorted(a.negatives + cols) == list(range(N))


def test_assignment_rejects_non_injective():
    with pytest.raises(ContractError):
        Assignment({0: 1, 1: 1}, 3)


# ------------------------------------------------------------------ clip loss
def _np_log_softmax(z):
    z = z - z.max(-1, keepdims=True)
    return z - np.log(np.exp(z).sum(-1, keepdims=True))


def test_clip_loss_hand_case():
    rng = np.random.default_rng(0)
    mask = (rng.random((2, 3, 3)) > 0.5).astype(float)
    mask[0, 0, 0] = 1
    cl = rng.normal(size=(2, 4))
    ml = rng.normal(size=(2, 2, 3, 3))
    loss, terms = clip_loss([_gt(2, mask)], Tensor(cl), Tensor(ml), Assignment({0: 1}, 2))
    lp = _np_log_softmax(cl)
    p = 1 / (1 + np.exp(-ml[1]))
    d = (2 * (mask * p).sum() + 1) / (mask.sum() + p.sum() + 1)
    pt = p * mask + (1 - p) * (1 - mask)
    at = 0.25 * mask + 0.75 * (1 - mask)
    focal = np.mean(-at * (1 - pt) ** 2 * np.log(pt))
    expected = -lp[1, 2] + (1 - d) + focal + 0.1 * -lp[0, 3]
    assert loss.item() == pytest.approx(expected, rel=1e-12)
    assert terms["neg"] == pytest.approx(0.1 * -lp[0, 3])


def test_clip_loss_full_assignment_has_no_negative_term():
    mask = np.ones((1, 2, 2))
    _, terms = clip_loss([_gt(0, mask)], Tensor(np.zeros((1, 4))), Tensor(np.zeros((1, 1, 2, 2))),
                         Assignment({0: 0}, 1))
    assert terms["neg"] == 0.0


def test_clip_loss_perfect_predictions_vanish():
    m1 = np.zeros((2, 4, 4)); m1[:, :2] = 1
    m2 = np.zeros((2, 4, 4)); m2[:, 2:] = 1
    gts = [_gt(0, m1), _gt(1, m2)]
    cl = np.full((3, 4), -40.0)
    cl[0, 0] = cl[1, 1] = cl[2, 3] = 40.0
    ml = np.stack([m1 * 80 - 40, m2 * 80 - 40, np.zeros((2, 4, 4))])
    a = hungarian_max(similarity_matrix(gts, T.softmax(Tensor(cl)).data, ml))
    loss, _ = clip_loss(gts, Tensor(cl), Tensor(ml), a)
    # dice smoothing leaves (1 - dice) = 0 exactly for a perfect mask
    assert loss.item() < 1e-4


def test_loss_invariant_to_prediction_order():
    rng = np.random.default_rng(4)
    gts = [_gt(k % 3, rng.random((2, 4, 4)) > 0.4) for k in range(3)]
    cl, ml = rng.normal(size=(6, 4)), rng.normal(size=(6, 2, 4, 4))
    perm = rng.permutation(6)

    def loss(c, m):
        a = hungarian_max(similarity_matrix(gts, T.softmax(Tensor(c)).data, m))
        return a, clip_loss(gts, Tensor(c), Tensor(m), a)[0].item()

    a1, l1 = loss(cl, ml)
    a2, l2 = loss(cl[perm], ml[perm])
    assert l1 == l2
    assert {i: int(perm[j]) for i, j in a2.sigma_hat.items()} == a1.sigma_hat


def test_clip_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    for trial in range(20):
        K, N = rng.integers(1, 3), 3
        masks = [(rng.random((2, 3, 3)) > 0.5).astype(float) for _ in range(K)]
        gts = [_gt(int(rng.integers(3)), m if m.any() else np.ones_like(m)) for m in masks]
        cl = Tensor(rng.normal(size=(N, 4)), requires_grad=True)
        ml = Tensor(rng.normal(size=(N, 2, 3, 3)), requires_grad=True)
        a = hungarian_max(similarity_matrix(gts, T.softmax(Tensor(cl.data)).data, ml.data))
        err = grad_check(lambda: clip_loss(gts, cl, ml, a)[0], [cl, ml])
        assert err < 1e-4, err


def test_dice_focal_ce_gradients():
    rng = np.random.default_rng(9)
    for _ in range(20):
        s = (rng.random((2, 3, 3)) > 0.5).astype(float)
        z = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        assert grad_check(lambda: dice(s, T.sigmoid(z)), [z]) < 1e-4
        assert grad_check(lambda: sigmoid_focal(s, z), [z]) < 1e-4
        c = Tensor(rng.normal(size=5), requires_grad=True)
        target = int(rng.integers(5))
        assert grad_check(lambda: cross_entropy(c, target), [c]) < 1e-4
