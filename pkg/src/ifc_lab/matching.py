"""Bipartite prediction/ground-truth matching and the clip-level loss.

Mask terms are pooled over the whole clip volume (T x H' x W'), never
averaged frame by frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    match_dice: float = 1.0  # lambda_0
    dice: float = 1.0  # lambda_1
    focal: float = 1.0  # lambda_2
    neg_downweight: float = 0.1
    dice_eps: float = 1.0

    def __post_init__(self):
        if min(self.match_dice, self.dice, self.focal, self.neg_downweight) < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class GroundTruthInstance:
    category: int  # 0-based dataset class id; the no-object class is num_classes
    mask: np.ndarray  # binary (T, H', W')

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if not self.mask.any():
            raise ContractError("ground-truth instance has no positive voxel in this clip")


@dataclass
class Assignment:
    sigma_hat: dict[int, int]
    num_predictions: int
    total: float = 0.0
    positives: list[tuple[int, int]] = field(init=False)
    negatives: list[int] = field(init=False)

    def __post_init__(self):
        self.positives = sorted(self.sigma_hat.items())
        used = set(self.sigma_hat.values())
        if len(used) != len(self.sigma_hat):
            raise ContractError("assignment is not injective")
        self.negatives = [j for j in range(self.num_predictions) if j not in used]


# --------------------------------------------------------------------------- scores
def dice(s, s_hat, eps: float = 1.0):
    """Smoothed dice ``(2 sum(s*s_hat) + eps) / (sum(s) + sum(s_hat) + eps)`` over all voxels.

    Accepts numpy arrays or tensors (differentiable in ``s_hat``).
    """
    if tuple(np.shape(s)) != tuple(s_hat.shape if isinstance(s_hat, Tensor) else np.shape(s_hat)):
        raise ContractError(f"dice shapes differ: {np.shape(s)} vs {np.shape(s_hat)}")
    if isinstance(s_hat, Tensor):
        st = T.as_tensor(s)
        inter = T.tsum(st * s_hat)
        return (inter * 2.0 + eps) / (T.tsum(st) + T.tsum(s_hat) + eps)
    s = np.asarray(s, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    return float((2.0 * (s * s_hat).sum() + eps) / (s.sum() + s_hat.sum() + eps))


def sigmoid_focal(s, logits: Tensor, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> Tensor:
    """Mean over voxels of ``-alpha_t (1 - p_t)^gamma log p_t``."""
    logits = T.as_tensor(logits)
    s = np.asarray(s, dtype=float)
    if s.shape != logits.shape:
        raise ContractError(f"focal shapes differ: {s.shape} vs {logits.shape}")
    p = T.sigmoid(logits)
    pt = p * s + (1.0 - p) * (1.0 - s)
    alpha_t = alpha * s + (1.0 - alpha) * (1.0 - s)
    logpt = T.log(T.clamp(pt, LOG_FLOOR))
    loss = T.power(1.0 - pt, gamma) * logpt * (-alpha_t)
    return T.mean(loss)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    return -T.log_softmax_lastdim(logits)[target]


def _np_sigmoid(z):
    return T._sigmoid_np(np.asarray(z, dtype=float))


def mask_boxes(masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-frame tight boxes ``(x0, y0, x1, y1)`` normalised to [0, 1] plus a validity flag.

    ``masks`` is (..., T, H, W) boolean-like; empty frames are flagged invalid.
    """
    m = np.asarray(masks) > 0.5
    *lead, H, W = m.shape
    rows = m.any(axis=-1)
    cols = m.any(axis=-2)
    valid = rows.any(axis=-1)
    y0 = np.argmax(rows, axis=-1)
    y1 = H - np.argmax(rows[..., ::-1], axis=-1)
    x0 = np.argmax(cols, axis=-1)
    x1 = W - np.argmax(cols[..., ::-1], axis=-1)
    boxes = np.stack([x0 / W, y0 / H, x1 / W, y1 / H], axis=-1)
    return boxes, valid


def generalized_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    hull = ((np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0]))
            * (np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])))
    return inter / union - (hull - union) / hull


# Cost for a pair with no frame where both boxes exist: worst GIoU term plus a unit L1.
NO_BOX_COST = 3.0


def box_cost(gt_masks: np.ndarray, pred_masks: np.ndarray) -> np.ndarray:
    """(K, N) clip-averaged L1 + (1 - GIoU) over frames where both masks are non-empty."""
    gb, gv = mask_boxes(gt_masks)  # (K, T, 4), (K, T)
    pb, pv = mask_boxes(pred_masks)  # (N, T, 4), (N, T)
    g = gb[:, None]
    p = pb[None, :]
    both = gv[:, None] & pv[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        per_frame = np.abs(g - p).sum(-1) + (1.0 - generalized_iou(g, p))
    per_frame = np.where(both, per_frame, 0.0)
    counts = both.sum(-1)
    return np.where(counts > 0, per_frame.sum(-1) / np.maximum(counts, 1), NO_BOX_COST)


def similarity_matrix(gts: list[GroundTruthInstance], class_probs, mask_logits,
                      weights: LossWeights = LossWeights(), mode: str = "mask") -> np.ndarray:
    """(K, N_q) matching scores; higher is better.

    mask: ``p(c_i) + lambda_0 * Dice(s_i, sigmoid(logits))``
    box:  ``p(c_i) - lambda_0 * box_cost`` on mask-extent boxes
    """
    probs = class_probs.data if isinstance(class_probs, Tensor) else np.asarray(class_probs, dtype=float)
    logits = mask_logits.data if isinstance(mask_logits, Tensor) else np.asarray(mask_logits, dtype=float)
    K, N = len(gts), probs.shape[0]
    if K > N:
        raise ContractError(f"{K} ground-truth instances exceed {N} predictions")
    if K == 0:
        return np.zeros((0, N))
    cats = np.array([g.category for g in gts])
    cls_term = probs[:, cats].T  # (K, N)
    gmask = np.stack([g.mask for g in gts])
    if mode == "mask":
        pm = _np_sigmoid(logits).reshape(N, -1)
        gm = gmask.reshape(K, -1)
        inter = gm @ pm.T
        eps = weights.dice_eps
        d = (2.0 * inter + eps) / (gm.sum(1)[:, None] + pm.sum(1)[None, :] + eps)
        return cls_term + weights.match_dice * d
    if mode == "box":
        return cls_term - weights.match_dice * box_cost(gmask, logits > 0.0)
    raise ContractError(f"unknown matching mode {mode!r}")


# --------------------------------------------------------------------------- assignment
def _min_cost_assignment(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method for an n x m cost matrix, n <= m.

    Returns, for each row, its assigned column.
    """
    n, m = cost.shape
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)  # p[j]: row (1-based) matched to column j, 0 if free
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows = np.full(n, -1)
    for j in range(1, m + 1):
        if p[j]:
            rows[p[j] - 1] = j - 1
    return rows


def hungarian_max(scores) -> Assignment:
    """Injective row -> column assignment maximising the summed score."""
    s = np.asarray(scores, dtype=float)
    if s.ndim != 2:
        raise ContractError("scores must be a matrix")
    K, N = s.shape
    if not np.isfinite(s).all():
        raise ContractError("scores must be finite")
    if K == 0 or N == 0:
        return Assignment({}, N, 0.0)
    if K <= N:
        cols = _min_cost_assignment(-s)
        sigma = {i: int(cols[i]) for i in range(K)}
    else:
        rows = _min_cost_assignment(-s.T)
        sigma = {int(rows[j]): j for j in range(N)}
    total = math.fsum(s[i, j] for i, j in sigma.items())  # correctly rounded, order-free
    return Assignment(sigma, N, total)


# --------------------------------------------------------------------------- loss
def clip_loss(gts: list[GroundTruthInstance], class_logits: Tensor, mask_logits: Tensor,
              assignment: Assignment, weights: LossWeights = LossWeights(),
              no_object: int | None = None) -> tuple[Tensor, dict[str, float]]:
    """Positive-pair CE + dice + focal, plus down-weighted no-object CE on negatives.

    The assignment is a constant; gradients flow into the logits only.
    """
    if no_object is None:
        no_object = class_logits.shape[-1] - 1
    logp = T.log_softmax_lastdim(class_logits)
    terms = {"ce": 0.0, "dice": 0.0, "focal": 0.0, "neg": 0.0}
    total = None
    for gi, pj in assignment.positives:
        gt = gts[gi]
        ce = -logp[pj, gt.category]
        ml = mask_logits[pj]
        d = 1.0 - dice(gt.mask, T.sigmoid(ml), weights.dice_eps)
        f = sigmoid_focal(gt.mask, ml)
        pair = ce + d * weights.dice + f * weights.focal
        terms["ce"] += ce.item()
        terms["dice"] += d.item()
        terms["focal"] += f.item()
        total = pair if total is None else total + pair
    if assignment.negatives:
        idx = np.array(assignment.negatives)
        neg = -T.tsum(logp[idx, no_object]) * weights.neg_downweight
        terms["neg"] = neg.item()
        total = neg if total is None else total + neg
    if total is None:
        total = T.tsum(class_logits) * 0.0
    return total, terms
