"""Space-time mask AP / AR over video-level instances."""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))
    per_category: bool = True
    max_detections: int = 10
    num_classes: int = 3

    def __post_init__(self):
        th = np.asarray(self.iou_thresholds)
        if len(th) == 0 or np.any(np.diff(th) <= 0) or th[0] <= 0 or th[-1] >= 1:
            raise ContractError("IoU thresholds must be strictly increasing inside (0, 1)")


@dataclass
class PredictedInstance:
    video_id: str
    category: int
    score: float
    masks: np.ndarray  # bool (N, H, W)
    track_id: int = 0


@dataclass
class GTInstance:
    video_id: str
    category: int
    masks: np.ndarray  # bool (N, H, W)


@dataclass
class EvalResult:
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    AR1: float = 0.0
    AR10: float = 0.0
    per_category: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["per_category"] = {str(k): v for k, v in self.per_category.items()}
        return d

    def write(self, json_path, csv_path=None) -> None:
        Path(json_path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))
        if csv_path is not None:
            with open(csv_path, "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["category", "AP", "AP50", "AP75", "AR1", "AR10"])
                for c, m in sorted(self.per_category.items()):
                    w.writerow([c, m["AP"], m["AP50"], m["AP75"], m["AR1"], m["AR10"]])


def video_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractError(f"video IoU needs equal extents, got {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(pred, gt).sum() / union)


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """All-point interpolated AP from TP flags of score-ranked detections."""
    if num_gt == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _rank(preds: list[PredictedInstance]) -> list[PredictedInstance]:
    # ties: lower track id first, then video id for a total order
    return sorted(preds, key=lambda p: (-p.score, p.track_id, p.video_id))


def _limit_per_video(preds: list[PredictedInstance], k: int) -> list[PredictedInstance]:
    per_video: dict[str, list] = defaultdict(list)
    for p in _rank(preds):
        if len(per_video[p.video_id]) < k:
            per_video[p.video_id].append(p)
    return [p for ps in per_video.values() for p in ps]


def greedy_tp(preds: list[PredictedInstance], gts: list[GTInstance], threshold: float,
              ious: dict | None = None) -> np.ndarray:
    """Match ranked predictions to the best still-unmatched GT of the same video."""
    ranked = _rank(preds)
    taken: set[int] = set()
    tp = np.zeros(len(ranked))
    for r, p in enumerate(ranked):
        best, best_iou = -1, threshold
        for g_idx, g in enumerate(gts):
            if g.video_id != p.video_id or g_idx in taken:
                continue
            iou = ious[(id(p), g_idx)] if ious is not None else video_iou(p.masks, g.masks)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g_idx, iou
        if best >= 0:
            taken.add(best)
            tp[r] = 1.0
    return tp


def evaluate(predictions: list[PredictedInstance], ground_truth: list[GTInstance],
             cfg: EvalConfig = EvalConfig()) -> EvalResult:
    for p in predictions:
        if not 0 <= p.category < cfg.num_classes:
            raise ContractError(f"prediction has unknown category {p.category}")
    for g in ground_truth:
        if not 0 <= g.category < cfg.num_classes:
            raise ContractError(f"ground truth has unknown category {g.category}")

    thresholds = list(cfg.iou_thresholds)
    extra = [t for t in (0.5, 0.75) if not any(np.isclose(t, x) for x in thresholds)]
    all_th = sorted(thresholds + extra)

    per_cat: dict[int, dict[str, float]] = {}
    for c in range(cfg.num_classes):
        gts = [g for g in ground_truth if g.category == c]
        if not gts:
            continue
        preds = _limit_per_video([p for p in predictions if p.category == c], cfg.max_detections)
        ious = {(id(p), gi): video_iou(p.masks, g.masks)
                for p in preds for gi, g in enumerate(gts) if g.video_id == p.video_id}
        ap_at = {}
        for th in all_th:
            ap_at[th] = average_precision(greedy_tp(preds, gts, th, ious), len(gts))

        def recall_at(k):
            top = _limit_per_video(preds, k)
            return float(np.mean([greedy_tp(top, gts, th, ious).sum() / len(gts) for th in thresholds]))

        per_cat[c] = {
            "AP": float(np.mean([ap_at[t] for t in thresholds])),
            "AP50": ap_at[_closest(all_th, 0.5)],
            "AP75": ap_at[_closest(all_th, 0.75)],
            "AR1": recall_at(1),
            "AR10": recall_at(10),
        }

    if not per_cat:
        return EvalResult()
    keys = ("AP", "AP50", "AP75", "AR1", "AR10")
    means = {k: float(np.mean([m[k] for m in per_cat.values()])) for k in keys}
    return EvalResult(**means, per_category=per_cat if cfg.per_category else {})


def _closest(values, target):
    return min(values, key=lambda v: abs(v - target))
