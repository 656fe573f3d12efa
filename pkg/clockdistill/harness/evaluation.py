"""
COCO-style average precision: greedy score-ordered matching per image and
class, 101-point interpolated precision, IoU thresholds .50:.05:.95
"""

from collections.abc import Sequence

import numpy as np
import torch

from clockdistill.data.schemas import SizeStratum
from clockdistill.data.services import size_stratum
from clockdistill.detector.schemas import Detection
from clockdistill.geometry.services import box_cxcywh_to_xyxy, pairwise_iou
from clockdistill.harness.schemas import EvalReport
from clockdistill.schemas import BoundingBox, GroundTruthInstance

IOU_THRESHOLDS: np.ndarray = np.linspace(0.5, 0.95, 10)
RECALL_THRESHOLDS: np.ndarray = np.linspace(0.0, 1.0, 101)
MAX_DETECTIONS = 100


def _corners(boxes: Sequence[BoundingBox]) -> torch.Tensor:
    values = torch.tensor([b.as_tuple() for b in boxes], dtype=torch.float64)
    return box_cxcywh_to_xyxy(values.reshape(-1, 4))


def _match_image(
    detections: Sequence[Detection],
    gts: Sequence[GroundTruthInstance],
    gt_ignore: np.ndarray,
    det_outside: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Matches one image's detections of a single class, already in score order
    :return: (T, D) matched flags and (T, D) ignore flags
    """
    num_dets = len(detections)
    matched = np.zeros((len(IOU_THRESHOLDS), num_dets), dtype=bool)
    ignored = np.zeros((len(IOU_THRESHOLDS), num_dets), dtype=bool)
    if not num_dets:
        return matched, ignored
    if gts:
        ious = pairwise_iou(
            _corners([d.box for d in detections]), _corners([g.box for g in gts])
        ).numpy()
    else:
        ious = np.zeros((num_dets, 0))
    # non-ignored ground truths are preferred
    gt_order = np.argsort(gt_ignore, kind="stable")
    for t, threshold in enumerate(IOU_THRESHOLDS):
        taken = np.zeros(len(gts), dtype=bool)
        for d in range(num_dets):
            best, best_iou = -1, min(threshold, 1 - 1e-10)
            for g in gt_order:
                if taken[g]:
                    continue
                # once a regular match exists, ignored boxes cannot replace it
                if best > -1 and not gt_ignore[best] and gt_ignore[g]:
                    break
                if ious[d, g] < best_iou:
                    continue
                best, best_iou = int(g), float(ious[d, g])
            if best > -1:
                taken[best] = True
                matched[t, d] = True
                ignored[t, d] = bool(gt_ignore[best])
            else:
                ignored[t, d] = bool(det_outside[d])
    return matched, ignored


def interpolated_precision(tp: np.ndarray, fp: np.ndarray, num_gts: int) -> float:
    """
    101-point interpolated AP from score-ordered true/false positive flags
    """
    tp_sum = np.cumsum(tp, dtype=np.float64)
    fp_sum = np.cumsum(fp, dtype=np.float64)
    recall = tp_sum / num_gts
    precision = tp_sum / np.maximum(tp_sum + fp_sum, np.finfo(np.float64).eps)
    # precision envelope, non-increasing in recall
    for i in range(len(precision) - 1, 0, -1):
        precision[i - 1] = max(precision[i - 1], precision[i])
    indices = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    sampled = np.zeros(len(RECALL_THRESHOLDS))
    valid = indices < len(precision)
    sampled[valid] = precision[indices[valid]]
    return float(sampled.mean())


def _class_precision(
    predictions: Sequence[Sequence[Detection]],
    targets: Sequence[Sequence[GroundTruthInstance]],
    class_id: int,
    image_size: int,
    stratum: SizeStratum | None,
) -> np.ndarray | None:
    """
    AP per IoU threshold for one class, None when it has no ground truth
    """
    pixel_area = float(image_size * image_size)
    scores, matched_all, ignored_all = [], [], []
    num_gts = 0
    for detections, gts in zip(predictions, targets):
        class_gts = [g for g in gts if g.class_id == class_id]
        class_dets = sorted(
            (d for d in detections if d.class_id == class_id),
            key=lambda d: -d.score,
        )[:MAX_DETECTIONS]
        if stratum is None:
            gt_ignore = np.zeros(len(class_gts), dtype=bool)
            det_outside = np.zeros(len(class_dets), dtype=bool)
        else:
            gt_ignore = np.array(
                [size_stratum(g.box.area * pixel_area, image_size) != stratum for g in class_gts],
                dtype=bool,
            )
            det_outside = np.array(
                [size_stratum(d.box.area * pixel_area, image_size) != stratum for d in class_dets],
                dtype=bool,
            )
        num_gts += int((~gt_ignore).sum())
        matched, ignored = _match_image(class_dets, class_gts, gt_ignore, det_outside)
        scores.extend(d.score for d in class_dets)
        matched_all.append(matched)
        ignored_all.append(ignored)
    if num_gts == 0:
        return None
    if not scores:
        return np.zeros(len(IOU_THRESHOLDS))
    order = np.argsort(-np.asarray(scores), kind="mergesort")
    matched = np.concatenate(matched_all, axis=1)[:, order]
    ignored = np.concatenate(ignored_all, axis=1)[:, order]
    result = np.zeros(len(IOU_THRESHOLDS))
    for t in range(len(IOU_THRESHOLDS)):
        keep = ~ignored[t]
        tp = matched[t][keep]
        result[t] = interpolated_precision(tp, ~tp, num_gts)
    return result


def _mean(values: list[np.ndarray], column: int | None = None) -> float | None:
    if not values:
        return None
    stacked = np.stack(values)
    return float(stacked.mean() if column is None else stacked[:, column].mean())


def evaluate_detections(
    predictions: Sequence[Sequence[Detection]],
    targets: Sequence[Sequence[GroundTruthInstance]],
    class_names: Sequence[str],
    image_size: int,
) -> EvalReport:
    """
    COCO-style AP over a split. Classes without ground truth are left out of
    the means; a stratum with no ground truth reports None.
    :param predictions: detections per image
    :param targets: ground truths per image, same order
    :param class_names: name per class id
    :param image_size: image side in pixels, scales the size strata
    :return: report with AP, AP50, AP75, per-stratum and per-class AP
    """
    if len(predictions) != len(targets):
        raise ValueError("Predictions and targets must cover the same images")
    per_class: dict[str, float | None] = {}
    overall: list[np.ndarray] = []
    for class_id, name in enumerate(class_names):
        result = _class_precision(predictions, targets, class_id, image_size, None)
        per_class[name] = None if result is None else float(result.mean())
        if result is not None:
            overall.append(result)
    strata: dict[SizeStratum, float | None] = {}
    for stratum in SizeStratum:
        results = [
            r
            for c in range(len(class_names))
            if (r := _class_precision(predictions, targets, c, image_size, stratum))
            is not None
        ]
        strata[stratum] = _mean(results)
    return EvalReport(
        ap=_mean(overall),
        ap50=_mean(overall, 0),
        ap75=_mean(overall, 5),
        ap_small=strata[SizeStratum.SMALL],
        ap_medium=strata[SizeStratum.MEDIUM],
        ap_large=strata[SizeStratum.LARGE],
        per_class=per_class,
        num_images=len(predictions),
        num_detections=sum(len(d) for d in predictions),
    )
