"""
Services for the detector: group masks, bipartite matching, the set
criterion and NMS-free prediction
"""

import logging
from collections.abc import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from clockdistill.detector.models import Detector
from clockdistill.detector.schemas import Detection, DetectorConfig, StagePredictions
from clockdistill.exceptions import ConfigurationError, ModelNotLoadedError
from clockdistill.geometry.services import box_cxcywh_to_xyxy, elementwise_giou, pairwise_giou
from clockdistill.schemas import BoundingBox, GroundTruthInstance

logger = logging.getLogger("detector")


def build_group_mask(num_regular: int, group_ids: torch.Tensor) -> torch.Tensor:
    """
    Self-attention mask over N regular queries followed by grouped extra queries.
    Regular queries see only each other; an extra query sees the regular queries
    and the members of its own group.
    :param num_regular: N
    :param group_ids: (G,) group id of every extra query
    :return: bool (N+G, N+G), True where attention is allowed
    """
    g = int(group_ids.shape[0])
    mask = torch.zeros(num_regular + g, num_regular + g, dtype=torch.bool)
    mask[:num_regular, :num_regular] = True
    mask[num_regular:, :num_regular] = True
    mask[num_regular:, num_regular:] = group_ids[:, None] == group_ids[None, :]
    return mask


def check_class_ids(gts: Sequence[GroundTruthInstance], num_classes: int) -> None:
    """
    :raises ConfigurationError: when a ground truth uses the no-object index or beyond
    """
    for gt in gts:
        if gt.class_id >= num_classes:
            raise ConfigurationError(
                f"Ground truth class {gt.class_id} is outside the {num_classes} "
                "foreground classes"
            )


def targets_to_tensors(
    gts: Sequence[GroundTruthInstance],
    num_classes: int,
    device: torch.device | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    :param num_classes: foreground classes C
    :return: (K,) labels and (K, 4) center-form boxes
    :raises ConfigurationError: on a class id of C or more
    """
    check_class_ids(gts, num_classes)
    labels = torch.tensor([gt.class_id for gt in gts], dtype=torch.long, device=device)
    boxes = torch.tensor(
        [gt.box.as_tuple() for gt in gts], dtype=torch.float64, device=device
    ).reshape(-1, 4)
    return labels, boxes


def solve_assignment(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """
    Minimum-cost assignment of a rectangular cost matrix
    :return: (row indices, column indices), one pair per row of the smaller side
    """
    rows, cols = linear_sum_assignment(cost)
    return np.asarray(rows), np.asarray(cols)


@torch.no_grad()
def matching_cost(
    class_logits: torch.Tensor,
    boxes: torch.Tensor,
    labels: torch.Tensor,
    gt_boxes: torch.Tensor,
    config: DetectorConfig,
) -> torch.Tensor:
    """
    (N queries, K targets) cost: -p(class) * w_cls + L1 * w_l1 + (1 - GIoU) * w_giou
    """
    prob = class_logits.softmax(-1)[:, labels]
    gt_boxes = gt_boxes.to(boxes.dtype)
    cost_l1 = torch.cdist(boxes, gt_boxes, p=1)
    cost_giou = 1 - pairwise_giou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes))
    return (
        config.loss_class * -prob
        + config.loss_l1 * cost_l1
        + config.loss_giou * cost_giou
    )


def hungarian_match(
    class_logits: torch.Tensor,
    boxes: torch.Tensor,
    gts: Sequence[GroundTruthInstance],
    config: DetectorConfig,
) -> list[tuple[int, int]]:
    """
    One-to-one matching of predictions to ground truths for one image and stage
    :param class_logits: (N, C+1)
    :param boxes: (N, 4) center form
    :param gts: ground truth instances of the image
    :param config: supplies the cost weights
    :return: (query_index, gt_index) pairs ordered by gt index
    """
    if len(gts) > class_logits.shape[0]:
        raise ConfigurationError(
            f"{len(gts)} ground truths cannot be matched to {class_logits.shape[0]} queries"
        )
    if not gts:
        return []
    labels, gt_boxes = targets_to_tensors(gts, config.num_classes, class_logits.device)
    cost = matching_cost(class_logits, boxes, labels, gt_boxes, config)
    queries, targets = solve_assignment(cost.cpu().numpy())
    return sorted(zip(queries.tolist(), targets.tolist()), key=lambda pair: pair[1])


def _stage_loss(
    class_logits: torch.Tensor,
    boxes: torch.Tensor,
    targets: Sequence[Sequence[GroundTruthInstance]],
    config: DetectorConfig,
) -> torch.Tensor:
    batch, n, num_labels = class_logits.shape
    background = num_labels - 1
    target_classes = torch.full(
        (batch, n), background, dtype=torch.long, device=class_logits.device
    )
    matched_pred, matched_gt = [], []
    for b, gts in enumerate(targets):
        pairs = hungarian_match(class_logits[b], boxes[b], gts, config)
        if not pairs:
            continue
        labels, gt_boxes = targets_to_tensors(gts, config.num_classes, boxes.device)
        q_idx = torch.tensor([q for q, _ in pairs], device=boxes.device)
        g_idx = torch.tensor([k for _, k in pairs], device=boxes.device)
        target_classes[b, q_idx] = labels[g_idx]
        matched_pred.append(boxes[b, q_idx])
        matched_gt.append(gt_boxes[g_idx].to(boxes.dtype))

    class_weight = torch.ones(num_labels, dtype=class_logits.dtype, device=class_logits.device)
    class_weight[background] = config.background_weight
    loss_ce = F.cross_entropy(
        class_logits.transpose(1, 2), target_classes, weight=class_weight
    )
    if not matched_pred:
        zero = boxes.sum() * 0
        return config.loss_class * loss_ce + zero
    pred = torch.cat(matched_pred)
    gt = torch.cat(matched_gt)
    num_boxes = max(pred.shape[0], 1)
    loss_l1 = (pred - gt).abs().sum() / num_boxes
    loss_giou = (
        1 - elementwise_giou(box_cxcywh_to_xyxy(pred), box_cxcywh_to_xyxy(gt))
    ).sum() / num_boxes
    return (
        config.loss_class * loss_ce
        + config.loss_l1 * loss_l1
        + config.loss_giou * loss_giou
    )


def detection_loss(
    predictions: StagePredictions,
    targets: Sequence[Sequence[GroundTruthInstance]],
    config: DetectorConfig,
) -> torch.Tensor:
    """
    DETR set criterion summed over all decoder stages. Only the regular query
    columns take part; extra columns never enter matching or L_det.
    :param predictions: decoder outputs, (B, E, G_total, ...)
    :param targets: ground truth instances per image
    :param config: loss weights
    :return: scalar L_det
    """
    regular = predictions.regular() if predictions.num_regular else predictions
    total = regular.class_logits.new_zeros(())
    for e in range(regular.num_stages):
        total = total + _stage_loss(
            regular.class_logits[:, e], regular.boxes[:, e], targets, config
        )
    return total


def postprocess(
    class_logits: torch.Tensor, boxes: torch.Tensor, top_k: int, score_threshold: float
) -> list[Detection]:
    """
    Top-k (query, class) pairs of one image scoring above the threshold, no NMS
    :param class_logits: (N, C+1) final-stage logits
    :param boxes: (N, 4) center form
    """
    if top_k <= 0:
        return []
    scores = class_logits.softmax(-1)[:, :-1]
    num_classes = scores.shape[1]
    flat = scores.flatten()
    k = min(top_k, flat.numel())
    values, indices = flat.topk(k)
    detections = []
    for score, index in zip(values.tolist(), indices.tolist()):
        if score <= score_threshold:
            break
        cx, cy, w, h = boxes[index // num_classes].tolist()
        box = BoundingBox(
            cx=min(max(cx, 0.0), 1.0),
            cy=min(max(cy, 0.0), 1.0),
            w=min(max(w, 1e-6), 1.0),
            h=min(max(h, 1e-6), 1.0),
        )
        detections.append(
            Detection(class_id=index % num_classes, score=min(score, 1.0), box=box)
        )
    return detections


class Predictor:
    """
    Read-only inference over a frozen detector
    """

    def __init__(self, model: Detector | None = None) -> None:
        self.model = model
        if model is not None:
            model.eval()

    @property
    def is_loaded(self) -> bool:
        return self.model is not None

    def load(self, path: str) -> None:
        from clockdistill.checkpoints import load_detector

        self.model, _ = load_detector(path)
        self.model.eval()
        logger.info("Checkpoint loaded", extra={"path": path})

    @torch.no_grad()
    def predict(
        self, image: torch.Tensor, top_k: int = 100, score_threshold: float = 0.0
    ) -> list[Detection]:
        """
        :param image: (3, H, W) in [0, 1]
        :param top_k: maximum number of detections
        :param score_threshold: detections must score strictly above it
        :return: detections sorted by non-increasing score
        """
        if self.model is None:
            raise ModelNotLoadedError("No detector checkpoint has been loaded")
        parameter = next(self.model.parameters())
        images = image.to(device=parameter.device, dtype=parameter.dtype)[None]
        final = self.model(images).stages(-1)
        return postprocess(
            final.class_logits[0, 0], final.boxes[0, 0], top_k, score_threshold
        )
