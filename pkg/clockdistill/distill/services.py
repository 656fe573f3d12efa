"""
Services for distillation: feature losses, target-aware queries, confidence
weighted logit distillation and total loss assembly
"""

import logging
import math
from collections.abc import Sequence

import torch
import torch.nn.functional as F

from clockdistill.detector.schemas import BackboneFeatures, Memory, StagePredictions
from clockdistill.detector.services import check_class_ids
from clockdistill.distill.models import Adapter, FrozenEmbedders
from clockdistill.distill.schemas import (
    DistillConfig,
    QueryOrigin,
    Recipe,
    TargetAwareQuerySet,
)
from clockdistill.exceptions import (
    ConfigurationError,
    NonFiniteLossError,
    QuerySetMismatchError,
    ShapeMismatchError,
)
from clockdistill.geometry.schemas import MaskPair
from clockdistill.geometry.services import box_cxcywh_to_xyxy, elementwise_giou
from clockdistill.schemas import GroundTruthInstance

logger = logging.getLogger("distill")


def backbone_feature_distill_loss(
    teacher: BackboneFeatures, student: BackboneFeatures, adapter: Adapter | None = None
) -> torch.Tensor:
    """
    Mean squared error between teacher features and adapted student features,
    averaged over channels, rows and columns of each level, then over levels
    :param teacher: teacher backbone features (detached here)
    :param student: student backbone features
    :param adapter: maps student channels to teacher channels
    :return: scalar loss
    """
    student_levels = (
        adapter.adapt_features(student.levels) if adapter else list(student.levels)
    )
    if len(student_levels) != len(teacher.levels):
        raise ShapeMismatchError(
            f"{len(teacher.levels)} teacher levels vs {len(student_levels)} student levels"
        )
    losses = []
    for t, s in zip(teacher.levels, student_levels):
        if t.shape != s.shape:
            raise ShapeMismatchError(
                f"Feature shapes {tuple(t.shape)} and {tuple(s.shape)} are irreconcilable"
            )
        losses.append(F.mse_loss(s, t.detach()))
    return torch.stack(losses).mean()


def memory_distill_loss(
    teacher: Memory,
    student: Memory,
    masks: MaskPair,
    alpha: float,
    beta: float,
    adapter: Adapter | None = None,
) -> torch.Tensor:
    """
    alpha * sum_p sum_d M_p S_p (A_t - A_s)^2 + beta * sum_p sum_d (1 - M_p) S_p (A_t - A_s)^2,
    summed per image and averaged over the batch
    :param teacher: teacher memory (detached here)
    :param student: student memory
    :param masks: (P,) or (B, P) location and scale masks
    :param alpha: foreground weight
    :param beta: background weight
    :param adapter: maps the student width to the teacher width
    :return: scalar loss
    """
    student_values = adapter.adapt_memory(student.values) if adapter else student.values
    teacher_values = teacher.values.detach()
    if teacher_values.shape != student_values.shape:
        raise ShapeMismatchError(
            f"Memories {tuple(teacher_values.shape)} and {tuple(student_values.shape)} "
            "differ after adaptation"
        )
    if masks.num_points != teacher_values.shape[1]:
        raise ShapeMismatchError(
            f"Masks cover {masks.num_points} points, memory has {teacher_values.shape[1]}"
        )
    squared = (teacher_values - student_values).pow(2).sum(dim=-1)
    m = masks.location.to(squared)
    s = masks.scale.to(squared)
    weights = alpha * m * s + beta * (1 - m) * s
    per_image = (weights * squared).sum(dim=-1)
    return per_image.mean()


def feature_distill_loss(
    recipe: Recipe,
    teacher: tuple[BackboneFeatures, Memory],
    student: tuple[BackboneFeatures, Memory],
    masks: MaskPair,
    config: DistillConfig,
    adapter: Adapter | None = None,
) -> torch.Tensor:
    """
    Feature term of the total loss for the chosen recipe: backbone features,
    encoder memory, or the sum of both
    """
    loss = teacher[1].values.new_zeros(())
    if recipe in (Recipe.BACKBONE_ONLY, Recipe.BOTH):
        loss = loss + backbone_feature_distill_loss(teacher[0], student[0], adapter)
    if recipe in (Recipe.MEMORY_ONLY, Recipe.BOTH):
        loss = loss + memory_distill_loss(
            teacher[1], student[1], masks, config.alpha, config.beta, adapter
        )
    return loss


def _jitter(
    box: tuple[float, float, float, float], amount: float, generator: torch.Generator
) -> list[float]:
    cx, cy, w, h = box
    u = torch.rand(4, generator=generator, dtype=torch.float64).mul(2).sub(1).tolist()
    cx = min(max(cx + u[0] * amount * w / 2, 0.0), 1.0)
    cy = min(max(cy + u[1] * amount * h / 2, 0.0), 1.0)
    w = min(max(w * (1 + u[2] * amount), 1e-4), 1.0)
    h = min(max(h * (1 + u[3] * amount), 1e-4), 1.0)
    return [cx, cy, w, h]


@torch.no_grad()
def build_target_queries(
    gts: Sequence[GroundTruthInstance],
    embedders: FrozenEmbedders,
    config: DistillConfig,
    seed: int,
) -> TargetAwareQuerySet:
    """
    Builds the frozen distillation queries of one image. Copies are laid out
    copy-major: group g holds copy g of every ground truth. Remaining slots up
    to G are filled with the shared random points when enabled.
    :param gts: ground truths of the image
    :param embedders: frozen class table, box MLP and padding bank
    :param config: G, copies, jitter and padding switches
    :param seed: drives the per-copy jitter only
    :return: query set, identical for identical inputs
    """
    if embedders.num_classes < 1:
        raise ConfigurationError("Target-aware queries need at least one class")
    check_class_ids(gts, embedders.num_classes)
    budget = config.num_distill_points
    copies = config.num_copies
    if gts and len(gts) * copies > budget:
        copies = max(1, budget // len(gts))
        if len(gts) > budget:
            logger.warning(
                "More ground truths than distillation points, keeping one copy each",
                extra={"ground_truths": len(gts), "points": budget},
            )
    generator = torch.Generator().manual_seed(seed)
    table = embedders.class_embedding_table

    contents, params, groups, copy_ids, class_ids = [], [], [], [], []
    origin: list[QueryOrigin] = []
    for copy in range(copies if gts else 0):
        for gt in gts:
            box = list(gt.box.as_tuple())
            if config.box_jitter > 0:
                box = _jitter(gt.box.as_tuple(), config.box_jitter, generator)
            contents.append(table[gt.class_id])
            params.append(torch.tensor(box, dtype=table.dtype))
            groups.append(copy)
            copy_ids.append(copy)
            class_ids.append(gt.class_id)
            origin.append(QueryOrigin.GROUND_TRUTH)

    if config.include_kddetr_points:
        padding = max(budget - len(contents), 0)
        padding = min(padding, int(embedders.padding_content.shape[0]))
        pad_group = copies if gts else 0
        for i in range(padding):
            contents.append(embedders.padding_content[i])
            params.append(embedders.padding_boxes[i])
            groups.append(pad_group)
            copy_ids.append(0)
            class_ids.append(-1)
            origin.append(QueryOrigin.SHARED_RANDOM)

    d = embedders.query_dim
    return TargetAwareQuerySet(
        content=torch.stack(contents).clone() if contents else table.new_zeros((0, d)),
        positional_params=(
            torch.stack(params).clone() if params else table.new_zeros((0, 4))
        ),
        group_id=torch.tensor(groups, dtype=torch.long),
        copy_index=torch.tensor(copy_ids, dtype=torch.long),
        class_ids=torch.tensor(class_ids, dtype=torch.long),
        origin=origin,
    )


@torch.no_grad()
def materialize_queries(
    query_set: TargetAwareQuerySet, embedders: FrozenEmbedders, width: int
) -> torch.Tensor:
    """
    q_target = content + MLP(box), lifted to the detector width
    :return: (G_d, width)
    """
    params = query_set.positional_params.to(embedders.class_embedding_table)
    queries = query_set.content.to(params) + embedders.box_mlp(params)
    return embedders.lift(queries, width)


def confidence_weights(
    teacher_logits: torch.Tensor, foreground_only: bool = False
) -> torch.Tensor:
    """
    w = max over classes of softmax(teacher logits), no temperature
    :param teacher_logits: (..., C+1)
    :param foreground_only: exclude the background entry from the max
    :return: (...) weights in (0, 1]
    """
    prob = teacher_logits.detach().softmax(dim=-1)
    if foreground_only:
        prob = prob[..., :-1]
    return prob.max(dim=-1).values


def _check_consistent(teacher: StagePredictions, student: StagePredictions) -> None:
    if teacher.query_digest != student.query_digest:
        raise QuerySetMismatchError(
            "Teacher and student were evaluated on different distillation query sets"
        )
    if teacher.class_logits.shape[0] != student.class_logits.shape[0]:
        raise QuerySetMismatchError("Teacher and student batch sizes differ")
    if teacher.num_queries != student.num_queries:
        raise QuerySetMismatchError(
            f"{teacher.num_queries} teacher vs {student.num_queries} student queries"
        )
    if teacher.class_logits.shape[-1] != student.class_logits.shape[-1]:
        raise ShapeMismatchError("Teacher and student class counts differ")


def logit_distill_loss(
    teacher: StagePredictions,
    student: StagePredictions,
    config: DistillConfig,
    weights: torch.Tensor | None = None,
) -> torch.Tensor:
    """
    Confidence weighted sum over stages and distillation points of
    lambda_cls * KL(teacher || student at temperature T) + lambda_l1 * L1
    + lambda_giou * (1 - GIoU). With differing stage counts only the final
    stage of each model is used.
    :param teacher: teacher outputs on the distillation columns (detached here)
    :param student: student outputs on the same columns
    :param config: weights and temperature
    :param weights: overrides the teacher confidence weights, (B, E, G)
    :return: scalar loss, per-image sums averaged over the batch
    """
    _check_consistent(teacher, student)
    if teacher.num_stages != student.num_stages:
        teacher, student = teacher.stages(-1), student.stages(-1)
    t_logits = teacher.class_logits.detach()
    t_boxes = teacher.boxes.detach()
    s_logits, s_boxes = student.class_logits, student.boxes
    if weights is None:
        weights = confidence_weights(t_logits, config.confidence_foreground_only)

    temperature = config.temperature
    log_t = F.log_softmax(t_logits / temperature, dim=-1)
    log_s = F.log_softmax(s_logits / temperature, dim=-1)
    kl = F.kl_div(log_s, log_t, reduction="none", log_target=True).sum(dim=-1)
    if config.scale_kl_by_t2:
        kl = kl * temperature**2
    l1 = (s_boxes - t_boxes).abs().sum(dim=-1)
    giou = 1 - elementwise_giou(box_cxcywh_to_xyxy(s_boxes), box_cxcywh_to_xyxy(t_boxes))
    per_point = (
        config.lambda_cls * kl + config.lambda_l1 * l1 + config.lambda_giou * giou
    )
    per_image = (weights.to(per_point) * per_point).flatten(1).sum(dim=1)
    return per_image.mean() if per_image.numel() else s_logits.sum() * 0


def total_loss(
    l_lcmd: torch.Tensor | float,
    l_tcld: torch.Tensor | float,
    l_det: torch.Tensor | float,
) -> torch.Tensor | float:
    """
    Unweighted sum of the memory, logit and detection terms
    :raises NonFiniteLossError: when any term is NaN or infinite
    """
    terms = {"l_lcmd": l_lcmd, "l_tcld": l_tcld, "l_det": l_det}
    values = {name: float(term) for name, term in terms.items()}
    if not all(math.isfinite(v) for v in values.values()):
        raise NonFiniteLossError("Non-finite loss term", values)
    return l_lcmd + l_tcld + l_det
