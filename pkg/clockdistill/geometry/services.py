"""
Services for box/grid mathematics: flat-index conversion, location and scale
masks, multi-scale concatenation, box conversion and (generalized) IoU
"""

import logging
from collections.abc import Sequence

import torch

from clockdistill.exceptions import BoxFormError, DegenerateBoxError, GridBoundsError
from clockdistill.geometry.schemas import BoxForm, MaskMembership, MaskPair
from clockdistill.schemas import BoundingBox, GridShape, GroundTruthInstance

logger = logging.getLogger("geometry")

MASK_DTYPE = torch.float64


def flat_to_grid(p: int, width: int, height: int | None = None) -> tuple[int, int]:
    """
    Converts a flattened memory index into (row, col) of a row-major grid
    :param p: flat index
    :param width: grid width W
    :param height: grid height H, enables the upper bound check
    :return: (floor(p / W), p mod W)
    """
    if width < 1:
        raise GridBoundsError(f"Grid width must be positive, got {width}")
    if p < 0 or (height is not None and p >= height * width):
        raise GridBoundsError(f"Flat index {p} outside grid {height}x{width}")
    return p // width, p % width


def _corners(gts: Sequence[GroundTruthInstance]) -> torch.Tensor:
    if not gts:
        return torch.zeros((0, 4), dtype=MASK_DTYPE)
    return torch.tensor([gt.box.corners for gt in gts], dtype=MASK_DTYPE)


def _axis_membership(
    low: torch.Tensor, high: torch.Tensor, cells: int, membership: MaskMembership
) -> torch.Tensor:
    """
    (K, cells) indicator of grid rows (or columns) belonging to each box interval
    """
    edges = torch.arange(cells + 1, dtype=MASK_DTYPE) / cells
    if membership == MaskMembership.CENTER:
        centers = (edges[:-1] + edges[1:]) / 2
        return (low[:, None] <= centers[None]) & (centers[None] < high[:, None])
    return (low[:, None] < edges[None, 1:]) & (high[:, None] > edges[None, :-1])


def _box_cells(
    gts: Sequence[GroundTruthInstance],
    shape: GridShape,
    membership: MaskMembership,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    :return: (K, H*W) cell membership, rows per box, columns per box
    """
    corners = _corners(gts)
    rows = _axis_membership(corners[:, 1], corners[:, 3], shape.height, membership)
    cols = _axis_membership(corners[:, 0], corners[:, 2], shape.width, membership)
    cells = (rows[:, :, None] & cols[:, None, :]).reshape(len(gts), shape.cells)
    return cells, rows.sum(dim=1), cols.sum(dim=1)


def location_mask(
    gts: Sequence[GroundTruthInstance],
    shape: GridShape,
    membership: MaskMembership | str = MaskMembership.CENTER,
) -> torch.Tensor:
    """
    Binary mask M over the H*W cells of one level: 1 where the cell belongs to
    at least one ground truth box
    :param gts: ground truth instances with normalized boxes
    :param shape: grid of the level
    :param membership: "center" (cell center inside box) or "overlap"
    :return: float64 tensor of shape (H*W,) holding 0/1
    """
    cells, _, _ = _box_cells(gts, shape, MaskMembership(membership))
    return cells.any(dim=0).to(MASK_DTYPE)


def scale_mask(
    gts: Sequence[GroundTruthInstance],
    shape: GridShape,
    location: torch.Tensor,
    membership: MaskMembership | str = MaskMembership.CENTER,
) -> torch.Tensor:
    """
    Scale mask S of one level. A foreground cell takes 1/(H_k*W_k) of the
    smallest box covering it, H_k and W_k being the number of grid rows and
    columns assigned to box k. Background cells take 1/N_bg.
    :param gts: ground truth instances
    :param shape: grid of the level
    :param location: location mask of the same level
    :param membership: cell membership rule, must match the one used for M
    :return: float64 tensor of shape (H*W,)
    """
    if location.shape != (shape.cells,):
        raise GridBoundsError(
            f"Location mask of shape {tuple(location.shape)} does not fit {shape}"
        )
    cells, rows, cols = _box_cells(gts, shape, MaskMembership(membership))
    counts = rows.clamp(min=1) * cols.clamp(min=1)
    scale = torch.zeros(shape.cells, dtype=MASK_DTYPE)

    for k in torch.nonzero(~cells.any(dim=1)).flatten().tolist():
        logger.warning(
            "Ground truth box covers no grid cell and is ignored",
            extra={"box_index": k, "grid": [shape.height, shape.width]},
        )

    # smallest box first: fewer cells, then smaller area, then input order
    order = sorted(
        range(len(gts)),
        key=lambda k: (int(counts[k]), gts[k].box.area, k),
    )
    assigned = torch.zeros(shape.cells, dtype=torch.bool)
    for k in order:
        claim = cells[k] & ~assigned
        scale[claim] = 1.0 / float(counts[k])
        assigned |= claim

    background = location == 0
    n_bg = int(background.sum())
    if n_bg > 0:
        scale[background] = 1.0 / n_bg
    return scale


def build_multiscale_masks(
    gts: Sequence[GroundTruthInstance],
    level_shapes: Sequence[GridShape],
    membership: MaskMembership | str = MaskMembership.CENTER,
) -> MaskPair:
    """
    Computes M and S per level from the normalized boxes and concatenates them
    in ascending level order
    :param gts: ground truth instances
    :param level_shapes: grid shape per level, nonempty
    :param membership: cell membership rule
    :return: MaskPair of length sum(H_l * W_l)
    """
    if not level_shapes:
        raise GridBoundsError("At least one level shape is required")
    locations, scales = [], []
    for shape in level_shapes:
        m = location_mask(gts, shape, membership)
        locations.append(m)
        scales.append(scale_mask(gts, shape, m, membership))
    return MaskPair(
        location=torch.cat(locations),
        scale=torch.cat(scales),
        level_shapes=list(level_shapes),
    )


def uniform_masks(level_shapes: Sequence[GridShape]) -> MaskPair:
    """
    Weighting used when location masking is switched off: every cell is
    foreground and each level is normalized to unit mass
    """
    location = torch.ones(sum(s.cells for s in level_shapes), dtype=MASK_DTYPE)
    scale = torch.cat(
        [torch.full((s.cells,), 1.0 / s.cells, dtype=MASK_DTYPE) for s in level_shapes]
    )
    return MaskPair(location=location, scale=scale, level_shapes=list(level_shapes))


def stack_mask_pairs(pairs: Sequence[MaskPair]) -> MaskPair:
    """
    Stacks per-image mask pairs into (B, P) masks for batched losses
    """
    shapes = pairs[0].level_shapes
    if any(pair.level_shapes != shapes for pair in pairs):
        raise GridBoundsError("Cannot stack masks built for different level shapes")
    return MaskPair(
        location=torch.stack([pair.location for pair in pairs]),
        scale=torch.stack([pair.scale for pair in pairs]),
        level_shapes=list(shapes),
    )


# box conversion
def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], -1)


def box_xyxy_to_cxcywh(boxes: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = boxes.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], -1)


def box_convert(
    box: BoundingBox | Sequence[float] | torch.Tensor,
    from_form: BoxForm | str,
    to_form: BoxForm | str,
) -> torch.Tensor:
    """
    Converts boxes between center and corner form
    :param box: a BoundingBox, 4 numbers, or a (..., 4) tensor
    :param from_form: "center" or "corner"
    :param to_form: "center" or "corner"
    :return: (..., 4) tensor in the requested form
    """
    try:
        source, target = BoxForm(from_form), BoxForm(to_form)
    except ValueError as e:
        raise BoxFormError(f"Unknown box form: {e.args[0]}") from e
    if isinstance(box, BoundingBox):
        values = torch.tensor(box.as_tuple(), dtype=torch.float64)
    elif isinstance(box, torch.Tensor):
        values = box
    else:
        values = torch.tensor(list(box), dtype=torch.float64)
    if values.shape[-1] != 4:
        raise BoxFormError(f"Boxes need 4 coordinates, got shape {tuple(values.shape)}")
    if source == target:
        return values.clone()
    if source == BoxForm.CENTER:
        return box_cxcywh_to_xyxy(values)
    return box_xyxy_to_cxcywh(values)


# IoU / GIoU on corner-form boxes
def box_area(boxes: torch.Tensor) -> torch.Tensor:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def _iou_and_giou(
    boxes1: torch.Tensor, boxes2: torch.Tensor, eps: float
) -> tuple[torch.Tensor, torch.Tensor]:
    area1, area2 = box_area(boxes1), box_area(boxes2)
    lt = torch.max(boxes1[..., :2], boxes2[..., :2])
    rb = torch.min(boxes1[..., 2:], boxes2[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1 + area2 - inter
    iou = inter / union.clamp(min=eps)

    lt_c = torch.min(boxes1[..., :2], boxes2[..., :2])
    rb_c = torch.max(boxes1[..., 2:], boxes2[..., 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    enclosure = (wh_c[..., 0] * wh_c[..., 1]).clamp(min=eps)
    penalty = ((enclosure - union) / enclosure).clamp(min=0)
    return iou, iou - penalty


def elementwise_giou(
    boxes1: torch.Tensor, boxes2: torch.Tensor, eps: float = 1e-12
) -> torch.Tensor:
    """
    GIoU of aligned corner-form boxes, shapes (..., 4) -> (...)
    """
    return _iou_and_giou(boxes1, boxes2, eps)[1]


def pairwise_iou(boxes1: torch.Tensor, boxes2: torch.Tensor) -> torch.Tensor:
    """
    IoU of every pair, (N, 4) x (M, 4) -> (N, M)
    """
    return _iou_and_giou(boxes1[:, None, :], boxes2[None, :, :], 1e-12)[0]


def pairwise_giou(
    boxes1: torch.Tensor, boxes2: torch.Tensor, eps: float = 1e-12
) -> torch.Tensor:
    """
    GIoU of every pair, (N, 4) x (M, 4) -> (N, M)
    """
    return _iou_and_giou(boxes1[:, None, :], boxes2[None, :, :], eps)[1]


def corner_giou(a: Sequence[float], b: Sequence[float]) -> float:
    """
    GIoU of two corner-form boxes given as plain numbers, not limited to the
    unit square
    """
    t1 = torch.tensor(list(a), dtype=torch.float64)
    t2 = torch.tensor(list(b), dtype=torch.float64)
    for box in (t1, t2):
        if float(box_area(box)) <= 0 or bool((box[2:] <= box[:2]).any()):
            raise DegenerateBoxError(f"Box {box.tolist()} has no positive area")
    return float(elementwise_giou(t1, t2, eps=0.0))


def giou(a: BoundingBox, b: BoundingBox) -> float:
    """
    Generalized IoU: IoU - (area(enclosure) - area(union)) / area(enclosure)
    :return: value in (-1, 1]
    """
    return corner_giou(a.corners, b.corners)
