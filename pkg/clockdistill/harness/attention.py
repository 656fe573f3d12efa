"""
Encoder attention heatmaps and the share of attention landing inside boxes
"""

import logging
import os
from collections.abc import Sequence

import numpy as np
import torch
from matplotlib import colormaps
from PIL import Image

from clockdistill.checkpoints import load_detector
from clockdistill.data.queries import load_image
from clockdistill.data.schemas import AnnotationSet
from clockdistill.detector.models import Detector
from clockdistill.exceptions import LayerSelectorError
from clockdistill.geometry.schemas import MaskMembership
from clockdistill.geometry.services import location_mask
from clockdistill.schemas import GridShape, GroundTruthInstance

logger = logging.getLogger("harness")

COLORMAP = "jet"  # red = highest, blue = lowest
_FLAT_TOLERANCE = 1e-6


def select_layers(attention: Sequence[torch.Tensor], selector: str) -> torch.Tensor:
    """
    :param attention: per-layer (B, P, P) maps
    :param selector: "last", "mean" or a layer index (negative counts from the end)
    :return: (B, P, P)
    """
    if not attention:
        raise LayerSelectorError("The encoder has no self-attention layers")
    if selector == "last":
        return attention[-1]
    if selector == "mean":
        return torch.stack(list(attention)).mean(dim=0)
    try:
        index = int(selector)
    except ValueError as e:
        raise LayerSelectorError(f"Unknown layer selector '{selector}'") from e
    if not -len(attention) <= index < len(attention):
        raise LayerSelectorError(
            f"Layer {index} out of range for {len(attention)} encoder layers"
        )
    return attention[index]


def received_attention(attention: torch.Tensor) -> torch.Tensor:
    """
    Mean attention each memory cell receives over all queries, (..., P, P) -> (..., P)
    """
    return attention.mean(dim=-2)


def render_heatmap(values: torch.Tensor, shape: GridShape, image_size: int) -> np.ndarray:
    """
    Colors one level's (H*W,) values and upsamples them to the image size
    :return: (image_size, image_size, 3) uint8
    """
    grid = values.detach().double().reshape(shape.height, shape.width).cpu().numpy()
    low, high = float(grid.min()), float(grid.max())
    if high - low <= _FLAT_TOLERANCE * max(abs(high), 1e-12):
        normalized = np.zeros_like(grid)
    else:
        normalized = (grid - low) / (high - low)
    rgba = colormaps[COLORMAP](normalized)
    colored = Image.fromarray((rgba[..., :3] * 255).round().astype(np.uint8))
    resized = colored.resize((image_size, image_size), Image.Resampling.BILINEAR)
    return np.asarray(resized)


@torch.no_grad()
def attention_heatmaps(
    model: Detector, image: torch.Tensor, selector: str = "last"
) -> list[np.ndarray]:
    """
    Per-level heatmaps of the attention received by each memory cell
    :param model: detector in eval mode
    :param image: (3, H, W) in [0, 1]
    :param selector: layer selector, see `select_layers`
    """
    parameter = next(model.parameters())
    images = image.to(device=parameter.device, dtype=parameter.dtype)[None]
    attention = select_layers(model.encoder_attention(images), selector)
    received = received_attention(attention)[0]
    heatmaps, start = [], 0
    for shape in model.config.level_shapes:
        level = received[start : start + shape.cells]
        heatmaps.append(render_heatmap(level, shape, model.config.image_size))
        start += shape.cells
    return heatmaps


def export_attention(
    checkpoint: str, image_path: str, selector: str, out_dir: str
) -> list[str]:
    """
    Writes one heatmap PNG per feature level
    :return: written paths
    """
    model, _ = load_detector(checkpoint)
    model.eval()
    image = torch.from_numpy(load_image(image_path)).permute(2, 0, 1)
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(image_path))[0]
    paths = []
    for level, heatmap in enumerate(attention_heatmaps(model, image, selector)):
        path = os.path.join(out_dir, f"{stem}_attn_{selector}_level{level}.png")
        Image.fromarray(heatmap).save(path, format="PNG")
        paths.append(path)
    logger.info("Attention exported", extra={"checkpoint": checkpoint, "files": paths})
    return paths


def attention_mass_inside_boxes(
    attention: torch.Tensor,
    gts: Sequence[GroundTruthInstance],
    level_shapes: Sequence[GridShape],
    membership: MaskMembership = MaskMembership.CENTER,
) -> float:
    """
    Fraction of the received attention that falls on cells inside ground truth
    boxes, for one image
    :param attention: (P, P) self-attention of one image
    """
    received = received_attention(attention.double())
    inside = torch.cat([location_mask(gts, shape, membership) for shape in level_shapes])
    total = float(received.sum())
    return float((received * inside.to(received)).sum()) / total if total > 0 else 0.0


@torch.no_grad()
def mean_attention_mass(
    model: Detector, annotations: AnnotationSet, num_images: int, selector: str = "last"
) -> float:
    """
    Average of `attention_mass_inside_boxes` over the first images of a split
    """
    model.eval()
    parameter = next(model.parameters())
    values = []
    for record in annotations.samples[:num_images]:
        image = torch.from_numpy(load_image(record.path)).permute(2, 0, 1)
        images = image.to(device=parameter.device, dtype=parameter.dtype)[None]
        attention = select_layers(model.encoder_attention(images), selector)[0]
        values.append(
            attention_mass_inside_boxes(attention, record.gts, model.config.level_shapes)
        )
    return sum(values) / len(values) if values else 0.0
