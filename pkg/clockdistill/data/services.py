"""
Services for the data package: synthetic shapes generation, the torch dataset
wrapper, batching and size strata
"""

import json
import logging
import os
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import Any

import numpy as np
import torch
from PIL import Image, ImageDraw
from torch.utils.data import Dataset

from clockdistill.data.queries import load_image
from clockdistill.data.schemas import (
    AnnotationSet,
    DatasetSpec,
    Sample,
    ShapeKind,
    SizeStratum,
)
from clockdistill.schemas import BoundingBox, GroundTruthInstance

logger = logging.getLogger("data")

ANNOTATION_FILE = "annotations.json"
IMAGE_DIR = "images"
# COCO pixel thresholds at a 640 px reference side
_REFERENCE_SIDE = 640
_SMALL_SIDE = 32
_MEDIUM_SIDE = 96


def _draw_shape(
    draw: ImageDraw.ImageDraw, kind: ShapeKind, x0: int, y0: int, side: int, fill: Any
) -> None:
    x1, y1 = x0 + side - 1, y0 + side - 1
    if kind == ShapeKind.DISK:
        draw.ellipse((x0, y0, x1, y1), fill=fill)
    elif kind == ShapeKind.SQUARE:
        draw.rectangle((x0, y0, x1, y1), fill=fill)
    else:
        draw.polygon([(x0, y1), (x1, y1), ((x0 + x1) / 2, y0)], fill=fill)


def render_image(
    spec: DatasetSpec, image_id: int
) -> tuple[np.ndarray, list[tuple[int, list[int]]]]:
    """
    Renders one image from its own RNG stream seeded by (seed, image_id)
    :return: (H, W, 3) uint8 pixels and (class_id, [x, y, w, h]) per object,
        boxes tight to the rendered silhouette
    """
    rng = np.random.default_rng([spec.seed, image_id])
    size = spec.image_size
    base = rng.uniform(0.0, 0.3, size=3)
    pixels = np.clip(
        base + rng.normal(0.0, spec.noise, size=(size, size, 3)), 0.0, 1.0
    )
    canvas = Image.fromarray((pixels * 255).round().astype(np.uint8))
    draw = ImageDraw.Draw(canvas)

    objects = []
    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    for _ in range(count):
        class_id = int(rng.integers(len(spec.classes)))
        side = max(2, round(float(rng.uniform(spec.min_size, spec.max_size)) * size))
        side = min(side, size)
        x0 = int(rng.integers(0, size - side + 1))
        y0 = int(rng.integers(0, size - side + 1))
        color = tuple(int(c) for c in rng.integers(140, 256, size=3))

        silhouette = Image.new("L", (size, size), 0)
        _draw_shape(ImageDraw.Draw(silhouette), spec.classes[class_id], x0, y0, side, 255)
        bbox = silhouette.getbbox()
        if bbox is None:
            continue
        _draw_shape(draw, spec.classes[class_id], x0, y0, side, color)
        left, upper, right, lower = bbox
        objects.append((class_id, [left, upper, right - left, lower - upper]))
    return np.asarray(canvas), objects


def generate_dataset(spec: DatasetSpec, out_dir: str, workers: int = 0) -> str:
    """
    Writes PNG images and a COCO-style annotation file. The output is a pure
    function of the spec: equal specs regenerate byte-identical files.
    :param spec: generation parameters
    :param out_dir: target directory, created when missing
    :param workers: thread count, images are rendered independently
    :return: path of the annotation file
    """
    image_dir = os.path.join(out_dir, IMAGE_DIR)
    try:
        os.makedirs(image_dir, exist_ok=True)
    except OSError as e:
        logger.error("Output directory is not writable", extra={"out_dir": out_dir})
        raise e

    def _render(image_id: int) -> list[tuple[int, list[int]]]:
        pixels, objects = render_image(spec, image_id)
        Image.fromarray(pixels).save(
            os.path.join(image_dir, f"{image_id:06d}.png"), format="PNG"
        )
        return objects

    ids = range(spec.num_images)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(_render, ids))
    else:
        rendered = [_render(i) for i in ids]

    images, annotations = [], []
    for image_id, objects in zip(ids, rendered):
        images.append(
            {
                "id": image_id,
                "file_name": f"{IMAGE_DIR}/{image_id:06d}.png",
                "width": spec.image_size,
                "height": spec.image_size,
            }
        )
        for class_id, bbox in objects:
            annotations.append(
                {
                    "id": len(annotations) + 1,
                    "image_id": image_id,
                    "category_id": class_id + 1,
                    "bbox": bbox,
                    "area": bbox[2] * bbox[3],
                    "iscrowd": 0,
                }
            )
    document = {
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": i + 1, "name": str(kind)} for i, kind in enumerate(spec.classes)
        ],
    }
    path = os.path.join(out_dir, ANNOTATION_FILE)
    with open(path, "w") as f:
        f.write(json.dumps(document, indent=2, sort_keys=True))
    logger.info(
        "Dataset generated",
        extra={
            "out_dir": out_dir,
            "images": len(images),
            "annotations": len(annotations),
            "seed": spec.seed,
        },
    )
    return path


def hflip_sample(sample: Sample) -> Sample:
    gts = [
        GroundTruthInstance(
            class_id=gt.class_id,
            box=BoundingBox(cx=1.0 - gt.box.cx, cy=gt.box.cy, w=gt.box.w, h=gt.box.h),
        )
        for gt in sample.gts
    ]
    return Sample(id=sample.id, image=np.ascontiguousarray(sample.image[:, ::-1]), gts=gts)


class DetectionDataset(Dataset[Sample]):
    """
    Map-style dataset over a loaded annotation set, optionally flipping images
    horizontally with probability 0.5
    """

    def __init__(self, annotations: AnnotationSet, hflip: bool = False) -> None:
        self.annotations = annotations
        self.hflip = hflip

    def __len__(self) -> int:
        return len(self.annotations.samples)

    def __getitem__(self, index: int) -> Sample:
        record = self.annotations.samples[index]
        sample = Sample(id=record.id, image=load_image(record.path), gts=record.gts)
        if self.hflip and bool(torch.rand(1) < 0.5):
            sample = hflip_sample(sample)
        return sample


def collate_samples(
    batch: Sequence[Sample],
) -> tuple[torch.Tensor, list[list[GroundTruthInstance]], list[int]]:
    """
    :return: (B, 3, H, W) float32 images, ground truths and ids per image
    """
    images = torch.stack(
        [torch.from_numpy(np.ascontiguousarray(s.image)).permute(2, 0, 1) for s in batch]
    )
    return images.float(), [list(s.gts) for s in batch], [s.id for s in batch]


def size_stratum(area: float, image_size: int) -> SizeStratum:
    """
    Size class of a box from its area in pixels, with the COCO 32 / 96 pixel
    side thresholds scaled to the image side
    """
    scale = image_size / _REFERENCE_SIDE
    if area < (_SMALL_SIDE * scale) ** 2:
        return SizeStratum.SMALL
    if area < (_MEDIUM_SIDE * scale) ** 2:
        return SizeStratum.MEDIUM
    return SizeStratum.LARGE
