"""
Queries for reading persisted datasets: COCO-style annotation files and PNG images
"""

import json
import logging
import os
from typing import Any, TypeVar

import numpy as np
from PIL import Image
from pydantic import BaseModel, ValidationError

from clockdistill.data.schemas import (
    AnnotationSet,
    CocoAnnotation,
    CocoCategory,
    CocoImage,
    SampleRecord,
)
from clockdistill.exceptions import AnnotationParseError
from clockdistill.schemas import BoundingBox, GroundTruthInstance

logger = logging.getLogger("data")

M = TypeVar("M", bound=BaseModel)


def _parse_records(
    raw: dict[str, Any], key: str, model: type[M]
) -> list[M]:
    records = raw.get(key)
    if not isinstance(records, list):
        raise AnnotationParseError(f"'{key}' must be an array")
    parsed = []
    for index, record in enumerate(records):
        record_id = record.get("id", f"{key}[{index}]") if isinstance(record, dict) else index
        try:
            parsed.append(model.model_validate(record))
        except ValidationError as e:
            raise AnnotationParseError(f"invalid {key} entry: {e}", record_id) from e
    return parsed


def _normalize(annotation: CocoAnnotation, image: CocoImage) -> BoundingBox:
    x, y, w, h = annotation.bbox
    x0 = min(max(x, 0.0), image.width)
    y0 = min(max(y, 0.0), image.height)
    x1 = min(max(x + w, 0.0), image.width)
    y1 = min(max(y + h, 0.0), image.height)
    if x1 <= x0 or y1 <= y0:
        raise AnnotationParseError("bbox lies outside its image", annotation.id)
    return BoundingBox.from_corners(
        x0 / image.width, y0 / image.height, x1 / image.width, y1 / image.height
    )


def load_annotations(path: str) -> AnnotationSet:
    """
    Reads a COCO detection file into normalized center-form ground truths with
    categories remapped to contiguous ids by ascending file id
    :param path: annotations JSON; image file names are relative to its folder
    :return: samples ordered by image id plus the category mapping
    :raises AnnotationParseError: naming the offending record
    """
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise AnnotationParseError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise AnnotationParseError(f"{path} must hold a JSON object")

    images = _parse_records(raw, "images", CocoImage)
    annotations = _parse_records(raw, "annotations", CocoAnnotation)
    categories = _parse_records(raw, "categories", CocoCategory)

    mapping = {c.id: i for i, c in enumerate(sorted(categories, key=lambda c: c.id))}
    if len(mapping) != len(categories):
        raise AnnotationParseError("duplicate category ids")
    names = [c.name for c in sorted(categories, key=lambda c: c.id)]
    if any(old != new for old, new in mapping.items()):
        logger.info("Category ids remapped", extra={"mapping": mapping})

    root = os.path.dirname(os.path.abspath(path))
    by_id = {image.id: image for image in images}
    gts: dict[int, list[GroundTruthInstance]] = {image.id: [] for image in images}
    for annotation in annotations:
        image = by_id.get(annotation.image_id)
        if image is None:
            raise AnnotationParseError(
                f"unknown image_id {annotation.image_id}", annotation.id
            )
        if annotation.category_id not in mapping:
            raise AnnotationParseError(
                f"unknown category_id {annotation.category_id}", annotation.id
            )
        gts[image.id].append(
            GroundTruthInstance(
                class_id=mapping[annotation.category_id],
                box=_normalize(annotation, image),
            )
        )

    samples = [
        SampleRecord(
            id=image.id,
            path=os.path.join(root, image.file_name),
            width=image.width,
            height=image.height,
            gts=gts[image.id],
        )
        for image in sorted(images, key=lambda i: i.id)
    ]
    logger.info(
        "Annotations loaded",
        extra={"path": path, "images": len(samples), "annotations": len(annotations)},
    )
    return AnnotationSet(samples=samples, category_mapping=mapping, class_names=names)


def load_image(path: str) -> np.ndarray:
    """
    :return: (H, W, 3) float32 in [0, 1]
    """
    with Image.open(path) as image:
        pixels = np.asarray(image.convert("RGB"), dtype=np.float32)
    return pixels / 255.0
