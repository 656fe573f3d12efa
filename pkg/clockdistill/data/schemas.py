"""
Schemas for the data package: generation parameters, samples and the subset
of the COCO detection format we read and write
"""

from enum import StrEnum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from clockdistill.schemas import GroundTruthInstance


class ShapeKind(StrEnum):
    DISK = "disk"
    SQUARE = "square"
    TRIANGLE = "triangle"


class SizeStratum(StrEnum):
    SMALL = "small"
    MEDIUM = "medium"
    LARGE = "large"


class DatasetSpec(BaseModel):
    num_images: int = Field(default=200, title="Images", ge=0)
    image_size: int = Field(default=64, title="Image size", description="Square", ge=8)
    classes: list[ShapeKind] = Field(
        default=[ShapeKind.DISK, ShapeKind.SQUARE, ShapeKind.TRIANGLE],
        title="Classes",
        description="Category order defines the class ids",
    )
    min_objects: int = Field(default=1, title="Min objects per image", ge=0)
    max_objects: int = Field(default=4, title="Max objects per image", ge=0)
    min_size: float = Field(
        default=0.1, title="Min size", description="Fraction of the image side", gt=0.0
    )
    max_size: float = Field(
        default=0.5, title="Max size", description="Fraction of the image side", le=1.0
    )
    noise: float = Field(
        default=0.02, title="Background noise", description="Gaussian std", ge=0.0
    )
    seed: int = Field(default=0, title="Seed")

    @model_validator(mode="after")
    def check_ranges(self) -> "DatasetSpec":
        if not self.classes:
            raise ValueError("At least one class is required")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("Classes must be unique")
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        if self.min_size > self.max_size:
            raise ValueError("min_size must not exceed max_size")
        return self


class SampleRecord(BaseModel):
    """
    Annotation-only view of an image; pixels are read on demand
    """

    id: int = Field(title="Image ID")
    path: str = Field(title="Image path")
    width: int = Field(title="Width in pixels", ge=1)
    height: int = Field(title="Height in pixels", ge=1)
    gts: list[GroundTruthInstance] = Field(default_factory=list, title="Ground truths")


class Sample(BaseModel):
    id: int = Field(title="Image ID")
    image: np.ndarray = Field(title="Image", description="(H, W, 3) float32 in [0, 1]")
    gts: list[GroundTruthInstance] = Field(default_factory=list, title="Ground truths")
    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def check_image(self) -> "Sample":
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"Image must be (H, W, 3), got {self.image.shape}")
        return self


class AnnotationSet(BaseModel):
    samples: list[SampleRecord] = Field(title="Samples")
    category_mapping: dict[int, int] = Field(
        title="Category mapping", description="File category id -> contiguous class id"
    )
    class_names: list[str] = Field(title="Class names", description="By class id")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


# COCO detection records, only the fields we use
class CocoImage(BaseModel):
    id: int
    file_name: str = Field(min_length=1)
    width: int = Field(ge=1)
    height: int = Field(ge=1)


class CocoCategory(BaseModel):
    id: int
    name: str


class CocoAnnotation(BaseModel):
    id: int
    image_id: int
    category_id: int
    bbox: list[float] = Field(description="x, y, w, h in pixels")
    area: float = Field(default=0.0, ge=0.0)
    iscrowd: int = Field(default=0, ge=0, le=1)

    @model_validator(mode="after")
    def check_bbox(self) -> "CocoAnnotation":
        if len(self.bbox) != 4:
            raise ValueError("bbox must hold 4 numbers")
        if self.bbox[2] <= 0 or self.bbox[3] <= 0:
            raise ValueError("bbox width and height must be positive")
        return self
