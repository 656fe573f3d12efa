"""
Schemas for mask and box geometry
"""

from enum import StrEnum

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from clockdistill.schemas import GridShape


class BoxForm(StrEnum):
    CENTER = "center"  # (cx, cy, w, h)
    CORNER = "corner"  # (x0, y0, x1, y1)


class MaskMembership(StrEnum):
    CENTER = "center"
    OVERLAP = "overlap"


class MaskPair(BaseModel):
    location: torch.Tensor = Field(
        title="Location mask M",
        description="Binary foreground indicator, shape (P,) or (B, P)",
    )
    scale: torch.Tensor = Field(
        title="Scale mask S",
        description="Nonnegative per-cell weight, same shape as the location mask",
    )
    level_shapes: list[GridShape] = Field(
        title="Level shapes", description="Grid shape per level, ascending level order"
    )
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @model_validator(mode="after")
    def check_lengths(self) -> "MaskPair":
        """
        Validates that both masks cover exactly sum(H_l * W_l) cells
        """
        points = sum(shape.cells for shape in self.level_shapes)
        if self.location.shape != self.scale.shape:
            raise ValueError("Location and scale masks must have the same shape")
        if self.location.shape[-1] != points:
            raise ValueError(
                f"Masks cover {self.location.shape[-1]} cells, level shapes need {points}"
            )
        if bool((self.scale < 0).any()):
            raise ValueError("Scale mask must be nonnegative")
        return self

    @property
    def num_points(self) -> int:
        return int(self.location.shape[-1])

    def level_slices(self) -> list[slice]:
        """
        Slice of the flattened axis owned by each level
        """
        slices, start = [], 0
        for shape in self.level_shapes:
            slices.append(slice(start, start + shape.cells))
            start += shape.cells
        return slices
