"""
Global Pydantic schemas used throughout the package
"""

from pydantic import BaseModel, ConfigDict, Field


class BoundingBox(BaseModel):
    cx: float = Field(
        title="Center x", description="Normalized box center x", ge=0.0, le=1.0
    )
    cy: float = Field(
        title="Center y", description="Normalized box center y", ge=0.0, le=1.0
    )
    w: float = Field(title="Width", description="Normalized box width", gt=0.0, le=1.0)
    h: float = Field(
        title="Height", description="Normalized box height", gt=0.0, le=1.0
    )
    model_config = ConfigDict(frozen=True)

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """
        Corner form (x0, y0, x1, y1), clipped to the image
        """
        x0 = min(max(self.cx - self.w / 2, 0.0), 1.0)
        y0 = min(max(self.cy - self.h / 2, 0.0), 1.0)
        x1 = min(max(self.cx + self.w / 2, 0.0), 1.0)
        y1 = min(max(self.cy + self.h / 2, 0.0), 1.0)
        return x0, y0, x1, y1

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.cx, self.cy, self.w, self.h

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BoundingBox":
        return cls(cx=(x0 + x1) / 2, cy=(y0 + y1) / 2, w=x1 - x0, h=y1 - y0)


class GroundTruthInstance(BaseModel):
    class_id: int = Field(
        title="Class ID", description="Contiguous foreground class index", ge=0
    )
    box: BoundingBox = Field(title="Box", description="Normalized center-form box")
    model_config = ConfigDict(frozen=True)


class GridShape(BaseModel):
    height: int = Field(title="Height", description="Grid rows (cells)", ge=1)
    width: int = Field(title="Width", description="Grid columns (cells)", ge=1)
    model_config = ConfigDict(frozen=True)

    @property
    def cells(self) -> int:
        return self.height * self.width
