"""
Schemas for distillation: loss configuration and target-aware query sets
"""

import hashlib
from enum import StrEnum

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from clockdistill.geometry.schemas import MaskMembership


class Recipe(StrEnum):
    BACKBONE_ONLY = "backbone_only"
    MEMORY_ONLY = "memory_only"
    BOTH = "both"


class QueryOrigin(StrEnum):
    GROUND_TRUTH = "ground_truth"
    SHARED_RANDOM = "shared_random"


class DistillConfig(BaseModel):
    # memory distillation
    alpha: float = Field(default=5e-5, title="Foreground weight", ge=0.0)
    beta: float = Field(default=1e-7, title="Background weight", ge=0.0)
    recipe: Recipe = Field(
        default=Recipe.MEMORY_ONLY,
        title="Feature recipe",
        description="Which features are distilled: backbone, memory, or both",
    )
    mask_membership: MaskMembership = Field(
        default=MaskMembership.CENTER,
        title="Mask membership",
        description="Cell-in-box rule for the location mask",
    )
    mask_decoder_memory: bool = Field(
        default=False,
        title="Mask decoder memory",
        description="Feed location-masked memory to the distillation queries",
    )
    # logit distillation
    lambda_cls: float = Field(default=1.0, title="KL weight", ge=0.0)
    lambda_l1: float = Field(default=5.0, title="L1 weight", ge=0.0)
    lambda_giou: float = Field(default=2.0, title="GIoU weight", ge=0.0)
    temperature: float = Field(default=2.0, title="Temperature T", gt=0.0)
    scale_kl_by_t2: bool = Field(default=True, title="Multiply KL by T^2")
    confidence_foreground_only: bool = Field(
        default=False,
        title="Foreground-only confidence",
        description="Take the confidence max over foreground classes only",
    )
    # target-aware queries
    num_distill_points: int = Field(
        default=300, title="Distillation points G", description="GT and padding", ge=1
    )
    num_copies: int = Field(default=3, title="Copies per ground truth", ge=1)
    box_jitter: float = Field(default=0.0, title="Per-copy box jitter", ge=0.0, le=1.0)
    include_kddetr_points: bool = Field(
        default=True,
        title="Shared random points",
        description="Pad up to G with fixed shared random queries",
    )
    query_dim: int | None = Field(
        default=None,
        title="Query width",
        description="Width of the frozen embedders, defaults to the teacher width",
        ge=1,
    )
    embedder_seed: int = Field(default=0, title="Embedder seed")
    debug_consistency: bool = Field(
        default=False,
        title="Consistency assertion",
        description="Assert every step that teacher and student got the same queries",
    )


class TargetAwareQuerySet(BaseModel):
    content: torch.Tensor = Field(
        title="Content queries", description="(G_d, D_q) class embeddings or padding"
    )
    positional_params: torch.Tensor = Field(
        title="Positional parameters", description="(G_d, 4) center-form boxes"
    )
    group_id: torch.Tensor = Field(title="Group ids", description="(G_d,) int64")
    copy_index: torch.Tensor = Field(title="Copy index", description="(G_d,) int64")
    class_ids: torch.Tensor = Field(
        title="Class ids", description="(G_d,) int64, -1 for padding points"
    )
    origin: list[QueryOrigin] = Field(title="Origin per query")
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    @model_validator(mode="after")
    def check_rows(self) -> "TargetAwareQuerySet":
        rows = int(self.content.shape[0])
        for name in ("positional_params", "group_id", "copy_index", "class_ids"):
            if int(getattr(self, name).shape[0]) != rows:
                raise ValueError(f"{name} must have {rows} rows")
        if len(self.origin) != rows:
            raise ValueError(f"origin must have {rows} entries")
        if self.positional_params.dim() != 2 or self.positional_params.shape[1] != 4:
            raise ValueError("positional_params must be (G_d, 4)")
        return self

    def __len__(self) -> int:
        return int(self.content.shape[0])

    def to_bytes(self) -> bytes:
        """
        Serialized form; equal sets give byte-identical output
        """
        parts = [
            tensor.detach().cpu().contiguous().numpy().tobytes()
            for tensor in (
                self.content,
                self.positional_params,
                self.group_id,
                self.copy_index,
                self.class_ids,
            )
        ]
        parts.append(",".join(self.origin).encode())
        parts.append(repr(tuple(self.content.shape)).encode())
        return b"|".join(parts)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()
