"""
Schemas for the detector package
"""

from typing import Literal

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from clockdistill.schemas import BoundingBox, GridShape


class DetectorConfig(BaseModel):
    # transformer
    embed_dim: int = Field(
        default=64, title="Embedding width D", description="Transformer width", ge=4
    )
    encoder_layers: int = Field(default=2, title="Encoder layers", ge=1)
    decoder_layers: int = Field(
        default=2, title="Decoder layers", description="Decoder stages E", ge=1
    )
    attention_heads: int = Field(default=4, title="Attention heads", ge=1)
    num_object_queries: int = Field(
        default=20, title="Object queries N", description="Learnable queries", ge=1
    )
    num_classes: int = Field(
        default=3, title="Classes C", description="Foreground classes", ge=1
    )
    mlp_hidden: int = Field(default=256, title="FFN width", ge=1)
    dropout: float = Field(default=0.0, title="Dropout", ge=0.0, lt=1.0)
    activation: Literal["relu", "gelu"] = Field(default="relu", title="Activation")
    encoder_self_attention: bool = Field(
        default=True,
        title="Encoder self-attention",
        description="Disabling leaves the encoder a per-cell FFN stack",
    )
    # backbone
    image_size: int = Field(default=64, title="Image size", description="Square", ge=1)
    strides: list[int] = Field(
        default=[8], title="Strides", description="One feature level per stride"
    )
    backbone_channels: int = Field(default=64, title="Backbone channels C", ge=1)
    # set criterion, same weights are used by the matcher
    loss_class: float = Field(default=1.0, title="Classification weight", ge=0.0)
    loss_l1: float = Field(default=5.0, title="L1 weight", ge=0.0)
    loss_giou: float = Field(default=2.0, title="GIoU weight", ge=0.0)
    background_weight: float = Field(
        default=0.1, title="No-object weight", description="CE weight of class C", gt=0
    )

    @model_validator(mode="after")
    def check_dimensions(self) -> "DetectorConfig":
        if self.embed_dim % self.attention_heads:
            raise ValueError("embed_dim must be divisible by attention_heads")
        if self.embed_dim % 4:
            raise ValueError("embed_dim must be divisible by 4 for 2D sine encodings")
        if not self.strides:
            raise ValueError("At least one stride is required")
        for stride in self.strides:
            if stride < 1 or self.image_size % stride:
                raise ValueError(
                    f"image_size {self.image_size} is not divisible by stride {stride}"
                )
        return self

    @property
    def level_shapes(self) -> list[GridShape]:
        return [
            GridShape(height=self.image_size // s, width=self.image_size // s)
            for s in self.strides
        ]


class BackboneFeatures(BaseModel):
    levels: list[torch.Tensor] = Field(
        title="Feature levels", description="Per level (B, C, H_l, W_l)"
    )
    model_config = ConfigDict(arbitrary_types_allowed=True)


class Memory(BaseModel):
    values: torch.Tensor = Field(title="Memory A", description="(B, P, D)")
    positional_encoding: torch.Tensor = Field(
        title="Positional encoding", description="(P, D), shared across the batch"
    )
    level_shapes: list[GridShape] = Field(title="Level shapes")
    model_config = ConfigDict(arbitrary_types_allowed=True)

    @model_validator(mode="after")
    def check_points(self) -> "Memory":
        points = sum(shape.cells for shape in self.level_shapes)
        if self.values.dim() != 3 or self.values.shape[1] != points:
            raise ValueError(
                f"Memory of shape {tuple(self.values.shape)} does not hold {points} points"
            )
        if self.positional_encoding.shape != self.values.shape[1:]:
            raise ValueError("Positional encoding must be (P, D)")
        return self

    @property
    def width(self) -> int:
        return int(self.values.shape[-1])

    def select(self, index: int | slice) -> "Memory":
        """
        Memory restricted to some images of the batch
        """
        values = self.values[index]
        if values.dim() == 2:
            values = values[None]
        return Memory(
            values=values,
            positional_encoding=self.positional_encoding,
            level_shapes=self.level_shapes,
        )

    def with_values(self, values: torch.Tensor) -> "Memory":
        return Memory(
            values=values,
            positional_encoding=self.positional_encoding,
            level_shapes=self.level_shapes,
        )


class StagePredictions(BaseModel):
    class_logits: torch.Tensor = Field(
        title="Class logits", description="(B, E, G_total, C + 1), background last"
    )
    boxes: torch.Tensor = Field(
        title="Boxes", description="(B, E, G_total, 4) center form in (0, 1)"
    )
    num_regular: int = Field(
        title="Regular queries", description="Leading learnable-query columns", ge=0
    )
    query_digest: str | None = Field(
        default=None,
        title="Query digest",
        description="Digest of the distillation query set these columns came from",
    )
    model_config = ConfigDict(arbitrary_types_allowed=True)

    @property
    def num_stages(self) -> int:
        return int(self.class_logits.shape[1])

    @property
    def num_queries(self) -> int:
        return int(self.class_logits.shape[2])

    def columns(self, index: slice, num_regular: int = 0) -> "StagePredictions":
        return StagePredictions(
            class_logits=self.class_logits[:, :, index],
            boxes=self.boxes[:, :, index],
            num_regular=num_regular,
            query_digest=self.query_digest,
        )

    def regular(self) -> "StagePredictions":
        return self.columns(slice(0, self.num_regular), self.num_regular)

    def extra(self, query_digest: str | None = None) -> "StagePredictions":
        """
        Columns appended after the regular queries
        """
        extra = self.columns(slice(self.num_regular, None))
        if query_digest is not None:
            extra = extra.model_copy(update={"query_digest": query_digest})
        return extra

    def stages(self, index: int | slice) -> "StagePredictions":
        if isinstance(index, int):
            index = slice(index, index + 1 if index != -1 else None)
        return StagePredictions(
            class_logits=self.class_logits[:, index],
            boxes=self.boxes[:, index],
            num_regular=self.num_regular,
            query_digest=self.query_digest,
        )


class Detection(BaseModel):
    class_id: int = Field(title="Class ID", ge=0)
    score: float = Field(title="Score", ge=0.0, le=1.0)
    box: BoundingBox = Field(title="Box")


class PredictOut(BaseModel):
    detections: list[Detection] = Field(
        title="Detections", description="Sorted by non-increasing score"
    )
    image_size: int = Field(title="Image size", ge=1)
