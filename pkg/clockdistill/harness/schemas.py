"""
Schemas for the harness: experiment configuration, reports and ablation rows
"""

from pydantic import BaseModel, Field, model_validator

from clockdistill.data.schemas import DatasetSpec
from clockdistill.detector.schemas import DetectorConfig
from clockdistill.distill.schemas import DistillConfig


def _reference_teacher() -> DetectorConfig:
    return DetectorConfig(embed_dim=128, encoder_layers=4, decoder_layers=4)


class ComponentToggles(BaseModel):
    memory_distill: bool = Field(default=False, title="Memory distillation")
    location_mask: bool = Field(
        default=False,
        title="Location mask",
        description="Use M and S in the memory loss instead of uniform weights",
    )
    target_queries: bool = Field(
        default=False, title="Target-aware queries", description="Enables the logit term"
    )
    custom: bool = Field(
        default=False,
        title="Custom combination",
        description="Allows combinations outside the cumulative chain",
    )

    @model_validator(mode="after")
    def check_chain(self) -> "ComponentToggles":
        if self.custom:
            return self
        if self.location_mask and not self.memory_distill:
            raise ValueError("location_mask requires memory_distill")
        if self.target_queries and not (self.memory_distill and self.location_mask):
            raise ValueError("target_queries requires memory_distill and location_mask")
        return self

    @property
    def label(self) -> str:
        parts = [
            name
            for name, on in (
                ("Mem", self.memory_distill),
                ("LM", self.location_mask),
                ("TQ", self.target_queries),
            )
            if on
        ]
        return "+".join(parts) if parts else "baseline"

    @property
    def distills(self) -> bool:
        return self.memory_distill or self.target_queries


# cumulative chain: baseline, Mem, Mem+LM, Mem+LM+TQ
COMPONENT_CHAIN: list[ComponentToggles] = [
    ComponentToggles(),
    ComponentToggles(memory_distill=True),
    ComponentToggles(memory_distill=True, location_mask=True),
    ComponentToggles(memory_distill=True, location_mask=True, target_queries=True),
]


class OptimizerSettings(BaseModel):
    learning_rate: float = Field(default=1e-4, title="Learning rate", gt=0.0)
    weight_decay: float = Field(default=1e-4, title="Decoupled weight decay", ge=0.0)
    epochs: int = Field(default=12, title="Student epochs", ge=0)
    teacher_epochs: int = Field(default=24, title="Teacher epochs", ge=0)
    batch_size: int = Field(default=8, title="Batch size", ge=1)
    lr_drop_fraction: float = Field(
        default=0.8,
        title="Step decay point",
        description="Fraction of the epochs after which the rate drops once",
        gt=0.0,
        le=1.0,
    )
    lr_drop_factor: float = Field(default=0.1, title="Step decay factor", gt=0.0)
    grad_clip: float = Field(
        default=0.1, title="Gradient clipping", description="Max norm, 0 disables", ge=0.0
    )
    log_every: int = Field(default=10, title="Moving-average log interval", ge=1)


class DataSettings(BaseModel):
    root: str = Field(default="data", title="Dataset root")
    train: DatasetSpec = Field(default_factory=lambda: DatasetSpec(num_images=400))
    val: DatasetSpec = Field(
        default_factory=lambda: DatasetSpec(num_images=100, seed=1)
    )
    hflip: bool = Field(default=True, title="Horizontal flip during training")


class ExperimentConfig(BaseModel):
    teacher: DetectorConfig = Field(default_factory=_reference_teacher)
    student: DetectorConfig = Field(default_factory=DetectorConfig)
    distill: DistillConfig = Field(default_factory=DistillConfig)
    data: DataSettings = Field(default_factory=DataSettings)
    optimizer: OptimizerSettings = Field(default_factory=OptimizerSettings)
    toggles: ComponentToggles = Field(
        default_factory=lambda: COMPONENT_CHAIN[-1].model_copy()
    )
    seed: int = Field(default=0, title="Seed")
    seeds: list[int] = Field(default=[0, 1, 2], title="Seeds for ablations")
    deterministic: bool = Field(
        default=False,
        title="Deterministic mode",
        description="Deterministic kernels, one thread, no loader workers",
    )
    out_dir: str = Field(default="runs/default", title="Output directory")
    layer_grid: list[tuple[int, int]] = Field(
        default=[(2, 2), (1, 2), (2, 1), (1, 1)],
        title="Student (encoder, decoder) depth grid",
    )
    attention_images: int = Field(
        default=20, title="Images used for the attention-mass metric", ge=1
    )

    @model_validator(mode="after")
    def check_sizes(self) -> "ExperimentConfig":
        for name, spec in (("train", self.data.train), ("val", self.data.val)):
            for detector in (self.teacher, self.student):
                if spec.image_size != detector.image_size:
                    raise ValueError(
                        f"{name} images are {spec.image_size}px, "
                        f"detector expects {detector.image_size}px"
                    )
            if len(spec.classes) != self.student.num_classes:
                raise ValueError(f"{name} split has {len(spec.classes)} classes")
        if self.teacher.num_classes != self.student.num_classes:
            raise ValueError("Teacher and student must share the class set")
        return self

    @property
    def train_dir(self) -> str:
        return f"{self.data.root}/train"

    @property
    def val_dir(self) -> str:
        return f"{self.data.root}/val"


class EvalReport(BaseModel):
    ap: float | None = Field(title="AP", description="IoU .50:.95, 101-point", ge=0, le=1)
    ap50: float | None = Field(title="AP50", ge=0, le=1)
    ap75: float | None = Field(title="AP75", ge=0, le=1)
    ap_small: float | None = Field(default=None, title="AP small", ge=0, le=1)
    ap_medium: float | None = Field(default=None, title="AP medium", ge=0, le=1)
    ap_large: float | None = Field(default=None, title="AP large", ge=0, le=1)
    per_class: dict[str, float | None] = Field(default_factory=dict, title="AP per class")
    num_images: int = Field(default=0, title="Images", ge=0)
    num_detections: int = Field(default=0, title="Detections", ge=0)
    seconds: float = Field(default=0.0, title="Evaluation time", ge=0)
    images_per_second: float = Field(default=0.0, title="Throughput", ge=0)


class RunResult(BaseModel):
    checkpoint: str = Field(title="Checkpoint path")
    report: EvalReport = Field(title="Validation report")
    losses: list[float] = Field(default_factory=list, title="Total loss per step")
    steps: int = Field(default=0, title="Optimizer steps", ge=0)


class AblationRow(BaseModel):
    label: str = Field(title="Row label")
    seed: int = Field(title="Seed")
    encoder_layers: int = Field(title="Student encoder layers")
    decoder_layers: int = Field(title="Student decoder layers")
    report: EvalReport = Field(title="Validation report")
    attention_mass: float | None = Field(
        default=None,
        title="Attention mass inside boxes",
        description="Mean share of encoder attention received by cells inside boxes",
    )
