"""
Services for the harness: teacher training, student distillation, evaluation
and the component / depth ablations
"""

import logging
import os
import random
import time
from collections import deque
from collections.abc import Sequence
from typing import Any

import numpy as np
import torch
from torch.utils.data import DataLoader

from clockdistill import config as settings
from clockdistill.checkpoints import CheckpointMeta, load_detector, save_detector
from clockdistill.data.queries import load_annotations
from clockdistill.data.schemas import AnnotationSet
from clockdistill.data.services import (
    ANNOTATION_FILE,
    DetectionDataset,
    collate_samples,
    generate_dataset,
)
from clockdistill.detector.models import Detector
from clockdistill.detector.schemas import DetectorConfig, Memory, StagePredictions
from clockdistill.detector.services import build_group_mask, detection_loss, postprocess
from clockdistill.distill.models import Adapter, FrozenEmbedders
from clockdistill.distill.schemas import TargetAwareQuerySet
from clockdistill.distill.services import (
    build_target_queries,
    feature_distill_loss,
    logit_distill_loss,
    materialize_queries,
    total_loss,
)
from clockdistill.exceptions import (
    ConfigurationError,
    EmptySplitError,
    NonFiniteLossError,
)
from clockdistill.geometry.services import (
    build_multiscale_masks,
    stack_mask_pairs,
    uniform_masks,
)
from clockdistill.harness.attention import mean_attention_mass
from clockdistill.harness.evaluation import MAX_DETECTIONS, evaluate_detections
from clockdistill.harness.reports import (
    attach_metrics_file,
    format_ablation_table,
    format_report,
    write_report,
    write_summary,
)
from clockdistill.harness.schemas import (
    COMPONENT_CHAIN,
    AblationRow,
    ComponentToggles,
    EvalReport,
    ExperimentConfig,
    OptimizerSettings,
    RunResult,
)

logger = logging.getLogger("harness")
metrics_logger = logging.getLogger("metrics")

TEACHER_CHECKPOINT = "teacher.pt"
STUDENT_CHECKPOINT = "student.pt"
LAST_GOOD_CHECKPOINT = "last_good.pt"
REPORT_FILE = "report.json"


# run setup
def seed_everything(seed: int, deterministic: bool = False) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def resolve_device() -> torch.device:
    return torch.device(settings.DEVICE)


def annotation_path(split: str) -> str:
    """
    Accepts a split directory or an annotation file
    """
    return os.path.join(split, ANNOTATION_FILE) if os.path.isdir(split) else split


def load_split(split: str) -> AnnotationSet:
    annotations = load_annotations(annotation_path(split))
    if not annotations.samples:
        raise EmptySplitError(f"Split {split} holds no images")
    return annotations


def generate_splits(config: ExperimentConfig) -> tuple[str, str]:
    """
    Writes the train and val splits described by the config
    :return: annotation paths of both splits
    """
    workers = 0 if config.deterministic else settings.NUM_WORKERS
    train = generate_dataset(config.data.train, config.train_dir, workers)
    val = generate_dataset(config.data.val, config.val_dir, workers)
    return train, val


def build_loader(
    annotations: AnnotationSet,
    batch_size: int,
    seed: int,
    shuffle: bool = True,
    hflip: bool = False,
    deterministic: bool = False,
) -> DataLoader:
    generator = torch.Generator().manual_seed(seed)
    return DataLoader(
        DetectionDataset(annotations, hflip=hflip),
        batch_size=batch_size,
        shuffle=shuffle,
        generator=generator,
        num_workers=0 if deterministic else settings.NUM_WORKERS,
        collate_fn=collate_samples,
    )


def build_optimizer(
    parameters: Sequence[torch.nn.Parameter], opt: OptimizerSettings, epochs: int
) -> tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.LRScheduler]:
    """
    AdamW with a single step decay after `lr_drop_fraction` of the epochs
    """
    optimizer = torch.optim.AdamW(
        parameters, lr=opt.learning_rate, weight_decay=opt.weight_decay
    )
    milestone = max(1, round(epochs * opt.lr_drop_fraction))
    scheduler = torch.optim.lr_scheduler.MultiStepLR(
        optimizer, milestones=[milestone], gamma=opt.lr_drop_factor
    )
    return optimizer, scheduler


# evaluation
@torch.no_grad()
def evaluate_model(
    model: Detector, annotations: AnnotationSet, batch_size: int = 8
) -> EvalReport:
    """
    Runs the detector over a split and scores it with COCO-style AP
    """
    if annotations.num_classes != model.config.num_classes:
        raise ConfigurationError(
            f"Split has {annotations.num_classes} classes, "
            f"model predicts {model.config.num_classes}"
        )
    model.eval()
    parameter = next(model.parameters())
    loader = build_loader(annotations, batch_size, seed=0, shuffle=False, deterministic=True)
    predictions, targets = [], []
    start = time.perf_counter()
    for images, gts, _ in loader:
        final = model(images.to(device=parameter.device, dtype=parameter.dtype)).stages(-1)
        for b in range(images.shape[0]):
            predictions.append(
                postprocess(
                    final.class_logits[b, 0], final.boxes[b, 0], MAX_DETECTIONS, 0.0
                )
            )
        targets.extend(gts)
    seconds = time.perf_counter() - start
    report = evaluate_detections(
        predictions, targets, annotations.class_names, model.config.image_size
    )
    return report.model_copy(
        update={
            "seconds": seconds,
            "images_per_second": len(predictions) / seconds if seconds > 0 else 0.0,
        }
    )


def evaluate(checkpoint: str, split: str) -> EvalReport:
    """
    :param checkpoint: detector checkpoint
    :param split: split directory or annotation file
    :raises EmptySplitError: when the split holds no images
    """
    model, meta = load_detector(checkpoint)
    model.to(resolve_device())
    report = evaluate_model(model, load_split(split))
    logger.info(
        "Evaluation finished",
        extra={"checkpoint": checkpoint, "role": meta.role, "ap": report.ap},
    )
    metrics_logger.info("evaluation", extra={"checkpoint": checkpoint, **report.model_dump()})
    return report


# training
class _StepLogger:
    """
    Emits one metrics record per step and a moving average every `log_every` steps
    """

    def __init__(self, run: str, log_every: int) -> None:
        self.run = run
        self.log_every = log_every
        self.window: deque[float] = deque(maxlen=log_every)
        self.losses: list[float] = []

    def __call__(
        self, step: int, epoch: int, terms: dict[str, float], lr: float
    ) -> None:
        loss = sum(terms.values())
        self.losses.append(loss)
        self.window.append(loss)
        metrics_logger.info(
            "step",
            extra={"run": self.run, "step": step, "epoch": epoch, "loss": loss, "lr": lr, **terms},
        )
        if step % self.log_every == 0:
            logger.info(
                "Training progress",
                extra={
                    "run": self.run,
                    "step": step,
                    "moving_average": sum(self.window) / len(self.window),
                },
            )


def _optimizer_step(
    loss: torch.Tensor,
    optimizer: torch.optim.Optimizer,
    parameters: Sequence[torch.nn.Parameter],
    grad_clip: float,
) -> None:
    optimizer.zero_grad()
    loss.backward()
    if grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(parameters, grad_clip)
    optimizer.step()


def _save_last_good(
    out_dir: str,
    model: Detector,
    meta: CheckpointMeta,
    error: NonFiniteLossError,
    extra_state: dict[str, dict[str, torch.Tensor]] | None = None,
) -> None:
    """
    Parameters from before the failing step, with the offending terms as text
    """
    path = os.path.join(out_dir, LAST_GOOD_CHECKPOINT)
    diagnostics = {name: str(value) for name, value in error.diagnostics.items()}
    meta.extra["diagnostics"] = diagnostics
    save_detector(path, model, meta, extra_state)
    logger.error(
        "Non-finite loss, training aborted",
        extra={"step": meta.step, "checkpoint": path, **diagnostics},
    )


def _finish_run(
    config: ExperimentConfig,
    model: Detector,
    out_dir: str,
    name: str,
    meta: CheckpointMeta,
    losses: list[float],
    extra_state: dict[str, dict[str, torch.Tensor]] | None = None,
) -> RunResult:
    report = evaluate_model(model, load_split(config.val_dir))
    meta.extra["report"] = report.model_dump()
    checkpoint = save_detector(os.path.join(out_dir, name), model, meta, extra_state)
    write_report(os.path.join(out_dir, REPORT_FILE), report)
    write_summary(out_dir, format_report(f"{meta.role} ({out_dir})", report))
    metrics_logger.info("evaluation", extra={"run": meta.role, **report.model_dump()})
    return RunResult(checkpoint=checkpoint, report=report, losses=losses, steps=meta.step)


def train_detector(
    detector_config: DetectorConfig,
    config: ExperimentConfig,
    role: str,
    epochs: int,
    checkpoint_name: str,
) -> RunResult:
    """
    Plain training with the set criterion only
    :param detector_config: architecture to train
    :param config: data, optimizer, seed and output settings
    :param role: name stored in the checkpoint metadata
    :param epochs: passes over the train split
    :param checkpoint_name: file name inside the output directory
    """
    out_dir = config.out_dir
    with attach_metrics_file(out_dir):
        seed_everything(config.seed, config.deterministic)
        device = resolve_device()
        train = load_split(config.train_dir)
        model = Detector(detector_config).to(device)
        parameters = list(model.parameters())
        optimizer, scheduler = build_optimizer(parameters, config.optimizer, epochs)
        loader = build_loader(
            train,
            config.optimizer.batch_size,
            config.seed,
            hflip=config.data.hflip,
            deterministic=config.deterministic,
        )
        log_step = _StepLogger(role, config.optimizer.log_every)
        logger.info(
            "Training started", extra={"run": role, "epochs": epochs, "seed": config.seed}
        )
        step = 0
        for epoch in range(epochs):
            model.train()
            for images, gts, _ in loader:
                predictions = model(images.to(device))
                l_det = detection_loss(predictions, gts, detector_config)
                zero = l_det.new_zeros(())
                try:
                    loss = total_loss(zero, zero, l_det)
                except NonFiniteLossError as e:
                    _save_last_good(
                        out_dir, model, CheckpointMeta(seed=config.seed, step=step, role=role), e
                    )
                    raise
                _optimizer_step(loss, optimizer, parameters, config.optimizer.grad_clip)
                step += 1
                log_step(
                    step,
                    epoch,
                    {"l_lcmd": 0.0, "l_tcld": 0.0, "l_det": float(l_det)},
                    scheduler.get_last_lr()[0],
                )
            scheduler.step()
        meta = CheckpointMeta(seed=config.seed, step=step, role=role)
        return _finish_run(config, model, out_dir, checkpoint_name, meta, log_step.losses)


def train_teacher(config: ExperimentConfig) -> RunResult:
    return train_detector(
        config.teacher,
        config,
        "teacher",
        config.optimizer.teacher_epochs,
        TEACHER_CHECKPOINT,
    )


def check_compatible(teacher: DetectorConfig, student: DetectorConfig) -> None:
    """
    Teacher and student must see the same grids and classes; widths may differ
    """
    if teacher.level_shapes != student.level_shapes:
        raise ConfigurationError(
            "Teacher and student feature levels differ and no adapter can reconcile them"
        )
    if teacher.num_classes != student.num_classes:
        raise ConfigurationError("Teacher and student must share the class set")


def _query_seed(seed: int, step: int, image_id: int) -> int:
    return (seed * 1_000_003 + step * 10_007 + image_id) % (2**63)


def decode_with_queries(
    model: Detector,
    memory: Memory,
    query_set: TargetAwareQuerySet,
    embedders: FrozenEmbedders,
    location: torch.Tensor | None = None,
    query_digest: str | None = None,
) -> tuple[StagePredictions, StagePredictions]:
    """
    Decodes one image with the distillation queries appended behind the group mask
    :param location: (P,) mask applied to the memory seen by the distillation
        queries only
    :return: (distillation columns, regular columns)
    """
    values = memory.values
    content = materialize_queries(query_set, embedders, model.config.embed_dim)
    content = content.to(device=values.device, dtype=values.dtype)
    boxes = query_set.positional_params.to(device=values.device, dtype=values.dtype)
    group_mask = build_group_mask(model.config.num_object_queries, query_set.group_id)
    group_mask = group_mask.to(values.device)
    if location is None:
        joint = model.decode(memory, content, boxes, group_mask)
        return joint.extra(query_digest), joint.regular()
    masked = memory.with_values(values * location.to(values)[None, :, None])
    extra = model.decode(masked, content, boxes, group_mask).extra(query_digest)
    return extra, model.decode(memory).regular()


def _concat(parts: Sequence[StagePredictions]) -> StagePredictions:
    return StagePredictions(
        class_logits=torch.cat([p.class_logits for p in parts]),
        boxes=torch.cat([p.boxes for p in parts]),
        num_regular=parts[0].num_regular,
    )


def distill_student(config: ExperimentConfig, teacher_checkpoint: str) -> RunResult:
    """
    Trains the student on L_lcmd [memory_distill] + L_tcld [target_queries] + L_det
    against a frozen teacher. With every toggle off the loss stream equals
    plain training of the student.
    :param config: student architecture, distillation settings and toggles
    :param teacher_checkpoint: trained teacher
    :raises ConfigurationError: on incompatible teacher and student grids
    """
    toggles, dcfg = config.toggles, config.distill
    out_dir = config.out_dir
    run = f"student[{toggles.label}]"
    with attach_metrics_file(out_dir):
        device = resolve_device()
        # loaded before seeding so the student initialisation matches plain training
        teacher, _ = load_detector(teacher_checkpoint)
        teacher.to(device).eval()
        teacher.requires_grad_(False)
        check_compatible(teacher.config, config.student)

        seed_everything(config.seed, config.deterministic)
        train = load_split(config.train_dir)
        student = Detector(config.student).to(device)
        shapes = config.student.level_shapes
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(dcfg.embedder_seed + 1)
            adapter = Adapter(
                config.student.embed_dim,
                teacher.config.embed_dim,
                config.student.backbone_channels,
                teacher.config.backbone_channels,
                len(shapes),
            ).to(device)
        embedders = None
        if toggles.target_queries:
            embedders = FrozenEmbedders(
                config.student.num_classes,
                dcfg.query_dim or teacher.config.embed_dim,
                dcfg.num_distill_points,
                dcfg.embedder_seed,
                [teacher.config.embed_dim, config.student.embed_dim],
            ).to(device)

        parameters = list(student.parameters())
        if toggles.memory_distill:
            parameters += list(adapter.parameters())
        optimizer, scheduler = build_optimizer(
            parameters, config.optimizer, config.optimizer.epochs
        )
        loader = build_loader(
            train,
            config.optimizer.batch_size,
            config.seed,
            hflip=config.data.hflip,
            deterministic=config.deterministic,
        )
        log_step = _StepLogger(run, config.optimizer.log_every)
        logger.info(
            "Distillation started",
            extra={"run": run, "toggles": toggles.model_dump(), "seed": config.seed},
        )

        step = 0
        for epoch in range(config.optimizer.epochs):
            student.train()
            for images, gts, ids in loader:
                images = images.to(device)
                features_s, memory_s = student.encode(images)
                zero = memory_s.values.new_zeros(())
                l_lcmd, l_tcld = zero, zero
                if toggles.memory_distill or toggles.target_queries:
                    with torch.no_grad():
                        features_t, memory_t = teacher.encode(images)

                if toggles.memory_distill:
                    masks = stack_mask_pairs(
                        [
                            build_multiscale_masks(g, shapes, dcfg.mask_membership)
                            if toggles.location_mask
                            else uniform_masks(shapes)
                            for g in gts
                        ]
                    )
                    l_lcmd = feature_distill_loss(
                        dcfg.recipe,
                        (features_t, memory_t),
                        (features_s, memory_s),
                        masks,
                        dcfg,
                        adapter,
                    )

                if toggles.target_queries and embedders is not None:
                    regular, per_image = [], []
                    for b, image_gts in enumerate(gts):
                        query_set = build_target_queries(
                            image_gts, embedders, dcfg, _query_seed(config.seed, step, ids[b])
                        )
                        if not len(query_set):
                            regular.append(student.decode(memory_s.select(b)))
                            continue
                        digest = query_set.digest() if dcfg.debug_consistency else None
                        location = (
                            build_multiscale_masks(image_gts, shapes, dcfg.mask_membership).location
                            if dcfg.mask_decoder_memory
                            else None
                        )
                        s_extra, s_regular = decode_with_queries(
                            student, memory_s.select(b), query_set, embedders, location, digest
                        )
                        with torch.no_grad():
                            t_extra, _ = decode_with_queries(
                                teacher, memory_t.select(b), query_set, embedders, location, digest
                            )
                        per_image.append(logit_distill_loss(t_extra, s_extra, dcfg))
                        regular.append(s_regular)
                    predictions = _concat(regular)
                    if per_image:
                        l_tcld = torch.stack(per_image).mean()
                else:
                    predictions = student.decode(memory_s)

                l_det = detection_loss(predictions, gts, config.student)
                try:
                    loss = total_loss(l_lcmd, l_tcld, l_det)
                except NonFiniteLossError as e:
                    _save_last_good(
                        out_dir,
                        student,
                        CheckpointMeta(
                            seed=config.seed,
                            step=step,
                            role="student",
                            extra={"toggles": toggles.model_dump()},
                        ),
                        e,
                        {"adapter": adapter.state_dict()},
                    )
                    raise
                _optimizer_step(loss, optimizer, parameters, config.optimizer.grad_clip)
                step += 1
                log_step(
                    step,
                    epoch,
                    {"l_lcmd": float(l_lcmd), "l_tcld": float(l_tcld), "l_det": float(l_det)},
                    scheduler.get_last_lr()[0],
                )
            scheduler.step()

        meta = CheckpointMeta(
            seed=config.seed,
            step=step,
            role="student",
            extra={"toggles": toggles.model_dump(), "teacher": teacher_checkpoint},
        )
        return _finish_run(
            config,
            student,
            out_dir,
            STUDENT_CHECKPOINT,
            meta,
            log_step.losses,
            {"adapter": adapter.state_dict()},
        )


# ablations
def _variant(
    config: ExperimentConfig,
    seed: int,
    toggles: ComponentToggles,
    out_dir: str,
    student: DetectorConfig | None = None,
) -> ExperimentConfig:
    update: dict[str, Any] = {"seed": seed, "toggles": toggles, "out_dir": out_dir}
    if student is not None:
        update["student"] = student
    return config.model_copy(update=update, deep=True)


def _row(
    config: ExperimentConfig, result: RunResult, label: str, attention: bool
) -> AblationRow:
    mass = None
    if attention:
        model, _ = load_detector(result.checkpoint)
        mass = mean_attention_mass(
            model.to(resolve_device()), load_split(config.val_dir), config.attention_images
        )
    row = AblationRow(
        label=label,
        seed=config.seed,
        encoder_layers=config.student.encoder_layers,
        decoder_layers=config.student.decoder_layers,
        report=result.report,
        attention_mass=mass,
    )
    metrics_logger.info("ablation_row", extra=row.model_dump(mode="json"))
    return row


def run_component_ablation(
    config: ExperimentConfig, teacher_checkpoint: str
) -> list[AblationRow]:
    """
    Baseline, Mem, Mem+LM and Mem+LM+TQ for every configured seed, one table
    """
    rows = []
    with attach_metrics_file(config.out_dir):
        for seed in config.seeds:
            for toggles in COMPONENT_CHAIN:
                variant = _variant(
                    config,
                    seed,
                    toggles,
                    os.path.join(config.out_dir, f"seed{seed}", toggles.label),
                )
                result = distill_student(variant, teacher_checkpoint)
                rows.append(_row(variant, result, toggles.label, attention=True))
    write_summary(config.out_dir, format_ablation_table("Component ablation", rows))
    return rows


def run_layer_ablation(
    config: ExperimentConfig, teacher_checkpoint: str
) -> list[AblationRow]:
    """
    Baseline and distilled student for every (encoder, decoder) depth in grid order.
    Distillation only touches the final encoder output and final decoder stage
    when depths differ from the teacher.
    """
    distilled = config.toggles if config.toggles.distills else COMPONENT_CHAIN[-1]
    rows = []
    with attach_metrics_file(config.out_dir):
        for encoder_layers, decoder_layers in config.layer_grid:
            student = config.student.model_copy(
                update={"encoder_layers": encoder_layers, "decoder_layers": decoder_layers}
            )
            cell = f"enc{encoder_layers}_dec{decoder_layers}"
            for seed in config.seeds:
                for label, toggles in (("baseline", COMPONENT_CHAIN[0]), ("distilled", distilled)):
                    variant = _variant(
                        config,
                        seed,
                        toggles,
                        os.path.join(config.out_dir, cell, f"seed{seed}", label),
                        student,
                    )
                    result = distill_student(variant, teacher_checkpoint)
                    rows.append(_row(variant, result, label, attention=False))
    write_summary(config.out_dir, format_ablation_table("Depth ablation", rows))
    return rows
