"""
Checkpoint persistence: a single torch archive holding the config as JSON
text, the named parameter arrays, the RNG seed and the step counter
"""

import json
import logging
import os
from typing import Any

import torch
from pydantic import BaseModel, Field

from clockdistill.detector.models import Detector
from clockdistill.detector.schemas import DetectorConfig

logger = logging.getLogger("harness")


class CheckpointMeta(BaseModel):
    seed: int = Field(title="Seed", description="RNG seed of the run")
    step: int = Field(title="Step", description="Optimizer steps taken", ge=0)
    role: str = Field(default="detector", title="Role", description="teacher / student")
    extra: dict[str, Any] = Field(default_factory=dict, title="Extra metadata")


def save_detector(
    path: str,
    model: Detector,
    meta: CheckpointMeta,
    extra_state: dict[str, dict[str, torch.Tensor]] | None = None,
) -> str:
    """
    Writes a checkpoint archive
    :param path: target file, parent directories are created
    :param model: detector whose config and parameters are saved
    :param meta: seed, step counter and free-form metadata
    :param extra_state: additional named state dicts (e.g. adapters)
    :return: the path written
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    archive = {
        "config": model.config.model_dump_json(),
        "meta": meta.model_dump_json(),
        "parameters": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "extra_state": {
            name: {k: v.detach().cpu() for k, v in state.items()}
            for name, state in (extra_state or {}).items()
        },
    }
    torch.save(archive, path)
    logger.info("Checkpoint saved", extra={"path": path, "step": meta.step})
    return path


def load_archive(path: str) -> dict[str, Any]:
    archive: dict[str, Any] = torch.load(path, map_location="cpu", weights_only=True)
    return archive


def load_detector(path: str) -> tuple[Detector, CheckpointMeta]:
    """
    Rebuilds a detector from a checkpoint archive, parameters restored bit-exactly
    :param path: checkpoint file
    :return: (model, metadata)
    """
    archive = load_archive(path)
    config = DetectorConfig.model_validate_json(archive["config"])
    model = Detector(config)
    parameters = archive["parameters"]
    dtype = next(iter(parameters.values())).dtype if parameters else torch.float32
    model.to(dtype)
    model.load_state_dict(parameters)
    meta = CheckpointMeta.model_validate(json.loads(archive["meta"]))
    return model, meta
