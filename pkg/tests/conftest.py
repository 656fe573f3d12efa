import os
import tempfile
from typing import AsyncGenerator

# keep test logs out of the package directory
os.environ.setdefault("CLOCKDISTILL_LOG_DIR", tempfile.mkdtemp(prefix="clockdistill-logs-"))

import pytest
import pytest_asyncio
import torch
from dotenv import load_dotenv
from httpx import ASGITransport, AsyncClient

from clockdistill.data.schemas import DatasetSpec
from clockdistill.detector.models import Detector
from clockdistill.detector.routers import get_predictor
from clockdistill.detector.schemas import DetectorConfig
from clockdistill.detector.services import Predictor
from clockdistill.harness.schemas import (
    DataSettings,
    ExperimentConfig,
    OptimizerSettings,
)
from clockdistill.harness.services import generate_splits
from clockdistill.main import app
from clockdistill.schemas import BoundingBox, GroundTruthInstance

# Load test environment variables
load_dotenv()

IMAGE_SIZE = 32


def make_gt(class_id: int, cx: float, cy: float, w: float, h: float) -> GroundTruthInstance:
    return GroundTruthInstance(class_id=class_id, box=BoundingBox(cx=cx, cy=cy, w=w, h=h))


def tiny_detector_config(**overrides: object) -> DetectorConfig:
    values: dict[str, object] = {
        "embed_dim": 16,
        "encoder_layers": 1,
        "decoder_layers": 2,
        "attention_heads": 2,
        "num_object_queries": 6,
        "num_classes": 3,
        "mlp_hidden": 32,
        "image_size": IMAGE_SIZE,
        "strides": [8],
        "backbone_channels": 8,
    }
    values.update(overrides)
    return DetectorConfig.model_validate(values)


# 1. Small detectors
@pytest.fixture
def detector_config() -> DetectorConfig:
    return tiny_detector_config()


@pytest.fixture
def detector(detector_config: DetectorConfig) -> Detector:
    """
    Seeded tiny detector in eval mode
    """
    torch.manual_seed(0)
    return Detector(detector_config).eval()


# 2. On-disk synthetic splits, generated once per session
@pytest.fixture(scope="session")
def data_root(tmp_path_factory: pytest.TempPathFactory) -> str:
    root = str(tmp_path_factory.mktemp("shapes"))
    config = ExperimentConfig(
        teacher=tiny_detector_config(),
        student=tiny_detector_config(),
        data=DataSettings(
            root=root,
            train=DatasetSpec(num_images=8, image_size=IMAGE_SIZE, seed=0),
            val=DatasetSpec(num_images=4, image_size=IMAGE_SIZE, seed=1),
            hflip=False,
        ),
    )
    generate_splits(config)
    return root


@pytest.fixture
def experiment_config(data_root: str, tmp_path: str) -> ExperimentConfig:
    """
    One-epoch experiment over the session splits, writing into a fresh directory
    """
    return ExperimentConfig(
        teacher=tiny_detector_config(embed_dim=32, backbone_channels=16),
        student=tiny_detector_config(),
        data=DataSettings(
            root=data_root,
            train=DatasetSpec(num_images=8, image_size=IMAGE_SIZE, seed=0),
            val=DatasetSpec(num_images=4, image_size=IMAGE_SIZE, seed=1),
            hflip=False,
        ),
        optimizer=OptimizerSettings(epochs=1, teacher_epochs=1, batch_size=4, log_every=1),
        seeds=[0],
        deterministic=True,
        out_dir=str(tmp_path),
    )


# 3. Async HTTP client with an injected predictor
@pytest.fixture
def predictor(detector: Detector) -> Predictor:
    return Predictor(detector)


@pytest_asyncio.fixture
async def async_client(predictor: Predictor) -> AsyncGenerator[AsyncClient, None]:
    """
    Provides an AsyncClient for testing FastAPI endpoints with a loaded predictor
    """
    app.dependency_overrides[get_predictor] = lambda: predictor
    transport = ASGITransport(app=app)
    async with AsyncClient(transport=transport, base_url="http://test") as client:
        yield client
    # Clean up dependency override after the test
    app.dependency_overrides.pop(get_predictor)
