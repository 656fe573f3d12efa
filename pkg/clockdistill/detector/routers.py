"""
Routing file for the detector package, all paths are prefixed with /detector
"""

import io
import logging

import numpy as np
import torch
from fastapi import APIRouter, Depends, File, HTTPException, UploadFile
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from clockdistill import config
from clockdistill.detector.schemas import PredictOut
from clockdistill.detector.services import Predictor

logger = logging.getLogger("detector")

router = APIRouter(prefix="/detector", tags=["detector"])

_predictor = Predictor()


def get_predictor() -> Predictor:
    """
    Yields the served predictor, loading CLOCKDISTILL_CHECKPOINT on first use
    :return: loaded predictor, else raise HTTPException
    """
    if not _predictor.is_loaded and config.SERVED_CHECKPOINT:
        _predictor.load(config.SERVED_CHECKPOINT)
    if not _predictor.is_loaded:
        raise HTTPException(status_code=503, detail="No detector checkpoint loaded")
    return _predictor


@router.post("/predict", response_model=PredictOut)
async def predict(
    image: UploadFile = File(...),
    top_k: int = 100,
    score_threshold: float = 0.0,
    predictor: Predictor = Depends(get_predictor),
) -> JSONResponse | PredictOut:
    # decode PNG/JPEG upload
    try:
        pil = Image.open(io.BytesIO(await image.read())).convert("RGB")
    except UnidentifiedImageError:
        return JSONResponse(status_code=400, content={"message": "Invalid image"})
    size = predictor.model.config.image_size if predictor.model else 0
    if pil.size != (size, size):
        return JSONResponse(
            status_code=400,
            content={"message": f"Image must be {size}x{size}, got {pil.size}"},
        )
    tensor = torch.from_numpy(np.asarray(pil, dtype=np.float32) / 255.0).permute(2, 0, 1)
    detections = predictor.predict(tensor, top_k=top_k, score_threshold=score_threshold)
    logger.info("Prediction served", extra={"detections": len(detections)})
    return PredictOut(detections=detections, image_size=size)
