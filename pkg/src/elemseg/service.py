"""HTTP inference service.

Wraps one loaded checkpoint behind a FastAPI app: clients post a PNG screen,
its elements, and a referring expression, and get back the predicted pixel, a
probability heatmap, and a thresholded mask (both as base64 PNGs). A forward
pass runs one graph on one thread, so requests serialize on a lock.
"""

from __future__ import annotations

import base64
import io
import threading

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field

from .elements import Element
from .model import load_checkpoint, predict_mask, predict_pixel


class ElementIn(BaseModel):
    text: str
    bbox: tuple[float, float, float, float]


class SegmentRequest(BaseModel):
    image_png_b64: str
    expression: str
    elements: list[ElementIn] = Field(default_factory=list)
    threshold: float = 0.5


class SegmentResponse(BaseModel):
    predicted_pixel: tuple[int, int]
    peak_probability: float
    heatmap_png_b64: str
    mask_png_b64: str


class HealthResponse(BaseModel):
    status: str
    checkpoint: str
    image_size: tuple[int, int]


def _decode_image(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        with Image.open(io.BytesIO(raw)) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except Exception as e:
        raise HTTPException(status_code=400, detail=f"cannot decode image: {e}") from e


def _encode_gray(arr: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def create_app(ckpt_path) -> FastAPI:
    model = load_checkpoint(ckpt_path)
    lock = threading.Lock()
    app = FastAPI(title="elemseg", version="0.1.0")

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(
            status="ok",
            checkpoint=str(ckpt_path),
            image_size=(model.config.height, model.config.width),
        )

    @app.post("/segment", response_model=SegmentResponse)
    def segment(req: SegmentRequest):
        cfg = model.config
        image = _decode_image(req.image_png_b64)
        if image.shape[:2] != (cfg.height, cfg.width):
            raise HTTPException(
                status_code=400,
                detail=f"image is {image.shape[1]}x{image.shape[0]}, the loaded model "
                       f"expects {cfg.width}x{cfg.height}")
        if not 0.0 < req.threshold < 1.0:
            raise HTTPException(status_code=400, detail="threshold must be in (0, 1)")
        try:
            elements = [Element(e.text, e.bbox) for e in req.elements]
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e)) from e
        if len(elements) > cfg.max_elements:
            raise HTTPException(
                status_code=400,
                detail=f"{len(elements)} elements exceed the cap of {cfg.max_elements}")
        with lock:
            output = model.infer(image.astype(np.float32) / 255.0, elements, req.expression)
        prob = output.probabilities[..., 1]
        row, col = predict_pixel(output)
        return SegmentResponse(
            predicted_pixel=(row, col),
            peak_probability=float(prob[row, col]),
            heatmap_png_b64=_encode_gray(np.round(prob * 255).astype(np.uint8)),
            mask_png_b64=_encode_gray(
                predict_mask(output, req.threshold).astype(np.uint8) * 255),
        )

    return app
