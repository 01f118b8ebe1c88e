"""Dataset samples and the JSON-lines ingestion format.

One JSON object per line with fields: image (path to an 8-bit RGB PNG),
elements (array of {text, bbox: [x0, y0, x1, y1]}), expression, mask (path to
an 8-bit grayscale PNG, nonzero = referred), screen_id. Paths are relative to
the JSONL file. Pixel values convert to reals as value / 255. Generated files
additionally carry a "family" field naming the expression template family;
ingestion treats it as optional.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .elements import Element

MAX_ELEMENTS = 64

SPLIT_NAMES = ("train", "val", "test")


@dataclass
class Sample:
    """One training or evaluation instance."""

    image_u8: np.ndarray   # H x W x 3 uint8
    elements: list[Element]
    expression: str
    mask: np.ndarray       # H x W bool
    screen_id: str = ""
    target_index: int | None = None
    family: str = "unknown"

    def __post_init__(self):
        if not self.mask.any():
            raise ValueError(f"sample {self.screen_id!r}: ground-truth mask is empty")
        if self.mask.shape != self.image_u8.shape[:2]:
            raise ValueError(
                f"sample {self.screen_id!r}: mask {self.mask.shape} does not match "
                f"image {self.image_u8.shape}")

    @property
    def image(self) -> np.ndarray:
        """Image as H x W x 3 float32 in [0, 1]."""
        return self.image_u8.astype(np.float32) / 255.0


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_image(path, image_u8: np.ndarray) -> None:
    Image.fromarray(image_u8, mode="RGB").save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255, mode="L").save(path)


def parse_elements(raw, max_elements: int = MAX_ELEMENTS) -> list[Element]:
    if len(raw) > max_elements:
        raise ValueError(f"{len(raw)} elements exceed the cap of {max_elements}")
    return [Element(text=e["text"], bbox=tuple(float(v) for v in e["bbox"])) for e in raw]


def load_split(jsonl_path, max_elements: int = MAX_ELEMENTS) -> list[Sample]:
    jsonl_path = Path(jsonl_path)
    base = jsonl_path.parent
    samples = []
    with open(jsonl_path) as f:
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                samples.append(Sample(
                    image_u8=read_image(base / rec["image"]),
                    elements=parse_elements(rec["elements"], max_elements),
                    expression=rec["expression"],
                    mask=read_mask(base / rec["mask"]),
                    screen_id=rec["screen_id"],
                    family=rec.get("family", "unknown"),
                ))
            except Exception as e:
                raise ValueError(f"{jsonl_path}, sample {i}: {e}") from e
    return samples


def load_dataset(data_dir) -> dict[str, list[Sample]]:
    data_dir = Path(data_dir)
    return {name: load_split(data_dir / f"{name}.jsonl") for name in SPLIT_NAMES}


def write_split(jsonl_path, records: list[dict]) -> None:
    with open(jsonl_path, "w") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True))
            f.write("\n")
