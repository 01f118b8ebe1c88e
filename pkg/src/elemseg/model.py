"""End-to-end segmentation model.

Pipeline: image backbone at the configured output stride, tiled expression
embedding, element field map (projected or tile-averaged), fusion through a
small CNN, residual sum with the image features, per-pixel 2-class softmax.
Ablation switches substitute zero maps rather than removing layers, so the
parameter set is identical across ablations.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import textenc
from .elements import Element, attend_elements, embed_elements
from .overlay import project_elements, tile_average_baseline
from .tensor import Graph, Tensor, load_params, save_params


@dataclass(frozen=True)
class ModelConfig:
    height: int = 64
    width: int = 64
    stride: int = 4
    d_text: int = 64
    d_embed: int = 64
    d_img: int = 32
    backbone_channels: tuple[int, ...] = (16, 32)
    fusion_channels: int = 32
    element_hidden: int = 64
    use_image: bool = True
    use_elements: bool = True
    use_projection: bool = True
    max_elements: int = 64
    seed: int = 0
    text_seed: int = textenc.DEFAULT_SEED

    def __post_init__(self):
        for field in ("height", "width", "stride", "d_text", "d_embed", "d_img",
                      "fusion_channels", "element_hidden", "max_elements"):
            if getattr(self, field) < 1:
                raise ValueError(f"{field} must be positive")
        if self.height % self.stride or self.width % self.stride:
            raise ValueError(
                f"image extents {self.height}x{self.width} must be divisible by stride {self.stride}")
        n_down = self.stride.bit_length() - 1
        if 2 ** n_down != self.stride or n_down > len(self.backbone_channels) + 1:
            raise ValueError(f"stride must be a power of two realizable by the backbone, got {self.stride}")
        if self.use_projection and not self.use_elements:
            raise ValueError("use_projection requires use_elements")
        if not (self.use_image or self.use_elements):
            raise ValueError("at least one of use_image, use_elements must be enabled")
        if self.use_elements and self.d_embed != self.d_text:
            raise ValueError(
                f"attention shares its projection, so d_embed ({self.d_embed}) "
                f"must equal d_text ({self.d_text})")

    @property
    def feature_extents(self) -> tuple[int, int]:
        return self.height // self.stride, self.width // self.stride

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["backbone_channels"] = list(self.backbone_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "backbone_channels" in d:
            d["backbone_channels"] = tuple(d["backbone_channels"])
        return cls(**d)


@dataclass
class SegmentationOutput:
    """Per-pixel class probabilities (background, referred) plus raw logits."""

    probabilities: np.ndarray  # H x W x 2
    logits: np.ndarray         # H x W x 2


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(np.float32)


class SegmentationModel:
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        self.graph = Graph(dtype=dtype)
        self._build(np.random.default_rng(config.seed))

    # ------------------------------------------------------------------ #

    def _conv(self, rng, name: str, k: int, cin: int, cout: int) -> tuple[Tensor, Tensor]:
        kern = self.graph.parameter(
            f"{name}.kernel", _glorot(rng, (k, k, cin, cout), k * k * cin, k * k * cout))
        bias = self.graph.parameter(f"{name}.bias", np.zeros(cout, dtype=np.float32))
        return kern, bias

    def _fc(self, rng, name: str, n: int, m: int) -> tuple[Tensor, Tensor]:
        w = self.graph.parameter(f"{name}.weight", _glorot(rng, (n, m), n, m))
        b = self.graph.parameter(f"{name}.bias", np.zeros(m, dtype=np.float32))
        return w, b

    def _build(self, rng) -> None:
        cfg = self.config
        n_down = cfg.stride.bit_length() - 1
        plan = (3,) + cfg.backbone_channels + (cfg.d_img,)
        self._backbone = []
        for i, (cin, cout) in enumerate(zip(plan[:-1], plan[1:])):
            stride = 2 if i < n_down else 1
            kern, bias = self._conv(rng, f"backbone.{i}", 3, cin, cout)
            self._backbone.append((kern, bias, stride))
        self._cnn2 = self._conv(rng, "field", 3, cfg.d_embed, cfg.fusion_channels)
        concat_depth = cfg.d_text + cfg.d_img + cfg.fusion_channels
        self._cnn3a = self._conv(rng, "fuse.0", 3, concat_depth, cfg.fusion_channels)
        self._cnn3b = self._conv(rng, "fuse.1", 3, cfg.fusion_channels, cfg.d_img)
        self._cnn4 = self._conv(rng, "classify", 3, cfg.d_img, 2)
        self._el_fc1 = self._fc(rng, "element.fc1", 4 + cfg.d_text, cfg.element_hidden)
        self._el_fc2 = self._fc(rng, "element.fc2", cfg.element_hidden, cfg.d_embed)
        self._attn = self._fc(rng, "attention", cfg.d_embed, cfg.d_embed)

    def _encode(self, text: str) -> np.ndarray:
        return textenc.encode_text(text, self.config.d_text, self.config.text_seed)

    # ------------------------------------------------------------------ #

    def forward_logits(self, image: np.ndarray, elements: Sequence[Element],
                       expression: str) -> Tensor:
        """Full-resolution H x W x 2 logit map; records on the model graph."""
        cfg = self.config
        g = self.graph
        if image.shape != (cfg.height, cfg.width, 3):
            raise ValueError(
                f"image shape {image.shape} does not match configured "
                f"{(cfg.height, cfg.width, 3)}")
        if len(elements) > cfg.max_elements:
            raise ValueError(f"{len(elements)} elements exceed the cap of {cfg.max_elements}")
        h_f, w_f = cfg.feature_extents

        if cfg.use_image:
            t = g.constant(image)
            for kern, bias, stride in self._backbone:
                t = g.relu(g.conv2d(t, kern, bias, stride=stride, padding="same"))
            i_embed = t
        else:
            i_embed = g.constant(np.zeros((h_f, w_f, cfg.d_img), dtype=np.float32))

        r_vec = self._encode(expression)
        r_overlay = g.tile_spatial(g.constant(r_vec), h_f, w_f)

        if cfg.use_elements:
            if elements:
                embeds = embed_elements(g, elements, self._encode, *self._el_fc1, *self._el_fc2)
                attended, _ = attend_elements(g, r_vec, embeds, *self._attn)
                if cfg.use_projection:
                    e_all = project_elements(g, attended, [el.bbox for el in elements],
                                             h_f, w_f, cfg.d_embed)
                else:
                    e_all = tile_average_baseline(g, attended, h_f, w_f, cfg.d_embed)
            else:
                e_all = g.constant(np.zeros((h_f, w_f, cfg.d_embed), dtype=np.float32))
            e_proc = g.relu(g.conv2d(e_all, *self._cnn2))
        else:
            e_proc = g.constant(np.zeros((h_f, w_f, cfg.fusion_channels), dtype=np.float32))

        f = g.relu(g.conv2d(g.concat_depth([r_overlay, i_embed, e_proc]), *self._cnn3a))
        f = g.relu(g.conv2d(f, *self._cnn3b))
        logits = g.conv2d(g.add(i_embed, f), *self._cnn4)
        if cfg.stride > 1:
            logits = g.upsample_nearest(logits, cfg.stride)
        return logits

    def infer(self, image: np.ndarray, elements: Sequence[Element],
              expression: str) -> SegmentationOutput:
        g = self.graph
        prev = g.recording
        g.recording = False
        try:
            logits = self.forward_logits(image, elements, expression)
        finally:
            g.recording = prev
        z = logits.data - logits.data.max(axis=-1, keepdims=True)
        e = np.exp(z)
        probs = e / e.sum(axis=-1, keepdims=True)
        return SegmentationOutput(probabilities=probs, logits=logits.data)

    def sample_loss(self, sample) -> Tensor:
        logits = self.forward_logits(sample.image, sample.elements, sample.expression)
        return self.graph.cross_entropy(logits, sample.mask)

    # ------------------------------------------------------------------ #

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        own = self.graph.params
        if set(params) != set(own):
            missing = sorted(set(own) - set(params))
            extra = sorted(set(params) - set(own))
            raise ValueError(f"parameter names mismatch: missing {missing}, unexpected {extra}")
        for name, arr in params.items():
            t = own[name]
            if arr.shape != t.data.shape:
                raise ValueError(f"parameter {name!r}: shape {arr.shape} vs expected {t.data.shape}")
            t.data[...] = arr

    def export_params(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.graph.params.items()}


def predict_pixel(output: SegmentationOutput) -> tuple[int, int]:
    """Argmax pixel of the referred-class probability; ties go to the smallest
    row, then smallest column."""
    p = output.probabilities[..., 1]
    idx = int(np.argmax(p))
    return divmod(idx, p.shape[1])


def predict_mask(output: SegmentationOutput, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    return output.probabilities[..., 1] >= threshold


# ---------------------------------------------------------------------- #

def config_sidecar(path) -> str:
    return f"{path}.json"


def save_checkpoint(model: SegmentationModel, path) -> None:
    save_params(path, model.graph.params)
    with open(config_sidecar(path), "w") as f:
        json.dump(model.config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def load_checkpoint(path, expect: ModelConfig | None = None) -> SegmentationModel:
    with open(config_sidecar(path)) as f:
        config = ModelConfig.from_dict(json.load(f))
    if expect is not None and config != expect:
        raise ValueError(f"checkpoint config at {config_sidecar(path)} differs from the expected config")
    model = SegmentationModel(config)
    model.set_params(load_params(path))
    return model
