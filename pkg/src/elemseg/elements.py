"""Per-element embeddings and attention against the referring expression.

Each element embedding is computed from its normalized bounding box and the
frozen text embedding of its label; attention reweights the embeddings by a
softmax over dot products in a shared projection space.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Graph, Tensor


@dataclass(frozen=True)
class Element:
    """One screen annotation: a text string plus a normalized bounding box."""

    text: str
    bbox: tuple[float, float, float, float]

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"invalid normalized bbox {self.bbox}")

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return (x0 + x1) / 2.0, (y0 + y1) / 2.0


def element_input(el: Element, encode: Callable[[str], np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(el.bbox, dtype=np.float32), encode(el.text)])


def embed_elements(g: Graph, elements: Sequence[Element],
                   encode: Callable[[str], np.ndarray],
                   w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> list[Tensor]:
    """Two dense layers with relu over concat(bbox, text embedding), per element."""
    out = []
    for el in elements:
        x = g.constant(element_input(el, encode))
        hidden = g.relu(g.dense(x, w1, b1))
        out.append(g.relu(g.dense(hidden, w2, b2)))
    return out


def attend_elements(g: Graph, r_embed: np.ndarray, embeds: Sequence[Tensor],
                    wa: Tensor, ba: Tensor) -> tuple[list[Tensor], Tensor]:
    """Scale each embedding by its softmax attention weight.

    One shared dense layer projects both the expression embedding and every
    element embedding; logits are the dot products in that space and the
    softmax runs over the element set. Returns the scaled embeddings and the
    weight vector.
    """
    if not embeds:
        raise ValueError("attend_elements requires at least one element")
    q = g.relu(g.dense(g.constant(r_embed), wa, ba))
    keys = [g.relu(g.dense(e, wa, ba)) for e in embeds]
    logits = g.stack([g.dot(q, k) for k in keys])
    weights = g.softmax(logits)
    attended = [g.mul(e, g.pick(weights, i)) for i, e in enumerate(embeds)]
    return attended, weights
