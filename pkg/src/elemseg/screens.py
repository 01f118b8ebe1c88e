"""Seeded generator of synthetic screens with labeled elements, templated
referring expressions, and ground-truth masks.

Screens are grids of filled rectangles with 1-pixel borders; each rectangle
carries a short label rendered with a fixed 3x5 procedural glyph font.
Expressions come from five template families and are unambiguous by
construction:

- text:       the target's label is unique on screen.
- positional: the target's bbox center is strictly the closest to the named
              anchor point (corners or center).
- ordinal:    index in reading order (top-to-bottom, then left-to-right by
              bbox top-left corner).
- color:      the target's fill color name is unique on screen.
- relational: "left of X" means strictly smaller x-center with the y-center
              inside X's vertical span (mirrored for right/above/below), X
              uniquely labeled, and exactly one element satisfying the
              relation.

Generation is deterministic given (spec, screen index); masks equal the
pixel rasterization of the target element's bbox.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import write_image, write_mask, write_split
from .elements import Element
from .overlay import calc_overlay

# 3-wide x 5-tall glyphs; '#' marks ink.
GLYPHS = {
    "a": (" # ", "# #", "###", "# #", "# #"),
    "b": ("## ", "# #", "## ", "# #", "## "),
    "c": (" ##", "#  ", "#  ", "#  ", " ##"),
    "d": ("## ", "# #", "# #", "# #", "## "),
    "e": ("###", "#  ", "## ", "#  ", "###"),
    "f": ("###", "#  ", "## ", "#  ", "#  "),
    "g": (" ##", "#  ", "# #", "# #", " ##"),
    "h": ("# #", "# #", "###", "# #", "# #"),
    "i": ("###", " # ", " # ", " # ", "###"),
    "j": ("  #", "  #", "  #", "# #", " # "),
    "k": ("# #", "## ", "#  ", "## ", "# #"),
    "l": ("#  ", "#  ", "#  ", "#  ", "###"),
    "m": ("# #", "###", "###", "# #", "# #"),
    "n": ("## ", "# #", "# #", "# #", "# #"),
    "o": (" # ", "# #", "# #", "# #", " # "),
    "p": ("## ", "# #", "## ", "#  ", "#  "),
    "q": (" # ", "# #", "# #", " ##", "  #"),
    "r": ("## ", "# #", "## ", "## ", "# #"),
    "s": (" ##", "#  ", " # ", "  #", "## "),
    "t": ("###", " # ", " # ", " # ", " # "),
    "u": ("# #", "# #", "# #", "# #", "###"),
    "v": ("# #", "# #", "# #", " # ", " # "),
    "w": ("# #", "# #", "###", "###", "# #"),
    "x": ("# #", "# #", " # ", "# #", "# #"),
    "y": ("# #", "# #", " # ", " # ", "#  "),
    "z": ("###", "  #", " # ", "#  ", "###"),
    "0": ("###", "# #", "# #", "# #", "###"),
    "1": (" # ", "## ", " # ", " # ", "###"),
    "2": ("## ", "  #", " # ", "#  ", "###"),
    "3": ("###", "  #", " ##", "  #", "###"),
    "4": ("# #", "# #", "###", "  #", "  #"),
    "5": ("###", "#  ", "## ", "  #", "## "),
    "6": (" ##", "#  ", "###", "# #", "###"),
    "7": ("###", "  #", " # ", " # ", " # "),
    "8": ("###", "# #", "###", "# #", "###"),
    "9": ("###", "# #", "###", "  #", "## "),
}

DEFAULT_VOCAB = (
    "ok", "add", "del", "new", "run", "set", "get", "put", "cut", "mix",
    "map", "tab", "bar", "box", "log", "key", "pin", "tag", "sum", "fit",
    "pay", "buy", "ask", "use", "see", "zip", "undo", "redo", "save", "edit",
    "menu", "home", "back", "next", "prev", "play", "stop", "quit", "help",
    "info", "list", "view", "open", "done", "send", "sync", "copy", "move",
    "find", "sort", "file", "user", "chat", "call", "mail", "news", "shop",
    "cart", "plan", "note", "task", "time", "date", "wifi", "lock", "scan",
    "vote", "join", "exit", "load",
)

DEFAULT_PALETTE = (
    ("red", (210, 70, 70)),
    ("green", (80, 175, 95)),
    ("blue", (85, 120, 215)),
    ("yellow", (230, 205, 80)),
    ("purple", (155, 95, 200)),
    ("teal", (70, 180, 180)),
    ("orange", (235, 150, 70)),
    ("pink", (230, 130, 180)),
)

BACKGROUND = (242, 242, 242)
BORDER = (25, 25, 25)
INK_DARK = (15, 15, 15)
INK_LIGHT = (250, 250, 250)

FAMILIES = ("text", "positional", "color", "ordinal", "relational")
DEFAULT_MIX = (("text", 0.5), ("positional", 0.3), ("color", 0.1),
               ("ordinal", 0.05), ("relational", 0.05))

TEXT_PATTERNS = ("the {} button", "click {}", "press {}", "select {}",
                 "go to {}", "the {} label")
POSITIONAL_PATTERNS = ("the one in the {}", "the {} one", "the one at the {}")
ANCHOR_POINTS = (("top left", (0.0, 0.0)), ("top right", (1.0, 0.0)),
                 ("bottom left", (0.0, 1.0)), ("bottom right", (1.0, 1.0)),
                 ("center", (0.5, 0.5)))
ORDINAL_WORDS = ("first", "second", "third", "fourth", "fifth", "sixth",
                 "seventh", "eighth")
ORDINAL_PATTERNS = ("the {} one", "the {} item")
COLOR_PATTERNS = ("the {} one", "the {} item", "click the {} one")
RELATIONS = ("left of", "right of", "above", "below")
RELATIONAL_PATTERNS = ("the one {} {}", "click the one {} {}")

GLYPH_H = 5
GLYPH_W = 3
MIN_RECT_H = GLYPH_H + 4  # 1px border + 1px pad per side


class GenerationError(RuntimeError):
    """No unambiguous expression is available for the requested target."""


@dataclass(frozen=True)
class GeneratorSpec:
    seed: int = 7
    image_size: int = 64
    grid_rows: int = 3
    grid_cols: int = 3
    min_elements: int = 3
    max_elements: int = 8
    vocabulary: tuple[str, ...] = DEFAULT_VOCAB
    palette: tuple[tuple[str, tuple[int, int, int]], ...] = DEFAULT_PALETTE
    mix: tuple[tuple[str, float], ...] = DEFAULT_MIX
    expressions_per_screen: int = 4

    def __post_init__(self):
        slots = self.grid_rows * self.grid_cols
        if slots < 3:
            raise ValueError(f"grid of {self.grid_rows}x{self.grid_cols} has fewer than 3 slots")
        if not 3 <= self.min_elements <= self.max_elements:
            raise ValueError("element counts must satisfy 3 <= min <= max")
        if self.min_elements > slots:
            raise ValueError(f"min_elements {self.min_elements} exceeds {slots} grid slots")
        if len(set(self.vocabulary)) < 50:
            raise ValueError(f"vocabulary must hold at least 50 distinct labels, got {len(set(self.vocabulary))}")
        if len(self.palette) < 6:
            raise ValueError(f"palette must hold at least 6 named colors, got {len(self.palette)}")
        pitch_h = self.image_size // self.grid_rows
        pitch_w = self.image_size // self.grid_cols
        if pitch_h - 2 < MIN_RECT_H:
            raise ValueError(f"grid pitch {pitch_h} too small for {MIN_RECT_H}px rectangles")
        for label in self.vocabulary:
            bad = [ch for ch in label if ch not in GLYPHS]
            if bad:
                raise ValueError(f"label {label!r} uses characters without glyphs: {bad}")
            if self._label_px(label) + 4 > pitch_w - 2:
                raise ValueError(f"label {label!r} cannot fit a {pitch_w}px grid column")
        weights = dict(self.mix)
        if set(weights) - set(FAMILIES):
            raise ValueError(f"unknown template families: {sorted(set(weights) - set(FAMILIES))}")
        if any(w < 0 for w in weights.values()) or abs(sum(weights.values()) - 1.0) > 1e-9:
            raise ValueError("mix weights must be nonnegative and sum to 1")
        if self.expressions_per_screen < 1:
            raise ValueError("expressions_per_screen must be >= 1")

    @staticmethod
    def _label_px(label: str) -> int:
        return (GLYPH_W + 1) * len(label) - 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["vocabulary"] = list(self.vocabulary)
        d["palette"] = {name: list(rgb) for name, rgb in self.palette}
        d["mix"] = dict(self.mix)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        if "vocabulary" in d:
            d["vocabulary"] = tuple(d["vocabulary"])
        if "palette" in d:
            d["palette"] = tuple((name, tuple(rgb)) for name, rgb in d["palette"].items())
        if "mix" in d:
            d["mix"] = tuple(d["mix"].items())
        return cls(**d)


@dataclass
class Screen:
    image: np.ndarray            # S x S x 3 uint8
    elements: list[Element]
    target_index: int
    colors: list[str]            # fill color name per element


def _luminance(rgb) -> float:
    r, g, b = rgb
    return 0.299 * r + 0.587 * g + 0.114 * b


def _draw_label(img, label: str, x0, y0, w, h, ink) -> None:
    label_px = GeneratorSpec._label_px(label)
    scale = max(1, min((w - 4) // label_px, (h - 4) // GLYPH_H))
    tw, th = label_px * scale, GLYPH_H * scale
    tx = x0 + (w - tw) // 2
    ty = y0 + (h - th) // 2
    for idx, ch in enumerate(label):
        cx = tx + idx * (GLYPH_W + 1) * scale
        for rr, row in enumerate(GLYPHS[ch]):
            for cc, bit in enumerate(row):
                if bit == "#":
                    img[ty + rr * scale: ty + (rr + 1) * scale,
                        cx + cc * scale: cx + (cc + 1) * scale] = ink


def render_screen(spec: GeneratorSpec, rng: np.random.Generator) -> Screen:
    """Place 3-8 non-overlapping labeled rectangles at grid slots."""
    s = spec.image_size
    img = np.empty((s, s, 3), dtype=np.uint8)
    img[...] = BACKGROUND
    slots = spec.grid_rows * spec.grid_cols
    n = int(rng.integers(spec.min_elements, min(spec.max_elements, slots) + 1))
    slot_ids = rng.choice(slots, size=n, replace=False)
    label_ids = rng.choice(len(spec.vocabulary), size=n, replace=False)
    color_ids = rng.integers(0, len(spec.palette), size=n)
    pitch_h = s // spec.grid_rows
    pitch_w = s // spec.grid_cols

    elements, colors = [], []
    for slot, lid, cid in zip(slot_ids, label_ids, color_ids):
        label = spec.vocabulary[lid]
        name, fill = spec.palette[cid]
        cell_y, cell_x = divmod(int(slot), spec.grid_cols)
        cell_y *= pitch_h
        cell_x *= pitch_w
        avail_h, avail_w = pitch_h - 2, pitch_w - 2
        min_w = GeneratorSpec._label_px(label) + 4
        w = int(rng.integers(min_w, avail_w + 1))
        h = int(rng.integers(MIN_RECT_H, avail_h + 1))
        x0 = cell_x + 1 + int(rng.integers(0, avail_w - w + 1))
        y0 = cell_y + 1 + int(rng.integers(0, avail_h - h + 1))
        img[y0:y0 + h, x0:x0 + w] = fill
        img[y0, x0:x0 + w] = BORDER
        img[y0 + h - 1, x0:x0 + w] = BORDER
        img[y0:y0 + h, x0] = BORDER
        img[y0:y0 + h, x0 + w - 1] = BORDER
        ink = INK_DARK if _luminance(fill) > 150 else INK_LIGHT
        _draw_label(img, label, x0, y0, w, h, ink)
        elements.append(Element(label, (x0 / s, y0 / s, (x0 + w) / s, (y0 + h) / s)))
        colors.append(name)
    target = int(rng.integers(n))
    return Screen(image=img, elements=elements, target_index=target, colors=colors)


# ---------------------------------------------------------------------- #
# expression templates

def reading_order(elements) -> list[int]:
    return sorted(range(len(elements)), key=lambda i: (elements[i].bbox[1], elements[i].bbox[0]))


def _try_text(elements, target, rng):
    label = elements[target].text
    if sum(el.text == label for el in elements) != 1:
        return None
    return TEXT_PATTERNS[rng.integers(len(TEXT_PATTERNS))].format(label)


def _try_positional(elements, target, rng):
    centers = [el.center for el in elements]
    usable = []
    for name, (ax, ay) in ANCHOR_POINTS:
        d = [(cx - ax) ** 2 + (cy - ay) ** 2 for cx, cy in centers]
        if all(d[target] < d[i] for i in range(len(d)) if i != target):
            usable.append(name)
    if not usable:
        return None
    name = usable[rng.integers(len(usable))]
    return POSITIONAL_PATTERNS[rng.integers(len(POSITIONAL_PATTERNS))].format(name)


def _try_ordinal(elements, target, rng):
    idx = reading_order(elements).index(target)
    if idx >= len(ORDINAL_WORDS):
        return None
    return ORDINAL_PATTERNS[rng.integers(len(ORDINAL_PATTERNS))].format(ORDINAL_WORDS[idx])


def _try_color(elements, target, rng, colors):
    if colors is None:
        return None
    name = colors[target]
    if colors.count(name) != 1:
        return None
    return COLOR_PATTERNS[rng.integers(len(COLOR_PATTERNS))].format(name)


def relation_holds(rel: str, subject: Element, anchor: Element) -> bool:
    sx, sy = subject.center
    ax0, ay0, ax1, ay1 = anchor.bbox
    acx, acy = anchor.center
    if rel == "left of":
        return sx < acx and ay0 <= sy < ay1
    if rel == "right of":
        return sx > acx and ay0 <= sy < ay1
    if rel == "above":
        return sy < acy and ax0 <= sx < ax1
    if rel == "below":
        return sy > acy and ax0 <= sx < ax1
    raise ValueError(f"unknown relation {rel!r}")


def _try_relational(elements, target, rng):
    choices = []
    for rel in RELATIONS:
        for a, anchor in enumerate(elements):
            if a == target or anchor.text == elements[target].text:
                continue
            if sum(el.text == anchor.text for el in elements) != 1:
                continue
            holders = [i for i, el in enumerate(elements)
                       if i != a and relation_holds(rel, el, anchor)]
            if holders == [target]:
                choices.append((rel, anchor.text))
    if not choices:
        return None
    rel, label = choices[rng.integers(len(choices))]
    return RELATIONAL_PATTERNS[rng.integers(len(RELATIONAL_PATTERNS))].format(rel, label)


_FAMILY_FNS = {
    "text": lambda elements, target, rng, colors: _try_text(elements, target, rng),
    "positional": lambda elements, target, rng, colors: _try_positional(elements, target, rng),
    "ordinal": lambda elements, target, rng, colors: _try_ordinal(elements, target, rng),
    "color": _try_color,
    "relational": lambda elements, target, rng, colors: _try_relational(elements, target, rng),
}

_EXPRESSION_RETRIES = 16


def sample_expression(elements, target_index: int, spec: GeneratorSpec,
                      rng: np.random.Generator, colors=None) -> tuple[str, str]:
    """Sample (expression, family) for a target, or raise GenerationError."""
    names = [name for name, _ in spec.mix]
    weights = np.asarray([w for _, w in spec.mix], dtype=np.float64)
    weights = weights / weights.sum()
    for _ in range(_EXPRESSION_RETRIES):
        fam = names[rng.choice(len(names), p=weights)]
        expr = _FAMILY_FNS[fam](elements, target_index, rng, colors)
        if expr is not None:
            return expr, fam
    raise GenerationError(f"no unambiguous template found for element {target_index}")


def generate_expression(elements, target_index: int, spec: GeneratorSpec,
                        rng: np.random.Generator, colors=None) -> str:
    return sample_expression(elements, target_index, spec, rng, colors)[0]


# ---------------------------------------------------------------------- #

def screen_rng(spec: GeneratorSpec, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=spec.seed, spawn_key=(index,)))


def split_sizes(count: int) -> tuple[int, int, int]:
    n_train = int(count * 0.8)
    n_val = int(count * 0.1)
    return n_train, n_val, count - n_train - n_val


def generate_dataset(spec: GeneratorSpec, count: int, out_dir) -> dict:
    """Render screens, write train/val/test JSONL splits plus PNGs.

    Splits are by screen (80/10/10), so no screen appears in two splits.
    Each screen yields up to ``expressions_per_screen`` expressions for
    distinct targets; targets with no unambiguous template are replaced from
    the remaining pool or dropped.
    """
    if count < 10:
        raise ValueError(f"count must be >= 10, got {count}")
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise RuntimeError(f"cannot create dataset directories under {out}: {e}") from e

    n_train, n_val, _ = split_sizes(count)
    records: dict[str, list[dict]] = {"train": [], "val": [], "test": []}
    s = spec.image_size
    for i in range(count):
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        rng = screen_rng(spec, i)
        screen = render_screen(spec, rng)
        sid = f"scr_{i:06d}"
        image_rel = f"images/{sid}.png"
        try:
            write_image(out / image_rel, screen.image)
        except OSError as e:
            raise RuntimeError(f"failed writing {out / image_rel}: {e}") from e

        n = len(screen.elements)
        order = [int(t) for t in rng.permutation(n)]
        k_want = min(spec.expressions_per_screen, n)
        chosen, pool = order[:k_want], order[k_want:]
        element_json = [{"text": el.text, "bbox": list(el.bbox)} for el in screen.elements]
        written = 0
        for target in chosen:
            expr = fam = None
            while True:
                try:
                    expr, fam = sample_expression(screen.elements, target, spec, rng, screen.colors)
                    break
                except GenerationError:
                    if not pool:
                        break
                    target = pool.pop(0)
            if expr is None:
                continue
            mask = calc_overlay(screen.elements[target].bbox, s, s)[..., 0] > 0
            mask_rel = f"masks/{sid}_{written}.png"
            try:
                write_mask(out / mask_rel, mask)
            except OSError as e:
                raise RuntimeError(f"failed writing {out / mask_rel}: {e}") from e
            records[split].append({
                "screen_id": sid,
                "image": image_rel,
                "mask": mask_rel,
                "elements": element_json,
                "expression": expr,
                "family": fam,
            })
            written += 1

    for split, recs in records.items():
        write_split(out / f"{split}.jsonl", recs)
    with open(out / "generator.json", "w") as f:
        json.dump({"spec": spec.to_dict(), "count": count}, f, indent=2, sort_keys=True)
        f.write("\n")
    return {split: len(recs) for split, recs in records.items()}
