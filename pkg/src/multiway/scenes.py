"""Synthetic scene generator: small RGB rasters of colored shapes, plus the
caption/question/grounding annotations derived from them.

Every annotation is rendered from closed templates, so the full emittable
word list (the lexicon) is known up front and the vocabulary never depends
on which scenes a particular run sampled.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

CATEGORIES = ("circle", "cross", "square", "triangle")

COLOR_RGB = {
    "red": (220, 60, 50),
    "green": (70, 180, 80),
    "blue": (60, 100, 220),
    "yellow": (235, 215, 70),
}
COLORS = tuple(sorted(COLOR_RGB))

BACKGROUND = (18, 18, 18)

NUMBER_WORDS = ("zero", "one", "two", "three", "four")

ROW_NAMES = ("top", "center", "bottom")
COL_NAMES = ("left", "center", "right")

ZERO_SHOT_PREFIX = "a satellite photo of"


@dataclass(frozen=True)
class SceneObject:
    category: str
    color: str
    bbox: tuple[int, int, int, int]  # x1, y1, x2, y2; half-open, pixels


@dataclass
class Scene:
    width: int
    height: int
    objects: list[SceneObject]
    pixels: np.ndarray  # uint8 [H, W, 3]


def pluralize(word: str) -> str:
    return word + "es" if word.endswith("s") else word + "s"


def grid_cell(bbox: tuple[int, int, int, int], width: int, height: int) -> tuple[int, int]:
    """3x3 cell of the box center; returns (row, col) in 0..2."""
    x1, y1, x2, y2 = bbox
    cx = (x1 + x2) / 2.0
    cy = (y1 + y2) / 2.0
    col = min(2, int(3 * cx / width))
    row = min(2, int(3 * cy / height))
    return row, col


def position_phrase(row: int, col: int) -> str:
    if row == 1 and col == 1:
        return "center"
    return f"{ROW_NAMES[row]} {COL_NAMES[col]}"


# ---------------------------------------------------------------------------
# rasterization


def _draw(pixels: np.ndarray, obj: SceneObject) -> None:
    x1, y1, x2, y2 = obj.bbox
    color = np.array(COLOR_RGB[obj.color], dtype=np.uint8)
    w = x2 - x1
    h = y2 - y1
    if obj.category == "square":
        pixels[y1:y2, x1:x2] = color
    elif obj.category == "circle":
        yy, xx = np.mgrid[y1:y2, x1:x2]
        cx = (x1 + x2 - 1) / 2.0
        cy = (y1 + y2 - 1) / 2.0
        rx = max((w - 1) / 2.0, 0.5)
        ry = max((h - 1) / 2.0, 0.5)
        inside = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
        pixels[y1:y2, x1:x2][inside] = color
    elif obj.category == "triangle":
        # apex on the top edge, base along the bottom edge
        for y in range(y1, y2):
            frac = (y - y1) / max(h - 1, 1)
            half = frac * (w - 1) / 2.0
            cx = (x1 + x2 - 1) / 2.0
            lo = int(np.ceil(cx - half))
            hi = int(np.floor(cx + half)) + 1
            pixels[y, lo:hi] = color
    elif obj.category == "cross":
        bar_w = max(w // 3, 2)
        bar_h = max(h // 3, 2)
        vx1 = x1 + (w - bar_w) // 2
        hy1 = y1 + (h - bar_h) // 2
        pixels[y1:y2, vx1:vx1 + bar_w] = color
        pixels[hy1:hy1 + bar_h, x1:x2] = color
    else:
        raise ValueError(f"unknown category {obj.category!r}")


def render(width: int, height: int, objects: list[SceneObject]) -> np.ndarray:
    pixels = np.empty((height, width, 3), dtype=np.uint8)
    pixels[:] = np.array(BACKGROUND, dtype=np.uint8)
    for obj in objects:
        _draw(pixels, obj)
    return pixels


# ---------------------------------------------------------------------------
# scene sampling


def _boxes_overlap(a, b) -> bool:
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    return ax1 < bx2 and bx1 < ax2 and ay1 < by2 and by1 < ay2


def generate_scene(rng: np.random.Generator, width: int = 32, height: int = 32,
                   max_objects: int = 4) -> Scene:
    """Sample 1..max_objects non-overlapping shapes.

    No two objects may share (category, color, grid cell); that keeps every
    grounding query resolvable to exactly one box.
    """
    n = int(rng.integers(1, max_objects + 1))
    objects: list[SceneObject] = []
    seen: set[tuple[str, str, tuple[int, int]]] = set()
    attempts = 0
    while len(objects) < n and attempts < 200:
        attempts += 1
        w = int(rng.integers(7, 15))
        h = int(rng.integers(7, 15))
        x1 = int(rng.integers(0, width - w + 1))
        y1 = int(rng.integers(0, height - h + 1))
        bbox = (x1, y1, x1 + w, y1 + h)
        if any(_boxes_overlap(bbox, o.bbox) for o in objects):
            continue
        category = str(rng.choice(CATEGORIES))
        color = str(rng.choice(COLORS))
        key = (category, color, grid_cell(bbox, width, height))
        if key in seen:
            continue
        seen.add(key)
        objects.append(SceneObject(category, color, bbox))
    return Scene(width, height, objects, render(width, height, objects))


# ---------------------------------------------------------------------------
# annotations


def short_caption(scene: Scene) -> str:
    """Counted inventory, e.g. 'two red squares and one blue circle'."""
    counts: dict[tuple[str, str], int] = {}
    for obj in scene.objects:
        key = (obj.color, obj.category)
        counts[key] = counts.get(key, 0) + 1
    parts = []
    for (color, category), n in sorted(counts.items()):
        noun = pluralize(category) if n > 1 else category
        parts.append(f"{NUMBER_WORDS[n]} {color} {noun}")
    return " and ".join(parts)


def long_caption(scene: Scene) -> str:
    """Position-aware description in reading order, with a fixed prefix that
    doubles as the zero-shot classification prompt."""
    def order(obj: SceneObject):
        row, col = grid_cell(obj.bbox, scene.width, scene.height)
        return (row, col, obj.color, obj.category)

    parts = []
    for obj in sorted(scene.objects, key=order):
        row, col = grid_cell(obj.bbox, scene.width, scene.height)
        parts.append(f"a {obj.color} {obj.category} in the {position_phrase(row, col)}")
    return f"{ZERO_SHOT_PREFIX} " + " and ".join(parts)


def generate_question(scene: Scene, rng: np.random.Generator) -> tuple[str, str, str]:
    """One templated question about the scene: (text, answer, question_type)."""
    qtype = str(rng.choice(["presence", "count", "compare"]))
    if qtype == "presence":
        present = {(o.color, o.category) for o in scene.objects}
        if rng.random() < 0.5 or len(present) == len(COLORS) * len(CATEGORIES):
            color, category = sorted(present)[int(rng.integers(0, len(present)))]
        else:
            absent = sorted({(c, k) for c in COLORS for k in CATEGORIES} - present)
            color, category = absent[int(rng.integers(0, len(absent)))]
        answer = "yes" if (color, category) in present else "no"
        return f"is there a {color} {category}", answer, qtype
    if qtype == "count":
        category = str(rng.choice(CATEGORIES))
        n = sum(1 for o in scene.objects if o.category == category)
        return f"how many {pluralize(category)} are there", NUMBER_WORDS[n], qtype
    a, b = rng.choice(len(CATEGORIES), size=2, replace=False)
    cat_a, cat_b = CATEGORIES[int(a)], CATEGORIES[int(b)]
    na = sum(1 for o in scene.objects if o.category == cat_a)
    nb = sum(1 for o in scene.objects if o.category == cat_b)
    answer = "yes" if na > nb else "no"
    return f"are there more {pluralize(cat_a)} than {pluralize(cat_b)}", answer, qtype


def grounding_target(scene: Scene, rng: np.random.Generator) -> tuple[str, tuple[int, int, int, int]]:
    """Referring expression plus its box; position is added only when the
    bare color+category pair is ambiguous."""
    obj = scene.objects[int(rng.integers(0, len(scene.objects)))]
    same_pair = [o for o in scene.objects
                 if o.color == obj.color and o.category == obj.category]
    if len(same_pair) == 1:
        return f"the {obj.color} {obj.category}", obj.bbox
    row, col = grid_cell(obj.bbox, scene.width, scene.height)
    return f"the {obj.color} {obj.category} in the {position_phrase(row, col)}", obj.bbox


def lexicon_lines() -> list[str]:
    """Every word the templates can emit; the vocabulary is built from this,
    never from a sampled dataset, so token ids are corpus-independent."""
    words: set[str] = set(ZERO_SHOT_PREFIX.split())
    words.update(NUMBER_WORDS)
    words.update(COLORS)
    for cat in CATEGORIES:
        words.add(cat)
        words.add(pluralize(cat))
    words.update(ROW_NAMES)
    words.update(COL_NAMES)
    words.update("and in the".split())
    words.update("is there are how many more than yes no".split())
    return sorted(words)


# ---------------------------------------------------------------------------
# PPM raster files (P6, 8-bit)


def write_ppm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected [H, W, 3] uint8 raster, got {pixels.shape}")
    h, w, _ = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a P6 raster")
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":  # comment runs to end of line
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace():
            i += 1
        fields.append(raw[start:i])
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit rasters supported")
    i += 1  # single whitespace byte after maxval
    data = raw[i:i + w * h * 3]
    if len(data) != w * h * 3:
        raise ValueError(f"{path}: truncated pixel payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()
