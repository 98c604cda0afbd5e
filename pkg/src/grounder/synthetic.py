"""Synthetic grounding scenes: colored shapes plus templated expressions.

A scene holds 2..5 shapes with pairwise-distinct (kind, color, size) triples,
placed by rejection sampling so their boxes barely interact (IoU < 0.1) and
their pixels never touch.  Expressions come from two templates:

    attribute:   "the <size> <color> <kind>"
    relational:  "the <kind> <relation> the <color> <kind>"

Relational semantics: a candidate matches when the relation holds against
the *nearest* shape fitting the anchor description (excluding the candidate
itself).  Every emitted expression is verified by brute-force evaluation to
match exactly one shape; ground-truth boxes are pixel-tight.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .boxes import Box, iou
from .errors import ContractError, FormatError, GenerationError
from .netpbm import read_ppm, write_ppm

KINDS = ("circle", "square", "triangle")
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 70),
    "blue": (40, 90, 220),
    "yellow": (235, 200, 40),
    "purple": (150, 60, 180),
}
SIZES = ("small", "large")
RELATIONS = ("left of", "right of", "above", "below")

PLACEMENT_ATTEMPTS = 1000
SCENE_ATTEMPTS = 50


@dataclass(frozen=True)
class ShapeInstance:
    kind: str
    color: str
    size: str
    cx: int      # center, pixels
    cy: int
    extent: int  # half-size, pixels


@dataclass
class SceneSpec:
    image_size: int
    shapes: list[ShapeInstance]
    seed: int


@dataclass
class GroundingSample:
    id: str
    image: np.ndarray      # (S, S, 3) uint8
    expression: str
    box: Box               # normalized cxcywh of the referent
    referent: int          # index into the scene's shapes; -1 when unknown
    template: str          # "attribute" | "relational"


def size_extent(size: str, image_size: int) -> int:
    return max(2, round(image_size * (0.07 if size == "small" else 0.14)))


def _raster(kind: str, cx: int, cy: int, e: int, s: int) -> np.ndarray:
    yy, xx = np.mgrid[0:s, 0:s]
    if kind == "circle":
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= e * e
    if kind == "square":
        return (np.abs(xx - cx) <= e) & (np.abs(yy - cy) <= e)
    # upward triangle: apex (cx, cy-e), base corners (cx±e, cy+e)
    t = (yy - (cy - e)) / (2 * e)
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= t * e)


def _pixel_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight (x1, y1, x2, y2) with exclusive max corners."""
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def generate_scene(image_size: int, n_min: int, n_max: int,
                   rng: np.random.Generator, seed: int = 0) -> SceneSpec:
    """Distinct-attribute shapes, disjoint pixels, box IoU < 0.1 pairwise."""
    if image_size < 32:
        raise ContractError(f"image size must be >= 32, got {image_size}")
    n = int(rng.integers(n_min, n_max + 1))
    combos = [(k, c, z) for k in KINDS for c in COLORS for z in SIZES]
    picks = rng.choice(len(combos), size=n, replace=False)
    shapes: list[ShapeInstance] = []
    occupied = np.zeros((image_size, image_size), dtype=bool)
    placed_boxes: list[Box] = []
    for idx in picks:
        kind, color, size = combos[idx]
        e = size_extent(size, image_size)
        lo, hi = e + 1, image_size - e - 2
        if hi < lo:
            raise GenerationError(f"image of {image_size}px cannot hold extent {e}")
        for _ in range(PLACEMENT_ATTEMPTS):
            cx = int(rng.integers(lo, hi + 1))
            cy = int(rng.integers(lo, hi + 1))
            cand = Box.from_corners(cx - e, cy - e, cx + e + 1, cy + e + 1)
            if any(iou(cand, other) >= 0.1 for other in placed_boxes):
                continue
            mask = _raster(kind, cx, cy, e, image_size)
            if (mask & occupied).any():
                continue
            shapes.append(ShapeInstance(kind, color, size, cx, cy, e))
            placed_boxes.append(cand)
            occupied |= mask
            break
        else:
            raise GenerationError(
                f"no valid placement for {size} {color} {kind} "
                f"after {PLACEMENT_ATTEMPTS} attempts")
    return SceneSpec(image_size, shapes, seed)


def render(scene: SceneSpec) -> tuple[np.ndarray, list[tuple[int, int, int, int]]]:
    """White-background rasterization plus per-shape pixel-tight boxes."""
    s = scene.image_size
    img = np.full((s, s, 3), 255, dtype=np.uint8)
    boxes = []
    for shape in scene.shapes:
        mask = _raster(shape.kind, shape.cx, shape.cy, shape.extent, s)
        img[mask] = COLORS[shape.color]
        boxes.append(_pixel_box(mask))
    return img, boxes


# --- expression semantics -------------------------------------------------


def _nearest_anchor(x: ShapeInstance, scene: SceneSpec, color: str,
                    kind: str) -> Optional[ShapeInstance]:
    anchors = [s for s in scene.shapes
               if s is not x and s.color == color and s.kind == kind]
    if not anchors:
        return None
    return min(anchors, key=lambda a: (a.cx - x.cx) ** 2 + (a.cy - x.cy) ** 2)


def _relation_holds(x: ShapeInstance, a: ShapeInstance, relation: str) -> bool:
    if relation == "left of":
        return x.cx < a.cx
    if relation == "right of":
        return x.cx > a.cx
    if relation == "above":
        return x.cy < a.cy
    if relation == "below":
        return x.cy > a.cy
    raise ContractError(f"unknown relation {relation!r}")


def evaluate_expression(expression: str, scene: SceneSpec) -> list[int]:
    """Indices of all shapes the expression describes (brute force)."""
    t = expression.lower().split()
    if len(t) == 4 and t[0] == "the" and t[1] in SIZES:
        size, color, kind = t[1], t[2], t[3]
        if color not in COLORS or kind not in KINDS:
            raise ContractError(f"cannot parse expression {expression!r}")
        return [i for i, s in enumerate(scene.shapes)
                if s.size == size and s.color == color and s.kind == kind]
    if len(t) >= 6 and t[0] == "the" and t[1] in KINDS:
        relation = " ".join(t[2:-3])
        if relation not in RELATIONS or t[-3] != "the":
            raise ContractError(f"cannot parse expression {expression!r}")
        kind, a_color, a_kind = t[1], t[-2], t[-1]
        if a_color not in COLORS or a_kind not in KINDS:
            raise ContractError(f"cannot parse expression {expression!r}")
        out = []
        for i, s in enumerate(scene.shapes):
            if s.kind != kind:
                continue
            anchor = _nearest_anchor(s, scene, a_color, a_kind)
            if anchor is not None and _relation_holds(s, anchor, relation):
                out.append(i)
        return out
    raise ContractError(f"cannot parse expression {expression!r}")


def _axis_gap(x: ShapeInstance, a: ShapeInstance, relation: str) -> int:
    return abs(x.cx - a.cx) if relation.endswith("of") else abs(x.cy - a.cy)


def generate_expression(scene: SceneSpec, rng: np.random.Generator,
                        relational_prob: float = 0.5) -> tuple[str, int, str]:
    """(expression, referent index, template id); unique referent guaranteed."""
    if rng.random() < relational_prob:
        min_gap = max(3, scene.image_size // 16)
        candidates = []
        for i, x in enumerate(scene.shapes):
            for a in scene.shapes:
                if a is x:
                    continue
                for relation in RELATIONS:
                    expr = f"the {x.kind} {relation} the {a.color} {a.kind}"
                    anchor = _nearest_anchor(x, scene, a.color, a.kind)
                    if anchor is None or _axis_gap(x, anchor, relation) < min_gap:
                        continue
                    if evaluate_expression(expr, scene) == [i]:
                        candidates.append((expr, i))
        if not candidates:
            raise GenerationError("scene admits no unambiguous relational expression")
        expr, i = candidates[int(rng.integers(len(candidates)))]
        return expr, i, "relational"
    i = int(rng.integers(len(scene.shapes)))
    s = scene.shapes[i]
    expr = f"the {s.size} {s.color} {s.kind}"
    if evaluate_expression(expr, scene) != [i]:
        raise GenerationError(f"attribute expression {expr!r} is ambiguous")
    return expr, i, "attribute"


def make_sample(sample_id: str, image_size: int, n_min: int, n_max: int,
                relational_prob: float, seed_key: Sequence[int]) -> GroundingSample:
    """Deterministic sample from a seed key; resamples scenes that admit no
    unique expression."""
    rng = np.random.default_rng(list(seed_key))
    for _ in range(SCENE_ATTEMPTS):
        try:
            scene = generate_scene(image_size, n_min, n_max, rng,
                                   seed=int(seed_key[-1]))
            expr, idx, template = generate_expression(scene, rng, relational_prob)
        except GenerationError:
            continue
        img, boxes = render(scene)
        x1, y1, x2, y2 = boxes[idx]
        gt = Box.from_pixels(x1, y1, x2 - x1, y2 - y1, image_size, image_size)
        return GroundingSample(sample_id, img, expr, gt, idx, template)
    raise GenerationError(
        f"no valid sample after {SCENE_ATTEMPTS} scene attempts ({seed_key})")


def make_dataset(image_size: int, n_min: int, n_max: int, relational_prob: float,
                 count: int, val_count: int, seed: int
                 ) -> tuple[list[GroundingSample], list[GroundingSample]]:
    """Train/val lists with disjoint seed streams (stream tag 0 vs 1)."""
    if not 0 < val_count < count:
        raise ContractError(f"need 0 < val_count < count, got {val_count}/{count}")
    train = [make_sample(f"t{i:05d}", image_size, n_min, n_max, relational_prob,
                         (seed, 0, i)) for i in range(count - val_count)]
    val = [make_sample(f"v{i:05d}", image_size, n_min, n_max, relational_prob,
                       (seed, 1, i)) for i in range(val_count)]
    return train, val


# --- on-disk dataset ------------------------------------------------------


def dataset_write(samples: Sequence[GroundingSample], out_dir: Union[str, Path]) -> None:
    out = Path(out_dir)
    (out / "imgs").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        rel = f"imgs/{s.id}.ppm"
        write_ppm(out / rel, s.image)
        lines.append(json.dumps({
            "id": s.id,
            "image": rel,
            "expression": s.expression,
            "box": s.box.as_list(),
            "template": s.template,
        }))
    (out / "samples.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")


def dataset_read(in_dir: Union[str, Path]) -> list[GroundingSample]:
    root = Path(in_dir)
    index = root / "samples.jsonl"
    if not index.is_file():
        raise FormatError(f"dataset index not found: {index}")
    samples = []
    for n, line in enumerate(index.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid = rec["id"]
            image_rel = rec["image"]
            expression = rec["expression"]
            cx, cy, w, h = (float(v) for v in rec["box"])
            template = rec["template"]
        except (ValueError, KeyError, TypeError) as exc:
            raise FormatError(f"{index}:{n}: malformed record ({exc})") from None
        img_path = root / image_rel
        if not img_path.is_file():
            raise FormatError(f"{index}:{n}: sample {sid!r} image missing: {img_path}")
        samples.append(GroundingSample(sid, read_ppm(img_path), expression,
                                       Box(cx, cy, w, h), -1, template))
    if not samples:
        raise FormatError(f"{index}: no samples")
    return samples
