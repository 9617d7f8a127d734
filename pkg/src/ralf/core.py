"""Domain types for canvases, saliency maps, layouts and the on-disk dataset.

Dataset directory layout::

    root/
      train.jsonl  val.jsonl  test.jsonl
      canvas/<id>.png      (RGB PNG or binary PPM)
      saliency/<id>.png    (8-bit grayscale PNG or PGM)

Each JSONL line is one object::

    {"id": "...", "canvas": "canvas/x.png", "saliency": "saliency/x.png",
     "elements": [{"category": 2, "cx": 0.5, "cy": 0.1, "w": 0.6, "h": 0.08}, ...]}

Boxes are center/size in [0, 1]. Records that give corners
(``x1, y1, x2, y2``) are converted on load. Elements are kept in raster
order: top-to-bottom, then left-to-right by box center.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

T_MAX = 10
SPLITS = ("train", "val", "test")
ELEMENT_KEYS = ("category", "cx", "cy", "w", "h")


class DatasetError(ValueError):
    """Malformed or invalid dataset content."""


@dataclass(frozen=True)
class CategorySchema:
    names: tuple[str, ...]
    underlay_ids: frozenset[int] = frozenset()
    text_ids: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "underlay_ids", frozenset(self.underlay_ids))
        object.__setattr__(self, "text_ids", frozenset(self.text_ids))
        if not self.names:
            raise ValueError("schema needs at least one category")
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate category names in {self.names}")
        valid = set(range(1, self.C + 1))
        for label, ids in (("underlay_ids", self.underlay_ids), ("text_ids", self.text_ids)):
            if not set(ids) <= valid:
                raise ValueError(f"{label} {sorted(ids)} not within 1..{self.C}")

    @property
    def C(self) -> int:
        return len(self.names)

    def category_id(self, name: str) -> int:
        return self.names.index(name) + 1

    def to_json(self) -> dict:
        return {"names": list(self.names), "underlay_ids": sorted(self.underlay_ids), "text_ids": sorted(self.text_ids)}

    @classmethod
    def from_json(cls, obj: dict) -> "CategorySchema":
        return cls(tuple(obj["names"]), frozenset(obj.get("underlay_ids", ())), frozenset(obj.get("text_ids", ())))


PKU_SCHEMA = CategorySchema(("logo", "text", "underlay"), underlay_ids={3}, text_ids={2})
CGL_SCHEMA = CategorySchema(("logo", "text", "underlay", "embellishment"), underlay_ids={3}, text_ids={2})


@dataclass(frozen=True)
class Element:
    category: int
    bbox: tuple[float, float, float, float]  # cx, cy, w, h

    @property
    def cx(self) -> float:
        return self.bbox[0]

    @property
    def cy(self) -> float:
        return self.bbox[1]

    @property
    def w(self) -> float:
        return self.bbox[2]

    @property
    def h(self) -> float:
        return self.bbox[3]

    def corners(self) -> tuple[float, float, float, float]:
        cx, cy, w, h = self.bbox
        return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2

    def area(self) -> float:
        return self.bbox[2] * self.bbox[3]


@dataclass(frozen=True)
class Layout:
    elements: tuple[Element, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    @property
    def T(self) -> int:
        return len(self.elements)

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    @property
    def categories(self) -> list[int]:
        return [e.category for e in self.elements]

    def boxes(self) -> np.ndarray:
        """(T, 4) float64 array of (cx, cy, w, h)."""
        if not self.elements:
            return np.zeros((0, 4))
        return np.array([e.bbox for e in self.elements], dtype=np.float64)

    @classmethod
    def from_arrays(cls, categories: Sequence[int], boxes) -> "Layout":
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        return cls(tuple(Element(int(c), tuple(float(v) for v in b)) for c, b in zip(categories, boxes)))

    def raster_sorted(self) -> "Layout":
        return Layout(tuple(sorted(self.elements, key=raster_key)))


def raster_key(e: Element):
    return (e.cy, e.cx, e.category, e.w, e.h)


@dataclass(frozen=True, eq=False)
class Canvas:
    pixels: np.ndarray  # H x W x 3 in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"canvas must be HxWx3, got {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def H(self) -> int:
        return self.pixels.shape[0]

    @property
    def W(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True, eq=False)
class SaliencyMap:
    values: np.ndarray  # H x W x 1 in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or v.shape[2] != 1:
            raise ValueError(f"saliency must be HxWx1, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def H(self) -> int:
        return self.values.shape[0]

    @property
    def W(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True, eq=False)
class AnnotatedSample:
    id: str
    canvas: Canvas
    saliency: SaliencyMap
    layout: Layout
    canvas_path: str | None = field(default=None, compare=False)
    saliency_path: str | None = field(default=None, compare=False)


def validate_layout(layout: Layout, schema: CategorySchema, t_max: int = T_MAX) -> list[str]:
    """Return every invariant violation of ``layout``; empty iff valid."""
    problems = []
    if layout.T > t_max:
        problems.append(f"layout has {layout.T} elements, more than T_max={t_max}")
    for i, e in enumerate(layout.elements):
        if not isinstance(e.category, (int, np.integer)) or not 1 <= e.category <= schema.C:
            problems.append(f"element {i}: category {e.category} not in 1..{schema.C}")
        if len(e.bbox) != 4:
            problems.append(f"element {i}: bbox must have 4 values")
            continue
        for name, v in zip(("cx", "cy", "w", "h"), e.bbox):
            if not np.isfinite(v) or not 0.0 <= v <= 1.0:
                problems.append(f"element {i}: {name}={v} outside [0, 1]")
        if e.bbox[2] <= 0:
            problems.append(f"element {i}: w must be > 0")
        if e.bbox[3] <= 0:
            problems.append(f"element {i}: h must be > 0")
    return problems


def validate_sample(sample: AnnotatedSample, schema: CategorySchema, t_max: int = T_MAX) -> list[str]:
    problems = validate_layout(sample.layout, schema, t_max)
    c, s = sample.canvas, sample.saliency
    if (c.H, c.W) != (s.H, s.W):
        problems.append(f"saliency {s.H}x{s.W} does not match canvas {c.H}x{c.W}")
    if s.values.size and (s.values.min() < 0 or s.values.max() > 1):
        problems.append("saliency values outside [0, 1]")
    if c.pixels.size and (c.pixels.min() < 0 or c.pixels.max() > 1):
        problems.append("canvas values outside [0, 1]")
    return problems


# -- images ---------------------------------------------------------------

def read_canvas(path) -> Canvas:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return Canvas(arr)


def read_saliency(path) -> SaliencyMap:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    return SaliencyMap(arr[:, :, None])


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_canvas(path, canvas: Canvas) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(canvas.pixels), mode="RGB").save(path)


def write_saliency(path, saliency: SaliencyMap) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(saliency.values[:, :, 0]), mode="L").save(path)


# -- JSONL ------------------------------------------------------------------

def element_to_json(e: Element) -> dict:
    return {"category": int(e.category), "cx": float(e.cx), "cy": float(e.cy), "w": float(e.w), "h": float(e.h)}


def layout_to_json(layout: Layout) -> list[dict]:
    return [element_to_json(e) for e in layout.elements]


def _parse_element(obj, where: str) -> Element:
    if not isinstance(obj, dict):
        raise DatasetError(f"{where}: element must be an object")
    if "category" not in obj:
        raise DatasetError(f"{where}: missing field 'category'")
    cat = obj["category"]
    if isinstance(cat, bool) or not isinstance(cat, int):
        raise DatasetError(f"{where}: field 'category' must be an integer")
    if all(k in obj for k in ("x1", "y1", "x2", "y2")):
        x1, y1, x2, y2 = (obj[k] for k in ("x1", "y1", "x2", "y2"))
        for k in ("x1", "y1", "x2", "y2"):
            if not isinstance(obj[k], (int, float)) or isinstance(obj[k], bool):
                raise DatasetError(f"{where}: field '{k}' must be a number")
        box = ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)
    else:
        vals = []
        for k in ("cx", "cy", "w", "h"):
            if k not in obj:
                raise DatasetError(f"{where}: missing field '{k}'")
            v = obj[k]
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise DatasetError(f"{where}: field '{k}' must be a number")
            vals.append(v)
        box = tuple(vals)
    return Element(cat, tuple(float(v) for v in box))


def layout_from_json(items, where: str = "layout") -> Layout:
    if not isinstance(items, list):
        raise DatasetError(f"{where}: field 'elements' must be a list")
    elements = [_parse_element(o, f"{where}, element {i}") for i, o in enumerate(items)]
    return Layout(tuple(elements)).raster_sorted()


def sample_record(sample: AnnotatedSample) -> dict:
    return {
        "id": sample.id,
        "canvas": sample.canvas_path or f"canvas/{sample.id}.png",
        "saliency": sample.saliency_path or f"saliency/{sample.id}.png",
        "elements": layout_to_json(sample.layout),
    }


def dumps_record(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": "))


def load_split(path, root, schema: CategorySchema, t_max: int = T_MAX, load_images: bool = True) -> list[AnnotatedSample]:
    path, root = Path(path), Path(root)
    samples: list[AnnotatedSample] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path.name}:{lineno}"
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetError(f"{where}: record must be an object")
            for key in ("id", "canvas", "saliency", "elements"):
                if key not in rec:
                    raise DatasetError(f"{where}: missing field '{key}'")
            sid = rec["id"]
            if not isinstance(sid, str) or not sid:
                raise DatasetError(f"{where}: field 'id' must be a non-empty string")
            if sid in seen:
                raise DatasetError(f"{where}: duplicate id {sid!r}")
            seen.add(sid)
            layout = layout_from_json(rec["elements"], where)
            problems = validate_layout(layout, schema, t_max)
            if problems:
                raise DatasetError(f"{where}: sample {sid!r} rejected: {'; '.join(problems)}")
            if load_images:
                canvas = read_canvas(root / rec["canvas"])
                saliency = read_saliency(root / rec["saliency"])
            else:
                canvas = Canvas(np.zeros((1, 1, 3), np.float32))
                saliency = SaliencyMap(np.zeros((1, 1, 1), np.float32))
            sample = AnnotatedSample(sid, canvas, saliency, layout, rec["canvas"], rec["saliency"])
            if load_images:
                problems = validate_sample(sample, schema, t_max)
                if problems:
                    raise DatasetError(f"{where}: sample {sid!r} rejected: {'; '.join(problems)}")
            samples.append(sample)
    return samples


def load_dataset(root, schema: CategorySchema, t_max: int = T_MAX, splits: Iterable[str] = SPLITS, load_images: bool = True) -> dict[str, list[AnnotatedSample]]:
    """Load and validate every ``<split>.jsonl`` under ``root``."""
    root = Path(root)
    out: dict[str, list[AnnotatedSample]] = {}
    for split in splits:
        path = root / f"{split}.jsonl"
        if not path.exists():
            raise DatasetError(f"missing split file {path}")
        out[split] = load_split(path, root, schema, t_max, load_images)
    logger.info("loaded %s", ", ".join(f"{k}={len(v)}" for k, v in out.items()))
    return out


def save_dataset(root, splits: dict[str, list[AnnotatedSample]], write_images: bool = True) -> None:
    """Write the canonical JSONL files (UTF-8, LF) and the referenced images."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for split, samples in splits.items():
        lines = []
        for s in samples:
            rec = sample_record(s)
            if write_images:
                write_canvas(root / rec["canvas"], s.canvas)
                write_saliency(root / rec["saliency"], s.saliency)
            lines.append(dumps_record(rec))
        text = "".join(line + "\n" for line in lines)
        (root / f"{split}.jsonl").write_bytes(text.encode("utf-8"))
