"""Constrained-generation tasks: spec construction, serialization and checking.

Relation predicates on boxes (``i`` relative to ``j``):

* above:  bottom(i) <= top(j)        below: bottom(j) <= top(i)
* left:   right(i) <= left(j)        right: right(j) <= left(i)
* overlap: intersection area > 0
* smaller / larger / equal: areas compared with relative tolerance 1e-6

Constraint token sequence fed to the constraint encoder::

    [TASK:<kind>] (cat (w h)? | cat x y w h)* ([REL] i rel j)*

The per-element stride is fixed by the task kind, so no element separator is
emitted. The unconstrained task serializes to the empty sequence.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .core import Element, Layout, layout_to_json
from .tokenizer import layout_bins, quantize

AREA_RTOL = 1e-6
EDGE_ATOL = 1e-9
REFINE_SIGMA = 0.01
RELATION_FRACTION = 0.10
SIZE_RELATIONS = ("smaller", "larger", "equal")
POS_RELATIONS = ("above", "below", "left", "right", "overlap")


class TaskKind(str, enum.Enum):
    UNCONSTRAINED = "unconstrained"
    C_TO_SP = "c2sp"
    CS_TO_P = "cs2p"
    COMPLETION = "completion"
    REFINEMENT = "refinement"
    RELATIONSHIP = "relationship"

    @classmethod
    def parse(cls, value) -> "TaskKind":
        if isinstance(value, cls):
            return value
        aliases = {"c->s+p": "c2sp", "c+s->p": "cs2p", "ctosp": "c2sp", "cstop": "cs2p"}
        key = str(value).lower()
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise ValueError(f"unknown task kind {value!r}") from None


@dataclass(frozen=True)
class Relationship:
    i: int
    j: int
    size_rel: str | None = None
    pos_rel: str | None = None

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("relationship needs two distinct elements")
        if self.size_rel is None and self.pos_rel is None:
            raise ValueError("relationship needs a size or position relation")
        if self.size_rel is not None and self.size_rel not in SIZE_RELATIONS:
            raise ValueError(f"unknown size relation {self.size_rel!r}")
        if self.pos_rel is not None and self.pos_rel not in POS_RELATIONS:
            raise ValueError(f"unknown position relation {self.pos_rel!r}")

    def atoms(self) -> list[tuple[int, str, int]]:
        return [(self.i, r, self.j) for r in (self.size_rel, self.pos_rel) if r is not None]


@dataclass(frozen=True)
class ConstraintSpec:
    kind: TaskKind
    categories: tuple[int, ...] | None = None
    sizes: tuple[tuple[float, float], ...] | None = None
    partial: Layout | None = None
    noisy: Layout | None = None
    relations: tuple[Relationship, ...] | None = None

    def __post_init__(self):
        kind = TaskKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        need = {
            TaskKind.UNCONSTRAINED: set(),
            TaskKind.C_TO_SP: {"categories"},
            TaskKind.CS_TO_P: {"categories", "sizes"},
            TaskKind.COMPLETION: {"partial"},
            TaskKind.REFINEMENT: {"noisy"},
            TaskKind.RELATIONSHIP: {"categories", "relations"},
        }[kind]
        for name in ("categories", "sizes", "partial", "noisy", "relations"):
            present = getattr(self, name) is not None
            if present != (name in need):
                raise ValueError(f"{kind.value}: field {name!r} {'required' if name in need else 'not allowed'}")
        if self.categories is not None:
            object.__setattr__(self, "categories", tuple(int(c) for c in self.categories))
        if self.sizes is not None:
            object.__setattr__(self, "sizes", tuple((float(w), float(h)) for w, h in self.sizes))
            if len(self.sizes) != len(self.categories):
                raise ValueError("sizes and categories must have the same length")
        if self.relations is not None:
            object.__setattr__(self, "relations", tuple(self.relations))
            n = len(self.categories)
            for r in self.relations:
                if not (0 <= r.i < n and 0 <= r.j < n):
                    raise ValueError(f"relationship indices ({r.i}, {r.j}) outside 0..{n - 1}")

    @property
    def n_elements(self) -> int | None:
        """Element count fixed by the constraint, or None when free."""
        if self.kind in (TaskKind.C_TO_SP, TaskKind.CS_TO_P, TaskKind.RELATIONSHIP):
            return len(self.categories)
        if self.kind is TaskKind.REFINEMENT:
            return self.noisy.T
        return None

    def to_json(self) -> dict:
        obj: dict = {"kind": self.kind.value}
        if self.categories is not None:
            obj["categories"] = list(self.categories)
        if self.sizes is not None:
            obj["sizes"] = [list(s) for s in self.sizes]
        if self.partial is not None:
            obj["partial"] = layout_to_json(self.partial)
        if self.noisy is not None:
            obj["noisy"] = layout_to_json(self.noisy)
        if self.relations is not None:
            obj["relations"] = [{"i": r.i, "j": r.j, "size": r.size_rel, "pos": r.pos_rel} for r in self.relations]
        return obj

    @classmethod
    def from_json(cls, obj: dict) -> "ConstraintSpec":
        # element order is kept as given: relation indices and forced prefixes refer to it
        return cls(
            TaskKind.parse(obj["kind"]),
            categories=obj.get("categories"),
            sizes=obj.get("sizes"),
            partial=_layout_in_order(obj["partial"]) if obj.get("partial") is not None else None,
            noisy=_layout_in_order(obj["noisy"]) if obj.get("noisy") is not None else None,
            relations=tuple(Relationship(r["i"], r["j"], r.get("size"), r.get("pos")) for r in obj["relations"]) if obj.get("relations") is not None else None,
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def _layout_in_order(items) -> Layout:
    return Layout(tuple(Element(int(o["category"]), (float(o["cx"]), float(o["cy"]), float(o["w"]), float(o["h"]))) for o in items))


UNCONSTRAINED = ConstraintSpec(TaskKind.UNCONSTRAINED)


# -- geometry predicates ------------------------------------------------------

def _edges(b):
    cx, cy, w, h = b
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def intersection_area(a, b) -> float:
    l1, t1, r1, b1 = _edges(a)
    l2, t2, r2, b2 = _edges(b)
    return max(0.0, min(r1, r2) - max(l1, l2)) * max(0.0, min(b1, b2) - max(t1, t2))


def relation_holds(rel: str, a, b) -> bool:
    """Whether box ``a`` stands in relation ``rel`` to box ``b``."""
    la, ta, ra, ba = _edges(a)
    lb, tb, rb, bb = _edges(b)
    if rel == "above":
        return ba <= tb + EDGE_ATOL
    if rel == "below":
        return bb <= ta + EDGE_ATOL
    if rel == "left":
        return ra <= lb + EDGE_ATOL
    if rel == "right":
        return rb <= la + EDGE_ATOL
    if rel == "overlap":
        return intersection_area(a, b) > 0.0
    area_a, area_b = a[2] * a[3], b[2] * b[3]
    tol = AREA_RTOL * max(area_a, area_b)
    if rel == "smaller":
        return area_a < area_b - tol
    if rel == "larger":
        return area_a > area_b + tol
    if rel == "equal":
        return abs(area_a - area_b) <= tol
    raise ValueError(f"unknown relation {rel!r}")


def derive_relations(layout: Layout) -> list[tuple[int, str, int]]:
    """Every size and position relation between ordered element pairs."""
    boxes = [e.bbox for e in layout.elements]
    atoms = []
    for i, a in enumerate(boxes):
        for j, b in enumerate(boxes):
            if i == j:
                continue
            size = next(r for r in SIZE_RELATIONS if relation_holds(r, a, b))
            atoms.append((i, size, j))
            for r in ("overlap", "above", "below", "left", "right"):
                if relation_holds(r, a, b):
                    atoms.append((i, r, j))
                    break
    return atoms


def group_relations(atoms) -> tuple[Relationship, ...]:
    pairs: dict[tuple[int, int], dict] = {}
    for i, rel, j in atoms:
        slot = pairs.setdefault((i, j), {})
        slot["size_rel" if rel in SIZE_RELATIONS else "pos_rel"] = rel
    return tuple(Relationship(i, j, **v) for (i, j), v in pairs.items())


def sample_relationships(layout: Layout, fraction: float = RELATION_FRACTION, rng: np.random.Generator | None = None) -> tuple[Relationship, ...]:
    """Keep each derivable relation independently with probability ``fraction``."""
    if layout.T < 2:
        return ()
    atoms = derive_relations(layout)
    rng = rng or np.random.default_rng()
    keep = rng.random(len(atoms)) < fraction
    return group_relations([a for a, k in zip(atoms, keep) if k])


def perturb_for_refinement(layout: Layout, rng: np.random.Generator, sigma: float = REFINE_SIGMA) -> Layout:
    """Add i.i.d. N(0, sigma^2) noise to every coordinate, then clamp to [0, 1].

    Width and height are floored at 1e-6 so the result stays a valid layout.
    """
    if layout.T == 0:
        return layout
    boxes = layout.boxes()
    noisy = np.clip(boxes + rng.normal(0.0, sigma, size=boxes.shape), 0.0, 1.0) if sigma > 0 else boxes.copy()
    noisy[:, 2:] = np.maximum(noisy[:, 2:], 1e-6)
    return Layout.from_arrays(layout.categories, noisy)


def build_spec(kind, ground_truth: Layout, rng: np.random.Generator | None = None, fraction: float = RELATION_FRACTION, sigma: float = REFINE_SIGMA) -> ConstraintSpec:
    kind = TaskKind.parse(kind)
    rng = rng or np.random.default_rng()
    gt = ground_truth
    if kind is TaskKind.UNCONSTRAINED:
        return UNCONSTRAINED
    if kind is TaskKind.C_TO_SP:
        return ConstraintSpec(kind, categories=tuple(gt.categories))
    if kind is TaskKind.CS_TO_P:
        return ConstraintSpec(kind, categories=tuple(gt.categories), sizes=tuple((e.w, e.h) for e in gt.elements))
    if kind is TaskKind.COMPLETION:
        if gt.T == 0:
            raise ValueError("completion needs at least one ground-truth element")
        if gt.T == 1:
            keep = [0]
        else:
            k = int(rng.integers(1, gt.T))
            keep = sorted(rng.choice(gt.T, size=k, replace=False).tolist())
        return ConstraintSpec(kind, partial=Layout(tuple(gt.elements[i] for i in keep)))
    if kind is TaskKind.REFINEMENT:
        return ConstraintSpec(kind, noisy=perturb_for_refinement(gt, rng, sigma))
    return ConstraintSpec(kind, categories=tuple(gt.categories), relations=sample_relationships(gt, fraction, rng))


# -- serialization for the constraint encoder -----------------------------

@dataclass(frozen=True)
class ConstraintVocab:
    """Token ids of the constraint-encoder input."""

    C: int
    B: int = 128
    t_max: int = 10

    PAD = 0
    REL = 1 + len(TaskKind)
    RELATIONS = SIZE_RELATIONS + POS_RELATIONS

    @property
    def task_offset(self) -> int:
        return 1

    @property
    def rel_offset(self) -> int:
        return self.REL + 1

    @property
    def index_offset(self) -> int:
        return self.rel_offset + len(self.RELATIONS)

    @property
    def cat_offset(self) -> int:
        return self.index_offset + self.t_max

    @property
    def geo_offset(self) -> int:
        return self.cat_offset + self.C

    @property
    def size(self) -> int:
        return self.geo_offset + self.B

    def task_token(self, kind: TaskKind) -> int:
        return self.task_offset + list(TaskKind).index(kind)


def serialize_constraint(spec: ConstraintSpec, cv: ConstraintVocab) -> list[int]:
    kind = spec.kind
    if kind is TaskKind.UNCONSTRAINED:
        return []
    toks = [cv.task_token(kind)]

    def cat(c):
        if not 1 <= c <= cv.C:
            raise ValueError(f"category {c} outside 1..{cv.C}")
        return cv.cat_offset + c - 1

    def geo(v):
        return cv.geo_offset + quantize(v, cv.B)

    if kind in (TaskKind.C_TO_SP, TaskKind.RELATIONSHIP):
        toks += [cat(c) for c in spec.categories]
    elif kind is TaskKind.CS_TO_P:
        for c, (w, h) in zip(spec.categories, spec.sizes):
            toks += [cat(c), geo(w), geo(h)]
    else:
        layout = spec.partial if kind is TaskKind.COMPLETION else spec.noisy
        for e in layout.elements:
            toks += [cat(e.category)] + [geo(v) for v in e.bbox]
    if kind is TaskKind.RELATIONSHIP:
        for r in spec.relations:
            for i, rel, j in r.atoms():
                if max(i, j) >= cv.t_max:
                    raise ValueError(f"relation index beyond t_max={cv.t_max}")
                toks += [cv.REL, cv.index_offset + i, cv.rel_offset + cv.RELATIONS.index(rel), cv.index_offset + j]
    return toks


# -- satisfaction ---------------------------------------------------------------

@dataclass
class SatisfactionReport:
    results: list[tuple[str, bool]] = field(default_factory=list)

    def add(self, name: str, ok: bool) -> None:
        self.results.append((name, bool(ok)))

    @property
    def rate(self) -> float:
        return 1.0 if not self.results else sum(ok for _, ok in self.results) / len(self.results)

    @property
    def satisfied(self) -> bool:
        return all(ok for _, ok in self.results)


def refinement_window(B: int, fraction: float = 0.05) -> int:
    return int(np.ceil(fraction * B))


def check_satisfaction(layout: Layout, spec: ConstraintSpec, B: int = 128) -> SatisfactionReport:
    """Per-constraint pass/fail of ``layout`` against ``spec``.

    Category and size constraints are compared in quantized token space;
    relations use the geometric predicates on the layout's coordinates.
    """
    rep = SatisfactionReport()
    kind = spec.kind
    if kind is TaskKind.UNCONSTRAINED:
        return rep
    cats = layout.categories
    bins = layout_bins(layout, B)
    if kind in (TaskKind.C_TO_SP, TaskKind.CS_TO_P, TaskKind.RELATIONSHIP):
        rep.add("count", len(cats) == len(spec.categories))
        for i, c in enumerate(spec.categories):
            rep.add(f"category[{i}]", i < len(cats) and cats[i] == c)
    if kind is TaskKind.CS_TO_P:
        want = quantize(np.array(spec.sizes, dtype=np.float64).reshape(-1, 2), B)
        for i in range(len(spec.sizes)):
            rep.add(f"size[{i}]", i < len(bins) and bool(np.array_equal(bins[i, 2:], want[i])))
    if kind is TaskKind.COMPLETION:
        # given elements must appear in order; the decoder emits them as a prefix,
        # while the ground truth may interleave them with the removed ones
        want = layout_bins(spec.partial, B)
        pos = 0
        for i, e in enumerate(spec.partial.elements):
            while pos < len(cats) and not (cats[pos] == e.category and np.array_equal(bins[pos], want[i])):
                pos += 1
            rep.add(f"given[{i}]", pos < len(cats))
            pos += 1
    if kind is TaskKind.REFINEMENT:
        want = layout_bins(spec.noisy, B)
        delta = refinement_window(B)
        rep.add("count", len(cats) == spec.noisy.T)
        for i, e in enumerate(spec.noisy.elements):
            ok = i < len(cats) and cats[i] == e.category and bool(np.all(np.abs(bins[i] - want[i]) <= delta))
            rep.add(f"window[{i}]", ok)
    if kind is TaskKind.RELATIONSHIP:
        boxes = [e.bbox for e in layout.elements]
        for r in spec.relations:
            for i, rel, j in r.atoms():
                ok = i < len(boxes) and j < len(boxes) and relation_holds(rel, boxes[i], boxes[j])
                rep.add(f"{rel}({i},{j})", ok)
    return rep
