from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings

from ralf.core import Element, Layout, validate_layout
from ralf.tasks import (
    ConstraintSpec,
    ConstraintVocab,
    Relationship,
    TaskKind,
    build_spec,
    check_satisfaction,
    derive_relations,
    perturb_for_refinement,
    relation_holds,
    sample_relationships,
    serialize_constraint,
)
from ralf.tokenizer import dequantize

from conftest import layouts, random_layout

ALL_RELATIONS = ("smaller", "larger", "equal", "above", "below", "left", "right", "overlap")


def slow_relation(rel: str, a, b) -> bool:
    """Exact rational evaluation of the pinned predicates."""
    ax, ay, aw, ah = (Fraction(v) for v in a)
    bx, by, bw, bh = (Fraction(v) for v in b)
    a_top, a_bottom, a_left, a_right = ay - ah / 2, ay + ah / 2, ax - aw / 2, ax + aw / 2
    b_top, b_bottom, b_left, b_right = by - bh / 2, by + bh / 2, bx - bw / 2, bx + bw / 2
    if rel == "above":
        return a_bottom <= b_top
    if rel == "below":
        return b_bottom <= a_top
    if rel == "left":
        return a_right <= b_left
    if rel == "right":
        return b_right <= a_left
    if rel == "overlap":
        ix = min(a_right, b_right) - max(a_left, b_left)
        iy = min(a_bottom, b_bottom) - max(a_top, b_top)
        return ix > 0 and iy > 0
    area_a, area_b = aw * ah, bw * bh
    tol = Fraction(1, 10**6) * max(area_a, area_b)
    return {"smaller": area_a < area_b - tol, "larger": area_a > area_b + tol, "equal": abs(area_a - area_b) <= tol}[rel]


def _grid_box(rng):
    # bin-center coordinates make touching edges common
    w, h = (dequantize(int(b), 16) for b in rng.integers(1, 8, size=2))
    cx, cy = (dequantize(int(b), 16) for b in rng.integers(0, 16, size=2))
    return (cx, cy, w, h)


def test_relation_checker_agrees_with_oracle_1000():
    rng = np.random.default_rng(0)
    disagreements = 0
    for case in range(1000):
        if case % 2:
            a, b = _grid_box(rng), _grid_box(rng)
        else:
            a, b = (tuple(rng.uniform(0.05, 0.6, 4)) for _ in range(2))
        rel = ALL_RELATIONS[rng.integers(len(ALL_RELATIONS))]
        disagreements += relation_holds(rel, a, b) != slow_relation(rel, a, b)
    assert disagreements == 0


def test_above_with_a_below_b_fails():
    top = Element(2, (0.5, 0.2, 0.2, 0.1))
    bottom = Element(1, (0.5, 0.8, 0.2, 0.1))
    spec = ConstraintSpec(TaskKind.RELATIONSHIP, categories=(1, 2), relations=(Relationship(0, 1, pos_rel="above"),))
    assert not check_satisfaction(Layout((bottom, top)), spec).satisfied
    assert check_satisfaction(Layout((Element(1, top.bbox), Element(2, bottom.bbox))), spec).satisfied


def test_c2sp_projection():
    gt = random_layout(np.random.default_rng(0), 3, 3)
    spec = build_spec("c2sp", gt)
    assert spec.categories == tuple(gt.categories) and spec.sizes is None and spec.partial is None


def test_cs2p_sizes_exact():
    gt = random_layout(np.random.default_rng(1), 4, 4)
    spec = build_spec(TaskKind.CS_TO_P, gt)
    assert spec.sizes == tuple((e.w, e.h) for e in gt.elements)


def test_completion_subset_deterministic_and_strict():
    gt = random_layout(np.random.default_rng(2), 6, 6)
    a = build_spec("completion", gt, np.random.default_rng(5))
    b = build_spec("completion", gt, np.random.default_rng(5))
    assert a == b
    for seed in range(50):
        spec = build_spec("completion", gt, np.random.default_rng(seed))
        assert 1 <= spec.partial.T < gt.T
        assert set(spec.partial.elements) <= set(gt.elements)


def test_completion_single_element_keeps_it():
    gt = random_layout(np.random.default_rng(3), 1, 1)
    assert build_spec("completion", gt).partial == gt


def test_completion_subset_size_uniform():
    gt = random_layout(np.random.default_rng(4), 5, 5)
    rng = np.random.default_rng(0)
    counts = np.bincount([build_spec("completion", gt, rng).partial.T for _ in range(4000)], minlength=5)[1:]
    assert np.all(np.abs(counts / 4000 - 0.25) < 4 * np.sqrt(0.25 * 0.75 / 4000))


def test_perturb_sigma_zero_identity():
    gt = random_layout(np.random.default_rng(5), 1, 10)
    assert perturb_for_refinement(gt, np.random.default_rng(0), sigma=0.0) == gt


def test_perturb_noise_std():
    # coordinates well inside (0.1, 0.9) so clamping never triggers at 0.01 noise
    rng = np.random.default_rng(0)
    boxes = rng.uniform(0.1, 0.9, size=(25_000, 4))
    layout = Layout.from_arrays([1] * len(boxes), boxes)
    noisy = perturb_for_refinement(layout, rng).boxes()
    diff = (noisy - boxes).ravel()
    assert diff.size >= 100_000
    assert abs(diff.std() - 0.01) / 0.01 < 0.02


def test_perturb_clamps_and_keeps_categories():
    layout = Layout((Element(3, (0.001, 0.999, 0.5, 0.5)),) * 200)
    noisy = perturb_for_refinement(layout, np.random.default_rng(0))
    b = noisy.boxes()
    assert b.min() >= 0.0 and b.max() <= 1.0
    assert (b[:, 0] == 0.0).any()
    assert noisy.categories == layout.categories


def test_sample_relationships_fraction_extremes():
    gt = random_layout(np.random.default_rng(6), 4, 4)
    every = sample_relationships(gt, 1.0, np.random.default_rng(0))
    assert sorted(a for r in every for a in r.atoms()) == sorted(derive_relations(gt))
    assert sample_relationships(gt, 0.0, np.random.default_rng(0)) == ()
    assert sample_relationships(random_layout(np.random.default_rng(0), 1, 1), 1.0) == ()


def test_relationship_keep_rate_binomial():
    gt = random_layout(np.random.default_rng(7), 8, 8)
    n = len(derive_relations(gt))
    rng = np.random.default_rng(1)
    trials = 2000
    kept = sum(sum(len(r.atoms()) for r in sample_relationships(gt, 0.1, rng)) for _ in range(trials))
    total = n * trials
    assert abs(kept - 0.1 * total) <= 3 * np.sqrt(total * 0.1 * 0.9)


def test_derived_relations_consistent_with_truth():
    rng = np.random.default_rng(8)
    for _ in range(100):
        gt = random_layout(rng, 2, 10)
        for i, rel, j in derive_relations(gt):
            assert relation_holds(rel, gt.elements[i].bbox, gt.elements[j].bbox)


@settings(max_examples=60, deadline=None)
@given(layouts())
def test_ground_truth_satisfies_its_spec(layout):
    rng = np.random.default_rng(0)
    for kind in TaskKind:
        if kind is TaskKind.COMPLETION and layout.T == 0:
            continue
        spec = build_spec(kind, layout, rng, fraction=0.5)
        rep = check_satisfaction(layout, spec)
        if kind is TaskKind.REFINEMENT:
            # the noisy spec is a perturbation of the truth, so the truth lies in its window
            assert rep.satisfied
        else:
            assert rep.rate == 1.0, (kind, rep.results)


def test_refinement_noise_preserves_validity():
    rng = np.random.default_rng(9)
    from ralf.core import PKU_SCHEMA

    for _ in range(200):
        spec = build_spec("refinement", random_layout(rng, 1, 10), rng)
        assert validate_layout(spec.noisy, PKU_SCHEMA) == []


def test_spec_field_requirements():
    with pytest.raises(ValueError):
        ConstraintSpec(TaskKind.C_TO_SP)
    with pytest.raises(ValueError):
        ConstraintSpec(TaskKind.UNCONSTRAINED, categories=(1,))
    with pytest.raises(ValueError):
        ConstraintSpec(TaskKind.CS_TO_P, categories=(1, 2), sizes=((0.1, 0.1),))
    with pytest.raises(ValueError):
        Relationship(1, 1, pos_rel="above")
    with pytest.raises(ValueError):
        TaskKind.parse("translate")


def test_spec_json_roundtrip():
    gt = random_layout(np.random.default_rng(10), 4, 4)
    rng = np.random.default_rng(0)
    for kind in TaskKind:
        spec = build_spec(kind, gt, rng, fraction=0.5)
        assert ConstraintSpec.from_json(spec.to_json()) == spec


def test_serialization_counts():
    cv = ConstraintVocab(C=3, B=128)
    gt = Layout(tuple(Element(c, (0.5, 0.5, 0.2, 0.2)) for c in (1, 2, 3)))
    assert serialize_constraint(build_spec("unconstrained", gt), cv) == []
    assert len(serialize_constraint(build_spec("c2sp", gt), cv)) == 4
    assert len(serialize_constraint(build_spec("cs2p", gt), cv)) == 1 + 3 * 3
    rel = ConstraintSpec(TaskKind.RELATIONSHIP, categories=(1, 2, 3), relations=(Relationship(0, 2, "smaller", "above"),))
    toks = serialize_constraint(rel, cv)
    assert len(toks) == 4 + 2 * 4 and toks.count(cv.REL) == 2
    assert max(toks) < cv.size
