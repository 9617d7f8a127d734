import json

import numpy as np
import pytest
from hypothesis import given, settings

from ralf.core import (
    AnnotatedSample,
    Canvas,
    CategorySchema,
    DatasetError,
    Element,
    Layout,
    SaliencyMap,
    load_dataset,
    save_dataset,
    validate_layout,
)

from conftest import layouts


def _sample(sid, layout, hw=(12, 8), seed=0):
    rng = np.random.default_rng(seed)
    return AnnotatedSample(sid, Canvas(rng.random((*hw, 3))), SaliencyMap(rng.random((*hw, 1))), layout)


def _three_samples():
    l1 = Layout((Element(2, (0.5, 0.2, 0.4, 0.1)),))
    l2 = Layout((Element(1, (0.2, 0.1, 0.1, 0.1)), Element(3, (0.5, 0.8, 0.6, 0.2))))
    return [_sample("a", l1, seed=1), _sample("b", l2, seed=2), _sample("c", Layout(), seed=3)]


def test_schema_invariants():
    with pytest.raises(ValueError):
        CategorySchema(())
    with pytest.raises(ValueError):
        CategorySchema(("a", "a"))
    with pytest.raises(ValueError):
        CategorySchema(("a", "b"), underlay_ids={3})
    s = CategorySchema(("logo", "text"), text_ids={2})
    assert s.C == 2 and s.category_id("text") == 2
    assert CategorySchema.from_json(s.to_json()) == s


def test_validate_empty_layout_ok(schema):
    assert validate_layout(Layout(), schema) == []


def test_validate_unknown_category(schema):
    problems = validate_layout(Layout((Element(5, (0.5, 0.5, 0.1, 0.1)),)), schema)
    assert len(problems) == 1 and "category 5" in problems[0]


def test_validate_element_cap(schema):
    # posters with more elements than the cap are excluded from the data
    layout = Layout(tuple(Element(1, (0.5, 0.5, 0.1, 0.1)) for _ in range(11)))
    problems = validate_layout(layout, schema)
    assert len(problems) == 1 and "T_max=10" in problems[0]


def test_validate_coordinates(schema):
    problems = validate_layout(Layout((Element(1, (1.2, 0.5, 0.0, 0.1)),)), schema)
    assert any("cx=1.2" in p for p in problems)
    assert any("w must be > 0" in p for p in problems)


def test_load_three_samples(tmp_path, schema):
    save_dataset(tmp_path, {"train": _three_samples(), "val": [], "test": []})
    splits = load_dataset(tmp_path, schema)
    assert [s.id for s in splits["train"]] == ["a", "b", "c"]
    assert splits["train"][1].layout.T == 2
    assert splits["train"][0].canvas.pixels.shape == (12, 8, 3)


def test_load_rejects_out_of_range(tmp_path, schema):
    save_dataset(tmp_path, {"train": _three_samples(), "val": [], "test": []})
    lines = (tmp_path / "train.jsonl").read_text().splitlines()
    rec = json.loads(lines[1])
    rec["elements"][0]["cx"] = 1.2
    lines[1] = json.dumps(rec)
    (tmp_path / "train.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"train.jsonl:2.*'b'.*cx=1.2"):
        load_dataset(tmp_path, schema)


def test_load_reports_line_and_field(tmp_path, schema):
    save_dataset(tmp_path, {"train": _three_samples(), "val": [], "test": []})
    lines = (tmp_path / "train.jsonl").read_text().splitlines()
    rec = json.loads(lines[2])
    del rec["elements"]
    lines[2] = json.dumps(rec)
    (tmp_path / "train.jsonl").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetError, match=r"train.jsonl:3: missing field 'elements'"):
        load_dataset(tmp_path, schema)
    (tmp_path / "train.jsonl").write_text("{not json\n")
    with pytest.raises(DatasetError, match=r"train.jsonl:1: malformed JSON"):
        load_dataset(tmp_path, schema)


def test_corner_form_converted_and_raster_sorted(tmp_path, schema):
    save_dataset(tmp_path, {"train": _three_samples()[:1], "val": [], "test": []})
    rec = json.loads((tmp_path / "train.jsonl").read_text())
    rec["elements"] = [
        {"category": 1, "cx": 0.5, "cy": 0.9, "w": 0.2, "h": 0.1},
        {"category": 2, "x1": 0.1, "y1": 0.1, "x2": 0.3, "y2": 0.2},
    ]
    (tmp_path / "train.jsonl").write_text(json.dumps(rec) + "\n")
    layout = load_dataset(tmp_path, schema)["train"][0].layout
    assert layout.categories == [2, 1]
    np.testing.assert_allclose(layout.elements[0].bbox, (0.2, 0.15, 0.2, 0.1))


def test_save_load_save_byte_stable(tmp_path, schema):
    first = tmp_path / "one"
    second = tmp_path / "two"
    save_dataset(first, {"train": _three_samples(), "val": _three_samples()[:1], "test": []})
    loaded = load_dataset(first, schema)
    save_dataset(second, loaded)
    for split in ("train", "val", "test"):
        assert (first / f"{split}.jsonl").read_bytes() == (second / f"{split}.jsonl").read_bytes()
    for name in ("a", "b", "c"):
        assert (first / "canvas" / f"{name}.png").read_bytes() == (second / "canvas" / f"{name}.png").read_bytes()
        assert (first / "saliency" / f"{name}.png").read_bytes() == (second / "saliency" / f"{name}.png").read_bytes()


@settings(max_examples=50, deadline=None)
@given(layouts())
def test_loaded_samples_satisfy_invariants(tmp_path_factory, layout):
    layout = Layout(tuple(Element(e.category, (e.cx, e.cy, e.w, e.h)) for e in layout.elements))
    root = tmp_path_factory.mktemp("ds")
    save_dataset(root, {"train": [_sample("x", layout)], "val": [], "test": []})
    from ralf.core import PKU_SCHEMA, validate_sample

    (loaded,) = load_dataset(root, PKU_SCHEMA)["train"]
    assert validate_sample(loaded, PKU_SCHEMA) == []
    assert sorted(loaded.layout.elements, key=lambda e: (e.cy, e.cx, e.category, e.w, e.h)) == list(loaded.layout.elements)
