import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from ralf.cli import main
from ralf.core import PKU_SCHEMA, Element, Layout, load_dataset
from ralf.render import PALETTE, category_color, render_svg

SVG = "{http://www.w3.org/2000/svg}"


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> pretrain-encoder -> build-db -> train -> generate -> evaluate at toy size."""
    root = tmp_path_factory.mktemp("cli")
    steps = [
        ["synth", "--out", root / "data", "--n", 40, "--split-sizes", "30,0,10", "--seed", 1],
        ["pretrain-encoder", "--data", root / "data", "--out", root / "f.ckpt", "--steps", 10],
        ["build-db", "--data", root / "data", "--encoder", root / "f.ckpt", "--out", root / "db.bin"],
        ["train", "--data", root / "data", "--db", root / "db.bin", "--out", root / "g.ckpt", "--steps", 3, "--k", 4],
        ["generate", "--data", root / "data", "--model", root / "g.ckpt", "--db", root / "db.bin", "--out", root / "gen", "--trials", 3, "--seed", 5],
        ["evaluate", "--data", root / "data", "--generated", root / "gen", "--encoder", root / "f.ckpt", "--out", root / "report.json"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv]) == 0, argv
    return root


def test_pipeline_artifacts(pipeline):
    assert sorted(p.name for p in (pipeline / "gen").glob("trial_*.jsonl")) == ["trial_0.jsonl", "trial_1.jsonl", "trial_2.jsonl"]
    assert (pipeline / "gen" / "manifest.json").exists()
    for name in ("f.ckpt", "db.bin", "g.ckpt", "report.json"):
        assert (pipeline / f"{name}.manifest.json").exists()
    report = json.loads((pipeline / "report.json").read_text())
    assert len(report["per_trial"]) == 3 and np.isfinite(report["fid"])
    manifest = json.loads((pipeline / "gen" / "manifest.json").read_text())
    assert manifest["command"] == "generate" and manifest["seed"] == 5 and len(manifest["outputs"]["trials"]) == 3
    f_stamp = json.loads((pipeline / "f.ckpt.manifest.json").read_text())["stamps"]
    assert manifest["stamps"]["layout_encoder"] in json.dumps(f_stamp)


def test_generated_records_cover_split(pipeline):
    test_ids = [json.loads(line)["id"] for line in (pipeline / "data" / "test.jsonl").read_text().splitlines() if line.strip()]
    for trial in (pipeline / "gen").glob("trial_*.jsonl"):
        ids = [json.loads(line)["id"] for line in trial.read_text().splitlines() if line.strip()]
        assert ids == test_ids


def test_manifest_reproduces_generate(pipeline, capsys):
    code, _, _ = run(capsys, "generate", "--config", pipeline / "gen" / "manifest.json", "--out", pipeline / "gen2")
    assert code == 0
    for i in range(3):
        assert (pipeline / "gen" / f"trial_{i}.jsonl").read_bytes() == (pipeline / "gen2" / f"trial_{i}.jsonl").read_bytes()


def test_manifest_reproduces_synth(pipeline, capsys):
    code, _, _ = run(capsys, "synth", "--config", pipeline / "data" / "manifest.json", "--out", pipeline / "data2")
    assert code == 0
    for name in ("train.jsonl", "test.jsonl"):
        assert (pipeline / "data" / name).read_bytes() == (pipeline / "data2" / name).read_bytes()


def test_baseline_train_and_constrained_generate(pipeline, capsys):
    code, _, err = run(capsys, "train", "--data", pipeline / "data", "--retrieval", "off", "--out", pipeline / "base.ckpt", "--steps", 2)
    assert code == 0, err
    code, _, err = run(capsys, "generate", "--data", pipeline / "data", "--model", pipeline / "base.ckpt", "--out", pipeline / "gen_c2sp",
                       "--task", "c2sp", "--trials", 1)
    assert code == 0, err
    truth = load_dataset(pipeline / "data", PKU_SCHEMA, splits=["test"], load_images=False)["test"]
    records = [json.loads(line) for line in (pipeline / "gen_c2sp" / "trial_0.jsonl").read_text().splitlines()]
    for sample, rec in zip(truth, records):
        assert [e["category"] for e in rec["elements"]] == list(sample.layout.categories)


def _single_error_line(err):
    lines = [line for line in err.splitlines() if line.strip()]
    assert len(lines) == 1
    return json.loads(lines[0])


def test_missing_db_is_usage_error(pipeline, capsys):
    code, _, err = run(capsys, "generate", "--data", pipeline / "data", "--model", pipeline / "g.ckpt", "--out", pipeline / "x")
    assert code == 2
    assert _single_error_line(err)["error"] == "UsageError"


def test_stamp_mismatch_rejected(pipeline, capsys):
    assert run(capsys, "pretrain-encoder", "--data", pipeline / "data", "--out", pipeline / "f2.ckpt", "--steps", 3, "--seed", 9)[0] == 0
    assert run(capsys, "build-db", "--data", pipeline / "data", "--encoder", pipeline / "f2.ckpt", "--out", pipeline / "db2.bin")[0] == 0
    code, _, err = run(capsys, "generate", "--data", pipeline / "data", "--model", pipeline / "g.ckpt", "--db", pipeline / "db2.bin", "--out", pipeline / "y")
    assert code == 1
    assert _single_error_line(err)["error"] == "StampMismatch"


def test_missing_file_rejected(pipeline, capsys):
    code, _, err = run(capsys, "evaluate", "--data", pipeline / "data", "--generated", pipeline / "nowhere.jsonl", "--encoder", pipeline / "f.ckpt",
                       "--out", pipeline / "r.json")
    assert code == 1
    assert _single_error_line(err)["command"] == "evaluate"


def test_missing_required_flag(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--out", tmp_path / "m.ckpt")
    assert code == 2 and "--data" in _single_error_line(err)["message"]


# -- rendering ---------------------------------------------------------------------

def _rects(svg: str):
    return ET.fromstring(svg.split("\n", 1)[1]).findall(f"{SVG}rect")


def test_render_command_coordinates(pipeline, capsys):
    code, _, err = run(capsys, "render", "--data", pipeline / "data", "--out", pipeline / "svg", "--limit", 4)
    assert code == 0, err
    truth = load_dataset(pipeline / "data", PKU_SCHEMA, splits=["test"])["test"][:4]
    files = sorted((pipeline / "svg").glob("*.svg"))
    assert len(files) == 4
    for sample in truth:
        rects = _rects((pipeline / "svg" / f"{sample.id}.svg").read_text())
        assert len(rects) == sample.layout.T
        H, W = sample.canvas.H, sample.canvas.W
        for rect, e in zip(rects, sample.layout.elements):
            x0, y0, x1, y1 = e.corners()
            got = [float(rect.get(k)) for k in ("x", "y", "width", "height")]
            np.testing.assert_allclose(got, [x0 * W, y0 * H, (x1 - x0) * W, (y1 - y0) * H], atol=0.5)


def test_render_empty_and_three(small_splits):
    sample = small_splits["test"][0]
    assert _rects(render_svg(sample, Layout(), PKU_SCHEMA)) == []
    three = Layout(tuple(Element(c, (0.5, 0.5, 0.2, 0.2)) for c in (1, 2, 3)))
    svg = render_svg(sample, three, PKU_SCHEMA)
    rects = _rects(svg)
    assert len(rects) == 3
    assert [r.get("fill") for r in rects] == [PALETTE[0], PALETTE[1], PALETTE[2]]
    assert svg == render_svg(sample, three, PKU_SCHEMA)


def test_category_colors_fixed():
    assert [category_color(c) for c in (1, 2, 3)] == ["#e6194b", "#3cb44b", "#4363d8"]

