"""Command-line pipeline: synth, pretrain-encoder, build-db, train, generate,
evaluate, render.

Every command accepts ``--config FILE`` (JSON object keyed by flag names, or a
previous run manifest) and explicit flags override it. ``--seed`` defaults to
the ``RALF_SEED`` environment variable, then 0. Each command writes a run
manifest next to its output. Failures print one JSON line on stderr::

    {"error": "StampMismatch", "command": "generate", "message": "..."}
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .core import CGL_SCHEMA, PKU_SCHEMA, CategorySchema, DatasetError, dumps_record, layout_from_json, layout_to_json, load_dataset, save_dataset
from .encoders import LayoutEncoder, LayoutEncoderConfig, encode_layouts, pretrain_layout_encoder
from .generator import GeneratorConfig, LayoutGenerator, SamplingConfig, TrainConfig, TrainingSet, generate_for_samples, train
from .metrics import average_trials, evaluate_trial
from .numerics import CheckpointError, EmptyDecodingSpace
from .numerics.checkpoint import atomic_write
from .render import render_svg
from .retrieval import RetrievalDatabase, RetrievalError, StampMismatch, build_database
from .synthdata import SynthConfig, generate_synthetic_dataset
from .tasks import ConstraintSpec, TaskKind, build_spec

logger = logging.getLogger("ralf")

SCHEMAS = {"pku": PKU_SCHEMA, "cgl": CGL_SCHEMA}


class UsageError(ValueError):
    """Invalid flag combination."""


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    stamps: dict = field(default_factory=dict)
    wall_time: float = 0.0
    version: str = __version__

    def write(self, path) -> None:
        atomic_write(path, (json.dumps(asdict(self), indent=2, sort_keys=True) + "\n").encode("utf-8"))


# -- option plumbing ------------------------------------------------------------------

DEFAULTS = {
    "synth": {"n": 1000, "split_sizes": None, "canvas": [80, 56], "elements": [1, 10], "subjects": [1, 3], "underlay_prob": 0.5},
    "pretrain-encoder": {"preset": "toy", "steps": 2000, "batch_size": 64, "lr": 1e-3, "schema": None},
    "build-db": {"kind": "saliency", "split": "train", "schema": None},
    "train": {"preset": "toy", "retrieval": "saliency", "k": None, "steps": None, "batch_size": None, "lr": None, "tasks": "unconstrained", "split": "train", "schema": None, "db": None},
    "generate": {"split": "test", "task": "unconstrained", "constraints": None, "trials": 3, "top_k": 5, "temperature": 1.0, "db": None, "schema": None, "batch_size": 128},
    "evaluate": {"split": "test", "schema": None, "k_nn": 5},
    "render": {"split": "test", "layouts": None, "limit": None, "schema": None, "scale": 4.0},
}


def _resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    opts = dict(DEFAULTS.get(args.command, {}))
    if args.config:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        if "command" in cfg and "config" in cfg:  # a run manifest
            if cfg["command"] != args.command:
                raise UsageError(f"manifest is for '{cfg['command']}', not '{args.command}'")
            cfg = cfg["config"]
        opts.update({k.replace("-", "_"): v for k, v in cfg.items()})
    for k, v in vars(args).items():
        if v is not None and k not in ("command", "config", "func", "verbose"):
            opts[k] = v
    if opts.get("seed") is None:
        opts["seed"] = int(os.environ.get("RALF_SEED", "0"))
    return opts


def _require(opts: dict, *names: str) -> None:
    missing = [n for n in names if opts.get(n) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _schema(opts: dict, data_dir: Path | None = None) -> CategorySchema:
    if opts.get("schema"):
        if opts["schema"] not in SCHEMAS:
            raise UsageError(f"unknown schema {opts['schema']!r}")
        return SCHEMAS[opts["schema"]]
    if data_dir is not None and (data_dir / "schema.json").exists():
        return CategorySchema.from_json(json.loads((data_dir / "schema.json").read_text()))
    return PKU_SCHEMA


def _load_split(opts: dict, split: str, load_images: bool = True):
    data = Path(opts["data"])
    schema = _schema(opts, data)
    return load_dataset(data, schema, splits=[split], load_images=load_images)[split], schema


def _write_layouts(path: Path, ids, layouts) -> None:
    text = "".join(dumps_record({"id": sid, "elements": layout_to_json(l)}) + "\n" for sid, l in zip(ids, layouts))
    atomic_write(path, text.encode("utf-8"))


def _read_layouts(path: Path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = layout_from_json(rec["elements"], f"{path.name}:{lineno}")
    return out


# -- commands ------------------------------------------------------------------------------

def cmd_synth(opts: dict) -> RunManifest:
    _require(opts, "out")
    sizes = opts["split_sizes"]
    if isinstance(sizes, str):
        sizes = [int(v) for v in sizes.split(",")]
    n = int(opts["n"]) if sizes is None else sum(sizes)
    cfg = SynthConfig(n_samples=n, canvas_hw=tuple(opts["canvas"]), subjects=tuple(opts["subjects"]), elements=tuple(opts["elements"]),
                      underlay_prob=float(opts["underlay_prob"]), seed=int(opts["seed"]), split_sizes=tuple(sizes) if sizes else None)
    splits = generate_synthetic_dataset(cfg)
    out = Path(opts["out"])
    save_dataset(out, splits)
    atomic_write(out / "schema.json", json.dumps(PKU_SCHEMA.to_json(), sort_keys=True).encode())
    return RunManifest("synth", opts, cfg.seed, outputs={"dataset": str(out), **{k: len(v) for k, v in splits.items()}})


def cmd_pretrain_encoder(opts: dict) -> RunManifest:
    _require(opts, "data", "out")
    train_split, schema = _load_split(opts, "train", load_images=False)
    make = LayoutEncoderConfig.paper if opts["preset"] == "paper" else LayoutEncoderConfig.toy
    enc = pretrain_layout_encoder([s.layout for s in train_split], make(C=schema.C), int(opts["steps"]), np.random.default_rng(int(opts["seed"])),
                                  batch_size=int(opts["batch_size"]), lr=float(opts["lr"]))
    enc.save(opts["out"])
    return RunManifest("pretrain-encoder", opts, int(opts["seed"]), {"data": opts["data"]}, {"encoder": opts["out"]}, {"layout_encoder": enc.stamp})


def cmd_build_db(opts: dict) -> RunManifest:
    _require(opts, "data", "encoder", "out")
    samples, _ = _load_split(opts, opts["split"])
    enc = LayoutEncoder.load(opts["encoder"])
    db = build_database(samples, opts["kind"], enc)
    db.save(opts["out"])
    return RunManifest("build-db", opts, int(opts["seed"]), {"data": opts["data"], "encoder": opts["encoder"]}, {"db": opts["out"], "entries": len(db)}, {"layout_encoder": enc.stamp})


def cmd_train(opts: dict) -> RunManifest:
    _require(opts, "data", "out")
    retrieval = opts["retrieval"]
    if retrieval not in ("saliency", "random", "off"):
        raise UsageError(f"--retrieval must be saliency, random or off, got {retrieval!r}")
    db = None
    if retrieval != "off":
        if not opts.get("db"):
            raise UsageError(f"--retrieval {retrieval} requires --db")
        db = RetrievalDatabase.load(opts["db"])
        if retrieval == "saliency" and db.kind != "saliency":
            raise UsageError(f"--retrieval saliency needs a saliency database, got kind {db.kind!r}")
    samples, schema = _load_split(opts, opts["split"])
    preset = opts["preset"]
    if preset not in ("paper", "toy"):
        raise UsageError(f"--preset must be paper or toy, got {preset!r}")
    make_g = GeneratorConfig.paper if preset == "paper" else GeneratorConfig.toy
    overrides = {"retrieval": retrieval, "C": schema.C}
    if opts.get("k") is not None:
        overrides["K"] = int(opts["k"])
    if db is not None:
        overrides["feature_dim"] = db.d
    model_cfg = make_g(**overrides)
    make_t = TrainConfig.paper if preset == "paper" else TrainConfig.toy
    t_over = {"tasks": tuple(t.strip() for t in str(opts["tasks"]).split(","))}
    for key in ("steps", "batch_size"):
        if opts.get(key) is not None:
            t_over[key] = int(opts[key])
    if opts.get("lr") is not None:
        t_over["lr"] = float(opts["lr"])
    train_cfg = make_t(**t_over)
    seed = int(opts["seed"])
    model = LayoutGenerator(model_cfg, np.random.default_rng([seed, 0]))
    model.feature_stamp = db.stamp if db is not None else None
    data = TrainingSet(samples, model_cfg, db)
    hist = train(model, data, train_cfg, np.random.default_rng([seed, 1]))
    model.save(opts["out"], schema, extra={"train": train_cfg.to_json(), "final_loss": hist.losses[-1] if hist.losses else None})
    return RunManifest("train", opts, seed, {"data": opts["data"], "db": opts.get("db")}, {"model": opts["out"], "final_loss": hist.losses[-1] if hist.losses else None},
                       {"layout_encoder": model.feature_stamp})


def _specs_for(opts: dict, samples, trial_rng) -> list[ConstraintSpec]:
    task = TaskKind.parse(opts["task"])
    if opts.get("constraints"):
        by_id = {}
        with open(opts["constraints"], encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    by_id[rec["id"]] = ConstraintSpec.from_json(rec["spec"])
        missing = [s.id for s in samples if s.id not in by_id]
        if missing:
            raise UsageError(f"--constraints file has no spec for sample(s) {missing[:3]}")
        specs = [by_id[s.id] for s in samples]
        if any(sp.kind is not task for sp in specs) and task is not TaskKind.UNCONSTRAINED:
            raise UsageError(f"--constraints specs do not match --task {task.value}")
        return specs
    if task is TaskKind.UNCONSTRAINED:
        return [ConstraintSpec(TaskKind.UNCONSTRAINED)] * len(samples)
    # constraints derived from each sample's ground truth
    return [build_spec(task, s.layout, trial_rng) for s in samples]


def cmd_generate(opts: dict) -> RunManifest:
    _require(opts, "model", "data", "out")
    model, meta = LayoutGenerator.load(opts["model"])
    db = None
    if model.cfg.uses_retrieval:
        if not opts.get("db"):
            raise UsageError(f"model uses {model.cfg.retrieval} retrieval; pass --db")
        db = RetrievalDatabase.load(opts["db"])
        db.check_stamp(model.feature_stamp)
    samples, schema = _load_split(opts, opts["split"])
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    seed = int(opts["seed"])
    sampling = SamplingConfig(int(opts["top_k"]), float(opts["temperature"]))
    files = []
    for trial in range(int(opts["trials"])):
        rng = np.random.default_rng([seed, trial])
        specs = _specs_for(opts, samples, np.random.default_rng([seed, trial, 1]))
        layouts = generate_for_samples(model, samples, db, specs, rng, sampling, batch_size=int(opts["batch_size"]))
        path = out / f"trial_{trial}.jsonl"
        _write_layouts(path, [s.id for s in samples], layouts)
        files.append(str(path))
    return RunManifest("generate", opts, seed, {"model": opts["model"], "data": opts["data"], "db": opts.get("db")}, {"trials": files},
                       {"layout_encoder": model.feature_stamp})


def cmd_evaluate(opts: dict) -> RunManifest:
    _require(opts, "data", "generated", "encoder", "out")
    samples, schema = _load_split(opts, opts["split"])
    enc = LayoutEncoder.load(opts["encoder"])
    gen_dir = Path(opts["generated"])
    trial_files = sorted(gen_dir.glob("trial_*.jsonl")) if gen_dir.is_dir() else [gen_dir]
    if not trial_files:
        raise DatasetError(f"no trial_*.jsonl files in {gen_dir}")
    real_feats = encode_layouts([s.layout for s in samples], enc)
    trials = []
    for path in trial_files:
        by_id = _read_layouts(path)
        missing = [s.id for s in samples if s.id not in by_id]
        if missing:
            raise DatasetError(f"{path.name}: no layout for sample(s) {missing[:3]}")
        layouts = [by_id[s.id] for s in samples]
        gen_feats = encode_layouts(layouts, enc)
        trials.append(evaluate_trial(real_feats, gen_feats, layouts, [s.canvas for s in samples], [s.saliency for s in samples], schema, int(opts["k_nn"])))
    report = average_trials(trials, len(samples), len(samples))
    atomic_write(opts["out"], (report.dumps() + "\n").encode("utf-8"))
    print(report.table())
    return RunManifest("evaluate", opts, int(opts["seed"]), {"data": opts["data"], "generated": [str(p) for p in trial_files]}, {"report": opts["out"]},
                       {"layout_encoder": enc.stamp})


def cmd_render(opts: dict) -> RunManifest:
    _require(opts, "data", "out")
    samples, schema = _load_split(opts, opts["split"])
    layouts = _read_layouts(Path(opts["layouts"])) if opts.get("layouts") else {}
    if opts.get("limit") is not None:
        samples = samples[: int(opts["limit"])]
    out = Path(opts["out"])
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        svg = render_svg(s, layouts.get(s.id, s.layout) if layouts else s.layout, schema, float(opts["scale"]))
        path = out / f"{s.id}.svg"
        atomic_write(path, svg.encode("utf-8"))
        written.append(str(path))
    return RunManifest("render", opts, int(opts["seed"]), {"data": opts["data"], "layouts": opts.get("layouts")}, {"svg": len(written), "dir": str(out)})


COMMANDS = {
    "synth": cmd_synth,
    "pretrain-encoder": cmd_pretrain_encoder,
    "build-db": cmd_build_db,
    "train": cmd_train,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "render": cmd_render,
}


def _manifest_path(command: str, opts: dict) -> Path:
    out = Path(opts["out"])
    if command in ("synth", "generate", "render"):
        return out / "manifest.json"
    return out.with_name(out.name + ".manifest.json")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ralf", description="Retrieval-augmented content-aware layout generation.")
    p.add_argument("--version", action="version", version=f"ralf {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="JSON config or run manifest; flags override it")
        sp.add_argument("--seed", type=int, help="random seed (default: $RALF_SEED or 0)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if data:
            sp.add_argument("--data", help="dataset directory")
            sp.add_argument("--schema", choices=sorted(SCHEMAS), help="category schema (default: dataset schema.json or pku)")

    s = sub.add_parser("synth", help="write a synthetic dataset")
    common(s, data=False)
    s.add_argument("--out", help="output dataset directory")
    s.add_argument("--n", type=int, help="number of samples")
    s.add_argument("--split-sizes", help="comma-separated train,val,test sizes")
    s.add_argument("--canvas", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--elements", type=int, nargs=2, metavar=("MIN", "MAX"))
    s.add_argument("--subjects", type=int, nargs=2, metavar=("MIN", "MAX"))
    s.add_argument("--underlay-prob", type=float)

    s = sub.add_parser("pretrain-encoder", help="pretrain and freeze the layout encoder F")
    common(s)
    s.add_argument("--out", help="encoder checkpoint path")
    s.add_argument("--preset", choices=["paper", "toy"])
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)

    s = sub.add_parser("build-db", help="build the retrieval database over a split")
    common(s)
    s.add_argument("--encoder", help="frozen layout encoder checkpoint")
    s.add_argument("--kind", choices=["saliency", "random"])
    s.add_argument("--split")
    s.add_argument("--out", help="database file")

    s = sub.add_parser("train", help="train a generator")
    common(s)
    s.add_argument("--db", help="retrieval database (not needed with --retrieval off)")
    s.add_argument("--out", help="model checkpoint path")
    s.add_argument("--preset", choices=["paper", "toy"])
    s.add_argument("--retrieval", choices=["saliency", "random", "off"])
    s.add_argument("--k", type=int, help="number of retrieved layouts")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--tasks", help="comma-separated task mix, e.g. unconstrained,c2sp")
    s.add_argument("--split")

    s = sub.add_parser("generate", help="generate layouts for a split")
    common(s)
    s.add_argument("--model", help="generator checkpoint")
    s.add_argument("--db", help="retrieval database")
    s.add_argument("--out", help="output directory for trial_<i>.jsonl")
    s.add_argument("--split")
    s.add_argument("--task", choices=[t.value for t in TaskKind])
    s.add_argument("--constraints", help="JSONL of {id, spec} records")
    s.add_argument("--trials", type=int)
    s.add_argument("--top-k", type=int)
    s.add_argument("--temperature", type=float)
    s.add_argument("--batch-size", type=int)

    s = sub.add_parser("evaluate", help="score generated layouts")
    common(s)
    s.add_argument("--generated", help="directory of trial_<i>.jsonl files or one file")
    s.add_argument("--encoder", help="frozen layout encoder for FID features")
    s.add_argument("--out", help="MetricReport JSON path")
    s.add_argument("--split")
    s.add_argument("--k-nn", type=int, help="k for density/coverage")

    s = sub.add_parser("render", help="render layouts over canvases as SVG")
    common(s)
    s.add_argument("--layouts", help="JSONL of {id, elements}; default: ground truth")
    s.add_argument("--out", help="output directory")
    s.add_argument("--split")
    s.add_argument("--limit", type=int)
    s.add_argument("--scale", type=float)
    return p


def _error_line(kind: str, command: str, message: str) -> str:
    return json.dumps({"error": kind, "command": command, "message": " ".join(str(message).split())})


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    command = args.command
    start = time.perf_counter()
    try:
        opts = _resolve(args)
        manifest = COMMANDS[command](opts)
        manifest.wall_time = time.perf_counter() - start
        manifest.write(_manifest_path(command, opts))
    except (UsageError, DatasetError, StampMismatch, RetrievalError, CheckpointError, EmptyDecodingSpace, FileNotFoundError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(_error_line(type(exc).__name__, command, exc), file=sys.stderr)
        return 2 if isinstance(exc, UsageError) else 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
