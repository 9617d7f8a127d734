"""Retrieval-augmented layout generator: fusion, constraint encoder, decoder,
training, and constrained sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..core import AnnotatedSample, Canvas, Layout, SaliencyMap
from ..encoders import preprocess
from ..numerics import Tensor, no_grad
from ..retrieval import RetrievalDatabase, embed_saliency, query_indices, random_indices
from ..tasks import ConstraintSpec, TaskKind, serialize_constraint
from .decoding import (
    DecodeState,
    IncrementalDecoder,
    RelationGrid,
    SamplingConfig,
    element_feasibility,
    feasible_bins,
    generate_batch,
    grammar_mask,
    restrict_logits,
)
from .model import GeneratorConfig, LayoutGenerator, canonical_order
from .training import (
    TrainBatch,
    TrainConfig,
    TrainHistory,
    TrainingSet,
    constraint_batch,
    images_to_float,
    prepare_images,
    sequence_loss,
    token_accuracy,
    train,
    train_step,
)


@dataclass(frozen=True, eq=False)
class FusedFeature:
    data: np.ndarray  # (2H'W' + K, d)


@dataclass(frozen=True, eq=False)
class ConstraintFeature:
    data: np.ndarray  # (n, d)

    @property
    def n(self) -> int:
        return self.data.shape[0]


def fuse(f_I, retrieved, model: LayoutGenerator) -> FusedFeature:
    """Eval-mode fusion of one feature map with K retrieved layout features."""
    f = np.asarray(getattr(f_I, "data", f_I), dtype=model.dtype)
    feats = np.stack([np.asarray(getattr(r, "vector", r)) for r in retrieved])
    was = model.training
    model.eval()
    with no_grad():
        out = model.fuse(Tensor(f[None]), feats[None]).data[0]
    model.train(was)
    return FusedFeature(out)


def encode_constraint(spec: ConstraintSpec, model: LayoutGenerator) -> ConstraintFeature:
    tokens, valid = constraint_batch([spec], model.cfg)
    was = model.training
    model.eval()
    with no_grad():
        out = model.encode_constraints(tokens, valid)
    model.train(was)
    data = np.zeros((0, model.cfg.d), dtype=model.dtype) if out is None else out.data[0]
    return ConstraintFeature(data)


def retrieve_features(model: LayoutGenerator, db: RetrievalDatabase | None, saliencies, rng: np.random.Generator, exclude_ids=None) -> np.ndarray | None:
    """(N, K, E) retrieved layout features for a batch of queries."""
    cfg = model.cfg
    if not cfg.uses_retrieval:
        return None
    if db is None:
        raise ValueError(f"retrieval={cfg.retrieval} needs a retrieval database")
    db.check_stamp(getattr(model, "feature_stamp", None))
    exclude_ids = exclude_ids or [None] * len(saliencies)
    rows = []
    for s, ex in zip(saliencies, exclude_ids):
        if cfg.retrieval == "saliency":
            rows.append(query_indices(db, embed_saliency(s), cfg.K, ex))
        else:
            rows.append(random_indices(db, cfg.K, rng, ex))
    return db.features[np.stack(rows)]


def build_memory(model: LayoutGenerator, images: np.ndarray, retrieved, specs: Sequence[ConstraintSpec]):
    """Eval-mode decoder memory as numpy arrays."""
    tokens, valid = constraint_batch(specs, model.cfg)
    model.eval()
    with no_grad():
        mem, mem_valid = model.memory(images_to_float(images, model.dtype), retrieved, tokens, valid)
    return mem.data, mem_valid


def generate_for_samples(
    model: LayoutGenerator,
    samples: Sequence[AnnotatedSample],
    db: RetrievalDatabase | None,
    specs: Sequence[ConstraintSpec] | None,
    rng: np.random.Generator,
    sampling: SamplingConfig = SamplingConfig(),
    batch_size: int = 128,
    images: np.ndarray | None = None,
) -> list[Layout]:
    """One generated layout per sample (retrieval from ``db``, no exclusion)."""
    specs = list(specs) if specs is not None else [ConstraintSpec(TaskKind.UNCONSTRAINED)] * len(samples)
    if images is None:
        images = prepare_images(samples, model.cfg.encoder)
    out: list[Layout] = []
    for start in range(0, len(samples), batch_size):
        chunk = slice(start, start + batch_size)
        retrieved = retrieve_features(model, db, [s.saliency for s in samples[chunk]], rng)
        mem, mem_valid = build_memory(model, images[chunk], retrieved, specs[chunk])
        out.extend(generate_batch(model, mem, mem_valid, specs[chunk], rng, sampling))
    return out


def generate(
    canvas: Canvas,
    saliency: SaliencyMap,
    db: RetrievalDatabase | None,
    spec: ConstraintSpec,
    model: LayoutGenerator,
    rng: np.random.Generator,
    sampling: SamplingConfig = SamplingConfig(),
) -> Layout:
    """Sample one layout for a canvas under ``spec``."""
    img = np.rint(preprocess(canvas, saliency, model.cfg.encoder.input_hw) * 255.0).astype(np.uint8)[None]
    retrieved = retrieve_features(model, db, [saliency], rng)
    mem, mem_valid = build_memory(model, img, retrieved, [spec])
    return generate_batch(model, mem, mem_valid, [spec], rng, sampling)[0]


__all__ = [
    "ConstraintFeature",
    "DecodeState",
    "FusedFeature",
    "GeneratorConfig",
    "IncrementalDecoder",
    "LayoutGenerator",
    "RelationGrid",
    "SamplingConfig",
    "TrainBatch",
    "TrainConfig",
    "TrainHistory",
    "TrainingSet",
    "build_memory",
    "canonical_order",
    "constraint_batch",
    "element_feasibility",
    "encode_constraint",
    "feasible_bins",
    "fuse",
    "generate",
    "generate_batch",
    "generate_for_samples",
    "grammar_mask",
    "images_to_float",
    "prepare_images",
    "restrict_logits",
    "retrieve_features",
    "sequence_loss",
    "serialize_constraint",
    "token_accuracy",
    "train",
    "train_step",
]
