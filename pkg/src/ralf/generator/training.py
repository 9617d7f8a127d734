"""Batching, the teacher-forced training step and the training loop."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from ..core import AnnotatedSample
from ..encoders import EncoderConfig, preprocess
from ..numerics import AdamW, Tensor, clip_grad_norm, no_grad, step_lr
from ..numerics import functional as F
from ..retrieval import RetrievalDatabase, embed_saliency, neighbor_table, random_indices
from ..tasks import ConstraintSpec, TaskKind, build_spec, serialize_constraint
from ..tokenizer import pad_batch, tokenize_layout
from .model import LayoutGenerator

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 32
    lr: float = 1e-4
    weight_decay: float = 1e-4
    max_norm: float = 0.1
    lr_drop_at: float = 0.7
    lr_drop: float = 0.1
    tasks: tuple[str, ...] = ("unconstrained",)
    log_every: int = 100

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        # a larger step size than the full-scale setting so desk-scale runs converge
        return replace(cls(steps=2000, lr=1e-3), **overrides)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class TrainBatch:
    images: np.ndarray  # (B, H_e, W_e, 4) float
    retrieved: np.ndarray | None  # (B, K, E)
    const_tokens: np.ndarray  # (B, n)
    const_valid: np.ndarray
    seq: np.ndarray  # (B, L) token ids incl. bos/eos, right padded
    seq_valid: np.ndarray


def prepare_images(samples: Sequence[AnnotatedSample], cfg: EncoderConfig) -> np.ndarray:
    """(N, H_e, W_e, 4) uint8 encoder inputs; stored compactly and scaled per batch."""
    out = np.empty((len(samples), *cfg.input_hw, 4), dtype=np.uint8)
    for i, s in enumerate(samples):
        out[i] = np.rint(preprocess(s.canvas, s.saliency, cfg.input_hw) * 255.0).astype(np.uint8)
    return out


def images_to_float(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(dtype) / np.dtype(dtype).type(255.0)
    return images.astype(dtype)


def constraint_batch(specs: Sequence[ConstraintSpec], model_cfg) -> tuple[np.ndarray, np.ndarray]:
    cv = model_cfg.constraint_vocab
    seqs = [serialize_constraint(s, cv) for s in specs]
    n = max((len(s) for s in seqs), default=0)
    if n == 0:
        return np.zeros((len(specs), 0), dtype=np.int64), np.zeros((len(specs), 0), dtype=bool)
    ids, valid = pad_batch(seqs, n)
    return ids, valid


def train_step(model: LayoutGenerator, batch: TrainBatch, optimizer: AdamW, lr: float | None = None, rng: np.random.Generator | None = None, max_norm: float = 0.1) -> float:
    """One teacher-forced update; returns the loss before the step.

    The loss is the mean next-token cross-entropy over every non-padding
    target, i.e. the 5T + 1 positions after bos of each sequence.
    """
    if batch.seq.shape[1] > model.cfg.max_len:
        raise ValueError(f"sequence length {batch.seq.shape[1]} exceeds maximum {model.cfg.max_len}")
    model.train()
    optimizer.zero_grad()
    loss = sequence_loss(model, batch, rng)
    loss.backward()
    clip_grad_norm(optimizer.params, max_norm)
    optimizer.step(lr)
    return float(loss.data)


def sequence_loss(model: LayoutGenerator, batch: TrainBatch, rng=None) -> Tensor:
    logits = model.forward(batch.images, batch.retrieved, batch.const_tokens, batch.const_valid, batch.seq[:, :-1], rng)
    return F.cross_entropy(logits, batch.seq[:, 1:], batch.seq_valid[:, 1:].astype(logits.dtype))


def token_accuracy(model: LayoutGenerator, batch: TrainBatch) -> float:
    """Teacher-forced next-token accuracy (argmax) over non-padding targets."""
    was = model.training
    model.eval()
    with no_grad():
        logits = model.forward(batch.images, batch.retrieved, batch.const_tokens, batch.const_valid, batch.seq[:, :-1]).data
    model.train(was)
    pred = logits.argmax(axis=-1)
    mask = batch.seq_valid[:, 1:]
    return float((pred == batch.seq[:, 1:])[mask].mean())


class TrainingSet:
    """Training split packed for fast batching.

    Retrieval for the saliency database is precomputed once with leave-one-out
    exclusion; random retrieval draws a fresh K-subset per sample and step,
    also excluding the sample itself.
    """

    def __init__(self, samples: Sequence[AnnotatedSample], model_cfg, db: RetrievalDatabase | None):
        self.samples = list(samples)
        self.cfg = model_cfg
        self.images = prepare_images(self.samples, model_cfg.encoder)
        self.tokens = [tokenize_layout(s.layout, model_cfg.vocab) for s in self.samples]
        self.db = db
        self.neighbors = None
        self.self_index = None
        if model_cfg.uses_retrieval:
            if db is None:
                raise ValueError(f"retrieval={model_cfg.retrieval} needs a retrieval database")
            if db.d != model_cfg.feature_dim:
                raise ValueError(f"database features have length {db.d}, model expects {model_cfg.feature_dim}")
            self.self_index = np.array([db.index.get(s.id, -1) for s in self.samples])
            if model_cfg.retrieval == "saliency":
                queries = np.stack([embed_saliency(s.saliency) for s in self.samples])
                self.neighbors = neighbor_table(db, queries, model_cfg.K, [s.id for s in self.samples])

    def __len__(self) -> int:
        return len(self.samples)

    def retrieved_for(self, idx: np.ndarray, rng: np.random.Generator) -> np.ndarray | None:
        if not self.cfg.uses_retrieval:
            return None
        if self.neighbors is not None:
            rows = self.neighbors[idx]
        else:
            rows = np.stack([random_indices(self.db, self.cfg.K, rng, self.samples[i].id) for i in idx])
        return self.db.features[rows]

    def batch(self, idx: np.ndarray, rng: np.random.Generator, specs: Sequence[ConstraintSpec] | None = None, dtype=np.float32) -> TrainBatch:
        seq, valid = pad_batch([self.tokens[i] for i in idx])
        if specs is None:
            specs = [ConstraintSpec(TaskKind.UNCONSTRAINED)] * len(idx)
        ct, cvalid = constraint_batch(specs, self.cfg)
        return TrainBatch(images_to_float(self.images[idx], dtype), self.retrieved_for(idx, rng), ct, cvalid, seq, valid)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def train(model: LayoutGenerator, data: TrainingSet, cfg: TrainConfig, rng: np.random.Generator, callback=None) -> TrainHistory:
    """Run ``cfg.steps`` AdamW steps with uniform minibatches.

    Constrained tasks in ``cfg.tasks`` are mixed per sample: each sample draws
    a task uniformly and a spec built from its own ground truth. A ``callback``
    returning True ends training after that step.
    """
    params = model.parameters()
    opt = AdamW(params, cfg.lr, cfg.weight_decay, names=[n for n, _ in model.named_parameters()])
    tasks = [TaskKind.parse(t) for t in cfg.tasks]
    history = TrainHistory()
    start = time.perf_counter()
    n = len(data)
    bs = min(cfg.batch_size, n)
    for step in range(cfg.steps):
        idx = rng.choice(n, size=bs, replace=False)
        specs = None
        if tasks != [TaskKind.UNCONSTRAINED]:
            specs = [build_spec(tasks[rng.integers(len(tasks))], data.samples[i].layout, rng) for i in idx]
        batch = data.batch(idx, rng, specs, model.dtype)
        lr = step_lr(cfg.lr, step, cfg.steps, cfg.lr_drop_at, cfg.lr_drop)
        loss = train_step(model, batch, opt, lr, rng, cfg.max_norm)
        history.losses.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            logger.info("step %d loss %.4f lr %.1e", step, loss, lr)
        if callback is not None and callback(step, loss):
            break
    history.seconds = time.perf_counter() - start
    model.eval()
    return history
