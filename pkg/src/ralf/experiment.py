"""Synthetic end-to-end benchmark: retrieval-augmented generator vs. the
no-retrieval baseline, random retrieval, and the retrieval-size sweep.

One pinned dataset and one frozen layout encoder are shared by every arm;
each (arm, seed) pair trains a fresh toy-preset generator and is scored by
layout FID of unconstrained generations on the test split.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import PKU_SCHEMA
from .encoders import LayoutEncoderConfig, encode_layouts, pretrain_layout_encoder
from .generator import GeneratorConfig, LayoutGenerator, SamplingConfig, TrainConfig, TrainingSet, generate_for_samples, prepare_images, train
from .metrics import density_coverage, fid, layout_metrics
from .retrieval import build_database
from .synthdata import SynthConfig, generate_synthetic_dataset

logger = logging.getLogger(__name__)

DEFAULT_ARMS = {
    "ralf_k16": ("saliency", 16),
    "baseline": ("off", 16),
    "random_k16": ("random", 16),
    "ralf_k1": ("saliency", 1),
    "ralf_k4": ("saliency", 4),
}


@dataclass(frozen=True)
class BenchmarkConfig:
    data_seed: int = 0
    n_train: int = 5000
    n_test: int = 500
    seeds: tuple[int, ...] = (0, 1, 2)
    arms: tuple[str, ...] = tuple(DEFAULT_ARMS)
    steps: int = 1200
    batch_size: int = 32
    lr: float = 1e-3
    encoder_steps: int = 1500

    def synth(self) -> SynthConfig:
        return SynthConfig(n_samples=self.n_train + self.n_test, seed=self.data_seed, split_sizes=(self.n_train, 0, self.n_test))


@dataclass
class BenchmarkResult:
    config: dict
    fid: dict = field(default_factory=dict)  # arm -> [fid per seed]
    metrics: dict = field(default_factory=dict)  # arm -> [metric dict per seed]
    seconds: dict = field(default_factory=dict)
    encoder_stamp: str = ""

    def mean_fid(self, arm: str) -> float:
        return float(np.mean(self.fid[arm]))

    def wins(self, arm: str, other: str) -> int:
        return int(sum(a < b for a, b in zip(self.fid[arm], self.fid[other])))

    def random_between_or_near(self, slack: float = 0.5) -> bool:
        """Mean random-retrieval FID inside [lo - s*gap, hi + s*gap] of the two endpoints."""
        lo, hi = sorted((self.mean_fid("ralf_k16"), self.mean_fid("baseline")))
        gap = hi - lo
        return lo - slack * gap <= self.mean_fid("random_k16") <= hi + slack * gap

    def k_trend(self) -> list[tuple[int, float]]:
        out = [(0, self.mean_fid("baseline"))] if "baseline" in self.fid else []
        for arm, k in (("ralf_k1", 1), ("ralf_k4", 4), ("ralf_k16", 16)):
            if arm in self.fid:
                out.append((k, self.mean_fid(arm)))
        return out

    def to_json(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def run_benchmark(cfg: BenchmarkConfig = BenchmarkConfig(), log=print) -> BenchmarkResult:
    t0 = time.perf_counter()
    splits = generate_synthetic_dataset(cfg.synth())
    train_split, test_split = splits["train"], splits["test"]
    enc_rng = np.random.default_rng([cfg.data_seed, 1])
    encoder = pretrain_layout_encoder([s.layout for s in train_split], LayoutEncoderConfig.toy(C=PKU_SCHEMA.C), cfg.encoder_steps, enc_rng)
    real_feats = encode_layouts([s.layout for s in test_split], encoder)
    result = BenchmarkResult(config=asdict(cfg), encoder_stamp=encoder.stamp)
    log(f"data + encoder ready in {time.perf_counter() - t0:.0f}s (stamp {encoder.stamp})")
    dbs = {kind: build_database(train_split, kind, encoder) for kind in ("saliency", "random")}
    test_images = prepare_images(test_split, GeneratorConfig.toy().encoder)
    data_cache: dict = {}
    for arm in cfg.arms:
        retrieval, K = DEFAULT_ARMS[arm]
        model_cfg = GeneratorConfig.toy(K=K, retrieval=retrieval, feature_dim=encoder.cfg.d, C=PKU_SCHEMA.C)
        db = dbs.get(retrieval)
        key = (retrieval, K)
        if key not in data_cache:
            data_cache.clear()
            data_cache[key] = TrainingSet(train_split, model_cfg, db)
        data = data_cache[key]
        result.fid[arm], result.metrics[arm], result.seconds[arm] = [], [], []
        for seed in cfg.seeds:
            start = time.perf_counter()
            rng = np.random.default_rng([seed, 7])
            model = LayoutGenerator(model_cfg, np.random.default_rng([seed, 3]))
            model.feature_stamp = encoder.stamp
            train(model, data, TrainConfig.toy(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr, log_every=0), rng)
            layouts = generate_for_samples(model, test_split, db, None, np.random.default_rng([seed, 11]), SamplingConfig(), images=test_images)
            gen_feats = encode_layouts(layouts, encoder)
            value = fid(real_feats, gen_feats)
            extra = layout_metrics(layouts, [s.canvas for s in test_split], [s.saliency for s in test_split], PKU_SCHEMA)
            extra["den"], extra["cov"] = density_coverage(real_feats, gen_feats, 5)
            elapsed = time.perf_counter() - start
            result.fid[arm].append(value)
            result.metrics[arm].append(extra)
            result.seconds[arm].append(elapsed)
            log(f"{arm} seed {seed}: fid {value:.4f} ({elapsed:.0f}s)")
    return result
