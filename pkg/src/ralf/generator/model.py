"""Retrieval-augmented autoregressive layout generator.

Conditioning memory for the decoder::

    f_I    = E(canvas, saliency)                 (H'W' x d)
    f_L    = retrieved layout features            (K x d, projected when E != d)
    f_C    = CrossAttn(query=f_I, key/value=f_L) (H'W' x d)
    f_R    = concat(f_I, f_L, f_C)                ((2H'W' + K) x d)
    memory = concat(f_R, f_const)                 (f_const: n x d, n = 0 when unconstrained)

With retrieval disabled the memory is ``concat(f_I, f_const)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..core import CategorySchema
from ..encoders import EncoderConfig, ImageEncoder
from ..numerics import (
    DecoderLayer,
    Embedding,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    Tensor,
    TransformerEncoder,
    causal_mask,
    padding_mask,
)
from ..numerics import checkpoint as ckpt
from ..numerics import functional as F
from ..tasks import ConstraintVocab
from ..tokenizer import Vocabulary, max_length

RETRIEVAL_MODES = ("saliency", "random", "off")


@dataclass(frozen=True)
class GeneratorConfig:
    d: int = 256
    layers: int = 6
    heads: int = 8
    hidden: int = 1024
    dropout: float = 0.1
    K: int = 16
    max_T: int = 10
    C: int = 3
    B: int = 128
    retrieval: str = "saliency"
    retrieval_pos_emb: bool = False
    feature_dim: int = 256
    max_constraint_len: int = 256
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if self.retrieval not in RETRIEVAL_MODES:
            raise ValueError(f"retrieval must be one of {RETRIEVAL_MODES}, got {self.retrieval!r}")
        if isinstance(self.encoder, dict):
            object.__setattr__(self, "encoder", EncoderConfig(**self.encoder))

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.C, self.B)

    @property
    def vocab_size(self) -> int:
        return self.vocab.size

    @property
    def constraint_vocab(self) -> ConstraintVocab:
        return ConstraintVocab(self.C, self.B, self.max_T)

    @property
    def max_len(self) -> int:
        return max_length(self.max_T)

    @property
    def uses_retrieval(self) -> bool:
        return self.retrieval != "off"

    def fused_rows(self) -> int:
        hw = self.encoder.rows
        return 2 * hw + self.K if self.uses_retrieval else hw

    @classmethod
    def paper(cls, **overrides) -> "GeneratorConfig":
        return replace(cls(), **overrides)

    @classmethod
    def toy(cls, **overrides) -> "GeneratorConfig":
        base = cls(d=64, layers=2, heads=4, hidden=256, dropout=0.1, K=4, feature_dim=64, encoder=EncoderConfig.toy())
        return replace(base, **overrides)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "GeneratorConfig":
        obj = dict(obj)
        obj["encoder"] = EncoderConfig(**obj["encoder"])
        return cls(**obj)


def canonical_order(feats: np.ndarray) -> np.ndarray:
    """Row permutation sorting (K, E) features lexicographically."""
    return np.lexsort(feats.T[::-1])


class LayoutGenerator(Module):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        d = cfg.d
        self.image_encoder = ImageEncoder(replace(cfg.encoder, d=d), rng, dtype=dtype)
        if cfg.uses_retrieval:
            self.feat_proj = Linear(cfg.feature_dim, d, rng, dtype=dtype) if cfg.feature_dim != d else None
            self.fusion = MultiHeadAttention(d, cfg.heads, rng, cfg.dropout, dtype=dtype)
            self.ret_pos = Parameter((rng.standard_normal((cfg.K, d)) * 0.02).astype(dtype)) if cfg.retrieval_pos_emb else None
        else:
            self.feat_proj = self.fusion = self.ret_pos = None
        cv = cfg.constraint_vocab
        self.const_emb = Embedding(cv.size, d, rng, dtype=dtype)
        self.const_pos = Embedding(cfg.max_constraint_len, d, rng, dtype=dtype)
        self.const_encoder = TransformerEncoder(d, cfg.layers, cfg.heads, cfg.hidden, rng, cfg.dropout, dtype=dtype)
        self.tok_emb = Embedding(cfg.vocab_size, d, rng, dtype=dtype)
        self.pos_emb = Embedding(cfg.max_len, d, rng, dtype=dtype)
        self.decoder = [DecoderLayer(d, cfg.heads, cfg.hidden, rng, cfg.dropout, dtype=dtype) for _ in range(cfg.layers)]
        self.norm = LayerNorm(d, dtype=dtype)
        self.head = Linear(d, cfg.vocab_size, rng, std=0.02, dtype=dtype)
        # stamp of the frozen layout encoder behind the retrieval features
        self.feature_stamp: str | None = None

    @property
    def dtype(self):
        return self.tok_emb.weight.dtype

    # -- conditioning -------------------------------------------------------------
    def project_retrieved(self, feats: np.ndarray) -> Tensor:
        x = Tensor(np.asarray(feats, dtype=self.dtype))
        if self.feat_proj is not None:
            x = self.feat_proj(x)
        elif x.shape[-1] != self.cfg.d:
            raise F.shape_error("project_retrieved", x.shape, (self.cfg.d,))
        return x

    def fuse(self, f_I: Tensor, retrieved: np.ndarray, rng=None) -> Tensor:
        """Concatenate image features, retrieved-layout features and their cross-attention.

        Keys are visited in canonical order inside the attention, so permuting
        ``retrieved`` permutes the middle block of the output and leaves the
        cross-attended block bit-identical.
        """
        retrieved = np.asarray(retrieved)
        if retrieved.ndim != 3 or retrieved.shape[1] != self.cfg.K:
            raise ValueError(f"fuse: expected (batch, K={self.cfg.K}, E) retrieved features, got {retrieved.shape}")
        f_L = self.project_retrieved(retrieved)
        if self.ret_pos is not None:
            f_L = f_L + self.ret_pos
            keys = f_L
        else:
            order = np.stack([canonical_order(r) for r in retrieved])
            keys = self.project_retrieved(np.take_along_axis(retrieved, order[:, :, None], axis=1))
        f_C = self.fusion(f_I, keys, None, rng)
        return F.concat([f_I, f_L, f_C], axis=1)

    def encode_constraints(self, tokens: np.ndarray, valid: np.ndarray, rng=None) -> Tensor | None:
        """(B, n) constraint token ids -> (B, n, d); None when n == 0."""
        if tokens.shape[1] == 0:
            return None
        if tokens.shape[1] > self.cfg.max_constraint_len:
            raise ValueError(f"constraint sequence of length {tokens.shape[1]} exceeds {self.cfg.max_constraint_len}")
        x = self.const_emb(tokens) + self.const_pos(np.arange(tokens.shape[1]))
        x = F.dropout(x, self.cfg.dropout, rng, self.training)
        out = self.const_encoder(x, padding_mask(valid, self.dtype), rng)
        return out

    def memory(self, images: np.ndarray, retrieved: np.ndarray | None, const_tokens: np.ndarray, const_valid: np.ndarray, rng=None) -> tuple[Tensor, np.ndarray]:
        """Decoder memory and its (B, M) validity mask."""
        f_I = self.image_encoder(images, rng)
        if self.cfg.uses_retrieval:
            if retrieved is None:
                raise ValueError("model was configured with retrieval but no retrieved features were given")
            retrieved = np.asarray(retrieved)
            if self.ret_pos is None:
                order = np.stack([canonical_order(r) for r in retrieved])
                retrieved = np.take_along_axis(retrieved, order[:, :, None], axis=1)
            mem = self.fuse(f_I, retrieved, rng)
        else:
            mem = f_I
        b, rows = mem.shape[0], mem.shape[1]
        valid = np.ones((b, rows), dtype=bool)
        f_const = self.encode_constraints(const_tokens, const_valid, rng)
        if f_const is not None:
            mem = F.concat([mem, f_const], axis=1)
            valid = np.concatenate([valid, const_valid], axis=1)
        return mem, valid

    # -- decoding -------------------------------------------------------------------
    def decode(self, ids: np.ndarray, memory: Tensor, memory_valid: np.ndarray, rng=None) -> Tensor:
        """Teacher-forced logits (B, L, V) for input ids (B, L)."""
        b, length = ids.shape
        if length > self.cfg.max_len:
            raise ValueError(f"sequence length {length} exceeds maximum {self.cfg.max_len}")
        x = self.tok_emb(ids) + self.pos_emb(np.arange(length))
        x = F.dropout(x, self.cfg.dropout, rng, self.training)
        self_mask = causal_mask(length, self.dtype)
        mem_mask = padding_mask(memory_valid, self.dtype)
        for layer in self.decoder:
            x = layer(x, memory, self_mask, mem_mask, rng)
        return self.head(self.norm(x))

    def forward(self, images, retrieved, const_tokens, const_valid, ids, rng=None) -> Tensor:
        mem, valid = self.memory(images, retrieved, const_tokens, const_valid, rng)
        return self.decode(ids, mem, valid, rng)

    # -- persistence -------------------------------------------------------------------
    def save(self, path, schema: CategorySchema | None = None, stamp: str | None = None, extra: dict | None = None) -> None:
        config = {
            "kind": "layout_generator",
            "generator": self.cfg.to_json(),
            "schema": schema.to_json() if schema else None,
            "B": self.cfg.B,
            "K": self.cfg.K,
            "embedding_kind": self.cfg.retrieval,
            "layout_encoder_stamp": stamp if stamp is not None else self.feature_stamp,
        }
        if extra:
            config.update(extra)
        ckpt.save(path, self.state_dict(), config)

    @classmethod
    def load(cls, path) -> tuple["LayoutGenerator", dict]:
        tensors, config = ckpt.load(path)
        if config.get("kind") != "layout_generator":
            raise ckpt.CheckpointError(f"{path} is not a generator checkpoint")
        cfg = GeneratorConfig.from_json(config["generator"])
        model = cls(cfg, np.random.default_rng(0))
        model.load_state_dict(tensors)
        model.feature_stamp = config.get("layout_encoder_stamp")
        model.eval()
        return model, config
