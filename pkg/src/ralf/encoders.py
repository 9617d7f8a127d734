"""Image encoder (canvas + saliency -> patch features) and the frozen layout encoder.

The image encoder cuts the 4-channel (RGB + saliency) input into
non-overlapping ``P x P`` patches, embeds them linearly, adds learned row and
column embeddings and refines the grid with a transformer encoder.

The layout encoder embeds each element as the sum of a category embedding,
four coordinate-bin embeddings and an embedding of the element's rank in
canonical raster order, runs a transformer encoder and mean-pools the result.
Elements are sorted before encoding, so the feature is exactly invariant to
element permutations. It is pretrained by masked-element
reconstruction (30% of elements replaced by a mask token, their five tokens
predicted) and then frozen and stamped with a content hash.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .core import Canvas, Layout, SaliencyMap, raster_key
from .numerics import Embedding, Linear, Module, Parameter, Tensor, TransformerEncoder, no_grad, padding_mask
from .numerics import checkpoint as ckpt
from .numerics import functional as F
from .numerics.optim import AdamW, clip_grad_norm
from .tokenizer import quantize

logger = logging.getLogger(__name__)

MASK_RATE = 0.3


class FrozenEncoderError(RuntimeError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 16
    d: int = 256
    layers: int = 6
    heads: int = 8
    hidden: int = 1024
    input_hw: tuple[int, int] = (352, 240)
    dropout: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "input_hw", tuple(self.input_hw))
        h, w = self.input_hw
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"input {h}x{w} not divisible by patch size {self.patch_size}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.input_hw[0] // self.patch_size, self.input_hw[1] // self.patch_size

    @property
    def rows(self) -> int:
        gh, gw = self.grid
        return gh * gw

    @classmethod
    def paper(cls) -> "EncoderConfig":
        return cls()

    @classmethod
    def toy(cls) -> "EncoderConfig":
        return cls(patch_size=8, d=64, layers=2, heads=4, hidden=256, input_hw=(80, 56))


@dataclass(frozen=True)
class LayoutEncoderConfig:
    C: int = 3
    B: int = 128
    t_max: int = 10
    d: int = 256
    layers: int = 2
    heads: int = 8
    hidden: int = 1024
    dropout: float = 0.1

    @classmethod
    def paper(cls, C: int = 3, B: int = 128) -> "LayoutEncoderConfig":
        return cls(C=C, B=B)

    @classmethod
    def toy(cls, C: int = 3, B: int = 128) -> "LayoutEncoderConfig":
        return cls(C=C, B=B, d=64, layers=2, heads=4, hidden=256)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    data: np.ndarray  # (H'W', d)
    grid: tuple[int, int]

    @property
    def rows(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True, eq=False)
class LayoutFeature:
    vector: np.ndarray
    stamp: str


# -- image encoder ----------------------------------------------------------------

def preprocess(canvas: Canvas, saliency: SaliencyMap, input_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of RGB + saliency to ``input_hw``; returns (H_e, W_e, 4) float32."""
    if (canvas.H, canvas.W) != (saliency.H, saliency.W):
        raise ValueError(f"canvas {canvas.H}x{canvas.W} and saliency {saliency.H}x{saliency.W} differ")
    img = np.concatenate([canvas.pixels, saliency.values], axis=2).astype(np.float32)
    he, we = input_hw
    if (canvas.H, canvas.W) != (he, we):
        rows = np.minimum(((np.arange(he) + 0.5) * canvas.H / he).astype(np.int64), canvas.H - 1)
        cols = np.minimum(((np.arange(we) + 0.5) * canvas.W / we).astype(np.int64), canvas.W - 1)
        img = img[rows][:, cols]
    return img


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(B, H, W, C) -> (B, (H/p)(W/p), p*p*C) in row-major patch order."""
    b, h, w, c = images.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


class ImageEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        gh, gw = cfg.grid
        self.patch_embed = Linear(4 * cfg.patch_size**2, cfg.d, rng, dtype=dtype)
        self.row_pos = Parameter((rng.standard_normal((gh, 1, cfg.d)) * 0.02).astype(dtype))
        self.col_pos = Parameter((rng.standard_normal((1, gw, cfg.d)) * 0.02).astype(dtype))
        self.encoder = TransformerEncoder(cfg.d, cfg.layers, cfg.heads, cfg.hidden, rng, cfg.dropout, dtype=dtype)

    def __call__(self, images: np.ndarray, rng=None) -> Tensor:
        """``images``: (B, H_e, W_e, 4) preprocessed inputs -> (B, H'W', d)."""
        if images.shape[1:3] != tuple(self.cfg.input_hw):
            raise ValueError(f"image encoder expects {self.cfg.input_hw}, got {images.shape[1:3]}")
        dtype = self.patch_embed.weight.dtype
        patches = patchify(images.astype(dtype) - dtype.type(0.5), self.cfg.patch_size)
        x = self.patch_embed(Tensor(patches))
        gh, gw = self.cfg.grid
        pos = F.reshape(self.row_pos + self.col_pos, (1, gh * gw, self.cfg.d))
        x = F.dropout(x + pos, self.cfg.dropout, rng, self.training)
        return self.encoder(x, None, rng)


def encode_image(canvas: Canvas, saliency: SaliencyMap, cfg: EncoderConfig, params: ImageEncoder) -> FeatureMap:
    """Eval-mode features of one canvas: a (H'W') x d map."""
    img = preprocess(canvas, saliency, cfg.input_hw)[None]
    was_training = params.training
    params.eval()
    with no_grad():
        out = params(img).data[0]
    params.train(was_training)
    return FeatureMap(out, cfg.grid)


# -- layout encoder ----------------------------------------------------------------

def layout_arrays(layouts: list[Layout], t_max: int, B: int, canonical: bool = True):
    """Category ids, coordinate bins and validity masks padded to ``t_max``."""
    n = len(layouts)
    cats = np.zeros((n, t_max), dtype=np.int64)
    bins = np.zeros((n, t_max, 4), dtype=np.int64)
    valid = np.zeros((n, t_max), dtype=bool)
    for i, layout in enumerate(layouts):
        elements = sorted(layout.elements, key=raster_key) if canonical else list(layout.elements)
        if len(elements) > t_max:
            raise ValueError(f"layout with {len(elements)} elements exceeds t_max={t_max}")
        for j, e in enumerate(elements):
            cats[i, j] = e.category
            bins[i, j] = quantize(np.array(e.bbox), B)
            valid[i, j] = True
    return cats, bins, valid


class LayoutEncoder(Module):
    def __init__(self, cfg: LayoutEncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        # category ids 1..C, C + 1 is the mask token, 0 is padding
        self.cat_emb = Embedding(cfg.C + 2, cfg.d, rng, dtype=dtype)
        # bins 0..B-1, B is the mask token
        self.coord_emb = [Embedding(cfg.B + 1, cfg.d, rng, dtype=dtype) for _ in range(4)]
        # rank in canonical raster order; lets masked elements tell their slots apart
        self.slot_emb = Embedding(cfg.t_max, cfg.d, rng, dtype=dtype)
        self.empty = Parameter((rng.standard_normal(cfg.d) * 0.02).astype(dtype))
        self.encoder = TransformerEncoder(cfg.d, cfg.layers, cfg.heads, cfg.hidden, rng, cfg.dropout, dtype=dtype)
        self.cat_head = Linear(cfg.d, cfg.C, rng, std=0.02, dtype=dtype)
        self.coord_head = Linear(cfg.d, 4 * cfg.B, rng, std=0.02, dtype=dtype)
        self.frozen = False
        self.stamp: str | None = None

    def elements(self, cats: np.ndarray, bins: np.ndarray, valid: np.ndarray, rng=None) -> Tensor:
        x = self.cat_emb(cats)
        for a in range(4):
            x = x + self.coord_emb[a](bins[..., a])
        x = x + self.slot_emb(np.broadcast_to(np.arange(cats.shape[1]), cats.shape))
        x = F.dropout(x, self.cfg.dropout, rng, self.training)
        mask = padding_mask(valid, dtype=x.dtype)
        return self.encoder(x, mask, rng)

    def pool(self, hidden: Tensor, valid: np.ndarray) -> Tensor:
        w = valid.astype(hidden.dtype)
        counts = w.sum(axis=1, keepdims=True)
        pooled = F.sum(hidden * Tensor(w[:, :, None]), axis=1) / Tensor(np.maximum(counts, 1.0))
        empty_rows = Tensor((counts == 0).astype(hidden.dtype))
        return pooled * (1.0 - empty_rows) + empty_rows * F.reshape(self.empty, (1, -1))

    def freeze(self) -> str:
        self.eval()
        self.frozen = True
        self.stamp = ckpt.stamp(self.state_dict())
        return self.stamp

    def save(self, path) -> None:
        if not self.frozen:
            raise FrozenEncoderError("only frozen layout encoders are saved")
        config = {"kind": "layout_encoder", "frozen": True, "stamp": self.stamp, "config": asdict(self.cfg)}
        ckpt.save(path, self.state_dict(), config)

    @classmethod
    def load(cls, path) -> "LayoutEncoder":
        tensors, config = ckpt.load(path)
        if config.get("kind") != "layout_encoder" or not config.get("frozen"):
            raise FrozenEncoderError(f"{path} is not a frozen layout encoder checkpoint")
        enc = cls(LayoutEncoderConfig(**config["config"]), np.random.default_rng(0))
        enc.load_state_dict(tensors)
        enc.freeze()
        if enc.stamp != config["stamp"]:
            raise FrozenEncoderError(f"{path}: stamp mismatch (file {config['stamp']}, content {enc.stamp})")
        return enc


def encode_layouts(layouts: list[Layout], encoder: LayoutEncoder, batch: int = 512) -> np.ndarray:
    """(N, d) features. Elements are put in canonical order first, so the
    output is exactly invariant to element permutations."""
    if not encoder.frozen:
        raise FrozenEncoderError("encode_layout requires a frozen layout encoder")
    cfg = encoder.cfg
    out = []
    with no_grad():
        for start in range(0, len(layouts), batch):
            cats, bins, valid = layout_arrays(layouts[start : start + batch], cfg.t_max, cfg.B)
            hidden = encoder.elements(cats, bins, valid)
            out.append(encoder.pool(hidden, valid).data)
    if not out:
        return np.zeros((0, cfg.d), dtype=np.float32)
    return np.concatenate(out, axis=0)


def encode_layout(layout: Layout, encoder: LayoutEncoder) -> LayoutFeature:
    return LayoutFeature(encode_layouts([layout], encoder)[0], encoder.stamp)


def _mask_batch(cats, bins, valid, rng, C: int, B: int):
    masked = (rng.random(valid.shape) < MASK_RATE) & valid
    # every nonempty layout gets at least one masked element
    for i in np.flatnonzero(valid.any(axis=1) & ~masked.any(axis=1)):
        masked[i, rng.choice(np.flatnonzero(valid[i]))] = True
    in_cats = np.where(masked, C + 1, cats)
    in_bins = np.where(masked[..., None], B, bins)
    return in_cats, in_bins, masked


def reconstruction_loss(encoder: LayoutEncoder, cats, bins, valid, masked_inputs, rng=None) -> Tensor:
    """Mean cross-entropy over the five tokens of every masked element."""
    in_cats, in_bins, masked = masked_inputs
    cfg = encoder.cfg
    hidden = encoder.elements(in_cats, in_bins, valid, rng)
    idx = np.nonzero(masked)
    h = hidden[idx]
    cat_logits = encoder.cat_head(h)
    coord_logits = F.reshape(encoder.coord_head(h), (h.shape[0], 4, cfg.B))
    loss_cat = F.cross_entropy(cat_logits, cats[idx] - 1)
    loss_coord = F.cross_entropy(coord_logits, bins[idx])
    return (loss_cat + loss_coord * 4.0) * 0.2


def evaluate_reconstruction(encoder: LayoutEncoder, layouts: list[Layout], seed: int = 0) -> float:
    """Masked-element reconstruction loss with a fixed masking draw."""
    cfg = encoder.cfg
    cats, bins, valid = layout_arrays(layouts, cfg.t_max, cfg.B)
    keep = valid.any(axis=1)
    cats, bins, valid = cats[keep], bins[keep], valid[keep]
    masked = _mask_batch(cats, bins, valid, np.random.default_rng(seed), cfg.C, cfg.B)
    was_training = encoder.training
    encoder.eval()
    with no_grad():
        loss = float(reconstruction_loss(encoder, cats, bins, valid, masked).data)
    encoder.train(was_training)
    return loss


def pretrain_layout_encoder(
    layouts: list[Layout],
    cfg: LayoutEncoderConfig,
    steps: int = 2000,
    rng: np.random.Generator | None = None,
    batch_size: int = 64,
    lr: float = 1e-3,
    weight_decay: float = 1e-4,
    max_norm: float = 1.0,
) -> LayoutEncoder:
    """Masked-element pretraining; returns a frozen, stamped encoder."""
    layouts = [l for l in layouts if l.T > 0]
    if len(layouts) < 2:
        raise ValueError("pretrain_layout_encoder needs at least 2 nonempty training layouts")
    rng = rng if rng is not None else np.random.default_rng(0)
    init_rng, data_rng = (np.random.default_rng(s) for s in rng.integers(0, 2**63, size=2))
    encoder = LayoutEncoder(cfg, init_rng)
    cats_all, bins_all, valid_all = layout_arrays(layouts, cfg.t_max, cfg.B)
    params = encoder.parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay, names=[n for n, _ in encoder.named_parameters()])
    encoder.train()
    for step in range(steps):
        idx = data_rng.choice(len(layouts), size=min(batch_size, len(layouts)), replace=False)
        cats, bins, valid = cats_all[idx], bins_all[idx], valid_all[idx]
        masked = _mask_batch(cats, bins, valid, data_rng, cfg.C, cfg.B)
        opt.zero_grad()
        # dropout rng shares the data stream so the whole run is seed-determined
        loss = reconstruction_loss(encoder, cats, bins, valid, masked, data_rng)
        loss.backward()
        clip_grad_norm(params, max_norm)
        opt.step(lr if step < int(0.7 * steps) else lr * 0.1)
        if step % 200 == 0:
            logger.info("layout encoder step %d loss %.4f", step, float(loss.data))
    encoder.freeze()
    return encoder


def untrained_layout_encoder(cfg: LayoutEncoderConfig, seed: int = 0) -> LayoutEncoder:
    return LayoutEncoder(cfg, np.random.default_rng(seed))
