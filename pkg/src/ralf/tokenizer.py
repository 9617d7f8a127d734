"""Layout <-> flat token sequence.

Token ids: ``pad=0, bos=1, eos=2``, then ``C`` category tokens, then ``B``
geometry-bin tokens shared by x, y, w and h. A layout with T elements becomes
``bos, c1, x1, y1, w1, h1, ..., cT, xT, yT, wT, hT, eos`` (length 5T + 2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Element, Layout

PAD, BOS, EOS = 0, 1, 2
N_SPECIAL = 3
ATTRS = ("category", "x", "y", "w", "h")


class GrammarError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"position {position}: {message}")
        self.position = position


def quantize(v, B: int = 128):
    """Bin index ``min(floor(v * B), B - 1)`` for ``v`` in [0, 1]."""
    arr = np.asarray(v, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError(f"quantize: value outside [0, 1]: {v}")
    out = np.minimum(np.floor(arr * B), B - 1).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def dequantize(b, B: int = 128):
    """Bin center ``(b + 0.5) / B``."""
    arr = np.asarray(b)
    if np.any(arr < 0) or np.any(arr >= B) or np.any(arr != np.floor(arr)):
        raise ValueError(f"dequantize: bin outside 0..{B - 1}: {b}")
    out = (arr.astype(np.float64) + 0.5) / B
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Vocabulary:
    C: int
    B: int = 128

    @property
    def size(self) -> int:
        return N_SPECIAL + self.C + self.B

    @property
    def cat_offset(self) -> int:
        return N_SPECIAL

    @property
    def geo_offset(self) -> int:
        return N_SPECIAL + self.C

    def cat_token(self, c):
        return np.asarray(c) - 1 + N_SPECIAL if np.ndim(c) else int(c) - 1 + N_SPECIAL

    def geo_token(self, b):
        return np.asarray(b) + self.geo_offset if np.ndim(b) else int(b) + self.geo_offset

    def is_cat(self, t: int) -> bool:
        return N_SPECIAL <= t < self.geo_offset

    def is_geo(self, t: int) -> bool:
        return self.geo_offset <= t < self.size

    def token_to_cat(self, t: int) -> int:
        return int(t) - N_SPECIAL + 1

    def token_to_bin(self, t: int) -> int:
        return int(t) - self.geo_offset

    def cat_slice(self) -> slice:
        return slice(N_SPECIAL, self.geo_offset)

    def geo_slice(self) -> slice:
        return slice(self.geo_offset, self.size)

    def delta_bins(self, fraction: float = 0.05) -> int:
        return math.ceil(fraction * self.B)


def max_length(t_max: int) -> int:
    return 5 * t_max + 2


def tokenize_layout(layout: Layout, vocab: Vocabulary) -> list[int]:
    if not layout.elements:
        return [BOS, EOS]
    rows = np.empty((layout.T, 5), dtype=np.int64)
    rows[:, 0] = vocab.cat_token(np.asarray(layout.categories))
    rows[:, 1:] = quantize(layout.boxes(), vocab.B) + vocab.geo_offset
    return [BOS, *rows.ravel().tolist(), EOS]


def slot_of(position: int) -> int:
    """Attribute slot (0=category, 1..4 = x, y, w, h) of a content position >= 1."""
    return (position - 1) % 5


def check_grammar(tokens, vocab: Vocabulary) -> None:
    """Raise :class:`GrammarError` at the first position breaking the grammar."""
    tokens = [int(t) for t in tokens]
    if not tokens or tokens[0] != BOS:
        raise GrammarError("sequence must start with bos", 0)
    for pos in range(1, len(tokens)):
        t = tokens[pos]
        slot = slot_of(pos)
        if t == EOS:
            if slot != 0:
                raise GrammarError(f"eos inside an element (truncated at attribute {ATTRS[slot]})", pos)
            if pos != len(tokens) - 1:
                raise GrammarError("tokens after eos", pos + 1)
            return
        if slot == 0 and not vocab.is_cat(t):
            raise GrammarError(f"expected category token, got {t}", pos)
        if slot != 0 and not vocab.is_geo(t):
            raise GrammarError(f"expected geometry token for {ATTRS[slot]}, got {t}", pos)
    slot = slot_of(len(tokens))
    if slot != 0:
        raise GrammarError(f"sequence ends mid-element (missing {ATTRS[slot]})", len(tokens))
    raise GrammarError("missing eos", len(tokens))


def detokenize(tokens, vocab: Vocabulary) -> Layout:
    check_grammar(tokens, vocab)
    rows = np.asarray(tokens, dtype=np.int64)[1:-1].reshape(-1, 5)
    boxes = dequantize(rows[:, 1:] - vocab.geo_offset, vocab.B).reshape(-1, 4)
    cats = (rows[:, 0] - N_SPECIAL + 1).tolist()
    return Layout(tuple(Element(c, tuple(b)) for c, b in zip(cats, boxes.tolist())))


def layout_bins(layout: Layout, B: int) -> np.ndarray:
    """(T, 4) int array of quantized coordinates."""
    if not layout.elements:
        return np.zeros((0, 4), dtype=np.int64)
    return quantize(layout.boxes(), B).reshape(-1, 4)


def pad_batch(seqs: list[list[int]], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences with ``pad``; returns (ids, valid mask)."""
    length = length or max(len(s) for s in seqs)
    ids = np.full((len(seqs), length), PAD, dtype=np.int64)
    valid = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        if len(s) > length:
            raise ValueError(f"sequence of length {len(s)} exceeds {length}")
        ids[i, : len(s)] = s
        valid[i, : len(s)] = True
    return ids, valid
