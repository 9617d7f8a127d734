"""Top-k sampling over (possibly masked) logits."""

from __future__ import annotations

import numpy as np


class EmptyDecodingSpace(RuntimeError):
    """Every candidate token was masked out."""


def topk_sample(logits, k: int = 5, temperature: float = 1.0, rng: np.random.Generator | None = None) -> int:
    """Draw one token id from the ``k`` largest finite logits.

    Candidates are ordered by descending logit (ties by ascending id) and one
    uniform draw is consumed per call, so trajectories are reproducible even
    when ``k == 1`` returns the argmax.
    """
    logits = np.asarray(logits, dtype=np.float64)[None, :]
    u = None if rng is None else rng.random(1)
    return int(topk_sample_batch(logits, k, temperature, u=u)[0])


def topk_sample_batch(logits: np.ndarray, k: int = 5, temperature: float = 1.0, rng: np.random.Generator | None = None, u: np.ndarray | None = None) -> np.ndarray:
    """Vectorised :func:`topk_sample` over the rows of a (N, V) array."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    logits = np.asarray(logits, dtype=np.float64)
    n, vocab = logits.shape
    finite = np.isfinite(logits)
    empty = ~finite.any(axis=1)
    if empty.any():
        raise EmptyDecodingSpace(f"empty decoding space in row(s) {np.flatnonzero(empty).tolist()}")
    if u is None:
        u = (rng or np.random.default_rng()).random(n)
    k = min(k, vocab)
    # stable sort on -logit keeps ascending id among ties
    order = np.argsort(np.where(finite, -logits, np.inf), axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(logits, order, axis=1)
    valid = np.isfinite(top)
    scaled = np.where(valid, top / temperature, -np.inf)
    scaled = scaled - scaled[:, :1]
    p = np.where(valid, np.exp(scaled), 0.0)
    cdf = np.cumsum(p, axis=1)
    cdf /= cdf[:, -1:]
    pick = (cdf <= np.asarray(u)[:, None]).sum(axis=1)
    pick = np.minimum(pick, valid.sum(axis=1) - 1)
    return order[np.arange(n), pick]
