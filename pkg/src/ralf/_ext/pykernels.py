"""Pure numpy implementations of the hot geometric and search kernels.

Signatures match the compiled ``_kernels`` module exactly; ``ralf.kernels``
picks one at import time.
"""

from __future__ import annotations

import numpy as np

ALIGN_CLAMP = 1.0 - 1e-8


def _corners(boxes: np.ndarray) -> tuple[np.ndarray, ...]:
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def intersection_matrix(boxes: np.ndarray) -> np.ndarray:
    """(N, N) intersection areas of center/size boxes."""
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    l, t, r, b = _corners(boxes)
    iw = np.clip(np.minimum(r[:, None], r[None, :]) - np.maximum(l[:, None], l[None, :]), 0.0, None)
    ih = np.clip(np.minimum(b[:, None], b[None, :]) - np.maximum(t[:, None], t[None, :]), 0.0, None)
    return iw * ih


def alignment(boxes: np.ndarray) -> float:
    """Mean over elements of -log(1 - d), d the smallest same-type line gap to any other element."""
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    if n < 2:
        return 0.0
    l, t, r, b = _corners(boxes)
    lines = np.stack([l, boxes[:, 0], r, t, boxes[:, 1], b], axis=1)  # (N, 6)
    gaps = np.abs(lines[:, None, :] - lines[None, :, :]).min(axis=2)
    np.fill_diagonal(gaps, np.inf)
    d = np.minimum(gaps.min(axis=1), ALIGN_CLAMP)
    return float(np.mean(-np.log1p(-d)))


def knn_scan(emb: np.ndarray, query: np.ndarray, k: int, exclude: int, rank: np.ndarray) -> np.ndarray:
    """Indices of the ``k`` rows with the largest dot product with ``query``.

    Ties are broken by ascending ``rank``; row ``exclude`` (if >= 0) is skipped.
    """
    scores = np.asarray(emb, dtype=np.float64) @ np.asarray(query, dtype=np.float64)
    order = np.lexsort((rank, -scores))
    if exclude >= 0:
        order = order[order != exclude]
    return order[:k].astype(np.int64)


def ball_counts(real: np.ndarray, gen: np.ndarray, radii: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """For each generated point, how many real k-NN balls contain it; and which real balls are hit."""
    real = np.asarray(real, dtype=np.float64)
    gen = np.asarray(gen, dtype=np.float64)
    d2 = (gen * gen).sum(1)[:, None] + (real * real).sum(1)[None, :] - 2.0 * gen @ real.T
    dist = np.sqrt(np.maximum(d2, 0.0))
    inside = dist <= np.asarray(radii, dtype=np.float64)[None, :]
    return inside.sum(axis=1).astype(np.int64), inside.any(axis=0)
