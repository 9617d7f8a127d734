"""Layout quality metrics: graphic (FID, underlay, overlay, alignment, density,
coverage) and content-aware (occlusion, readability).

Boxes are rasterized onto the pixel grid by rounding edges to the nearest
pixel boundary: pixel column ``c`` is inside when
``round(left * W) <= c < round(right * W)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import kernels
from .core import Canvas, CategorySchema, Layout, SaliencyMap

FID_SHRINKAGE = 1e-6
CONTAIN_ATOL = 1e-9


# -- distribution metrics ------------------------------------------------------

def _as_features(feats) -> np.ndarray:
    arr = np.asarray(feats, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if not np.all(np.isfinite(arr)):
        raise ValueError("fid: non-finite features")
    return arr


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1^1/2 S2 S1^1/2)^1/2), clamped at 0."""
    mu1, mu2 = np.atleast_1d(mu1), np.atleast_1d(mu2)
    sigma1, sigma2 = np.atleast_2d(sigma1), np.atleast_2d(sigma2)
    diff = mu1 - mu2
    s1 = _sqrtm_psd(sigma1)
    inner = s1 @ sigma2 @ s1
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_covmean = float(np.sqrt(np.clip(vals, 0.0, None)).sum())
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_covmean)
    return max(value, 0.0)


def feature_stats(feats) -> tuple[np.ndarray, np.ndarray]:
    x = _as_features(feats)
    if x.shape[0] < 2:
        raise ValueError("fid: need at least 2 features per set")
    mu = x.mean(axis=0)
    sigma = np.atleast_2d(np.cov(x, rowvar=False)) + FID_SHRINKAGE * np.eye(x.shape[1])
    return mu, sigma


def fid(real_feats, gen_feats) -> float:
    mu1, s1 = feature_stats(real_feats)
    mu2, s2 = feature_stats(gen_feats)
    return frechet_distance(mu1, s1, mu2, s2)


def density_coverage(real_feats, gen_feats, k: int = 5) -> tuple[float, float]:
    real = _as_features(real_feats)
    gen = _as_features(gen_feats)
    n, m = real.shape[0], gen.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if k >= n:
        raise ValueError(f"k={k} must be smaller than the number of real features ({n})")
    sq = (real * real).sum(1)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * real @ real.T, 0.0))
    np.fill_diagonal(d, np.inf)
    radii = np.sort(d, axis=1)[:, k - 1]
    hits, covered = kernels.ball_counts(real, gen, radii)
    return float(hits.sum() / (k * m)), float(covered.mean())


# -- graphic metrics on a single layout -------------------------------------------

def _split(layout: Layout, schema: CategorySchema):
    boxes = layout.boxes()
    cats = np.array(layout.categories, dtype=np.int64)
    under = np.isin(cats, list(schema.underlay_ids)) if len(cats) else np.zeros(0, bool)
    return boxes, under


def _contains(outer, inner) -> bool:
    ol, ot, orr, ob = outer[0] - outer[2] / 2, outer[1] - outer[3] / 2, outer[0] + outer[2] / 2, outer[1] + outer[3] / 2
    il, it, ir, ib = inner[0] - inner[2] / 2, inner[1] - inner[3] / 2, inner[0] + inner[2] / 2, inner[1] + inner[3] / 2
    a = CONTAIN_ATOL
    return ol <= il + a and ot <= it + a and ir <= orr + a and ib <= ob + a


def underlay_strict(layout: Layout, schema: CategorySchema) -> float | None:
    """Fraction of underlays that fully contain at least one non-underlay element."""
    boxes, under = _split(layout, schema)
    if not under.any():
        return None
    others = boxes[~under]
    scores = [any(_contains(u, o) for o in others) for u in boxes[under]]
    return float(np.mean(scores))


def underlay_loose(layout: Layout, schema: CategorySchema) -> float | None:
    """Mean over underlays of the best covered fraction of any non-underlay element."""
    boxes, under = _split(layout, schema)
    if not under.any():
        return None
    if under.all():
        return 0.0
    inter = kernels.intersection_matrix(boxes)
    area = boxes[:, 2] * boxes[:, 3]
    frac = inter[np.ix_(under, ~under)] / area[~under][None, :]
    return float(np.mean(np.clip(frac.max(axis=1), 0.0, 1.0)))


def iou_matrix(boxes: np.ndarray) -> np.ndarray:
    inter = kernels.intersection_matrix(boxes)
    area = boxes[:, 2] * boxes[:, 3]
    union = area[:, None] + area[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def overlay(layout: Layout, schema: CategorySchema) -> float:
    """Mean IoU over unordered pairs of non-underlay elements."""
    boxes, under = _split(layout, schema)
    boxes = boxes[~under]
    n = len(boxes)
    if n < 2:
        return 0.0
    iou = iou_matrix(boxes)
    iu = np.triu_indices(n, k=1)
    return float(iou[iu].mean())


def alignment(layout: Layout) -> float:
    return kernels.alignment(layout.boxes())


# -- content metrics --------------------------------------------------------------

def box_pixels(box, H: int, W: int) -> tuple[int, int, int, int]:
    """Pixel index ranges ``(r0, r1, c0, c1)`` covered by a center/size box."""
    cx, cy, w, h = box
    c0 = min(max(int(math.floor((cx - w / 2) * W + 0.5)), 0), W)
    c1 = min(max(int(math.floor((cx + w / 2) * W + 0.5)), 0), W)
    r0 = min(max(int(math.floor((cy - h / 2) * H + 0.5)), 0), H)
    r1 = min(max(int(math.floor((cy + h / 2) * H + 0.5)), 0), H)
    return r0, r1, c0, c1


def union_mask(layout: Layout, H: int, W: int) -> np.ndarray:
    mask = np.zeros((H, W), dtype=bool)
    for e in layout.elements:
        r0, r1, c0, c1 = box_pixels(e.bbox, H, W)
        mask[r0:r1, c0:c1] = True
    return mask


def occlusion(layout: Layout, saliency: SaliencyMap) -> float:
    """Mean saliency over the pixels covered by the union of all boxes."""
    s = saliency.values[:, :, 0]
    mask = union_mask(layout, s.shape[0], s.shape[1])
    if not mask.any():
        return 0.0
    return float(s[mask].mean())


def grayscale(canvas: Canvas) -> np.ndarray:
    px = canvas.pixels.astype(np.float64)
    return 0.299 * px[:, :, 0] + 0.587 * px[:, :, 1] + 0.114 * px[:, :, 2]


def gradient_magnitude(gray: np.ndarray) -> np.ndarray:
    """(|dx| + |dy|) / 2 with forward differences, zero on the last row/column."""
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    gx[:, :-1] = gray[:, 1:] - gray[:, :-1]
    gy[:-1, :] = gray[1:, :] - gray[:-1, :]
    return (np.abs(gx) + np.abs(gy)) / 2.0


def readability(layout: Layout, canvas: Canvas, schema: CategorySchema) -> float | None:
    """Mean image-gradient magnitude inside text boxes; None without text."""
    grad = gradient_magnitude(grayscale(canvas))
    values = []
    for e in layout.elements:
        if e.category not in schema.text_ids:
            continue
        r0, r1, c0, c1 = box_pixels(e.bbox, canvas.H, canvas.W)
        if r1 > r0 and c1 > c0:
            values.append(grad[r0:r1, c0:c1].mean())
    return float(np.mean(values)) if values else None


# -- reports ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    fid: float | None = None
    und_s: float | None = None
    und_l: float | None = None
    ove: float | None = None
    align: float | None = None
    occ: float | None = None
    rea: float | None = None
    den: float | None = None
    cov: float | None = None
    n_real: int = 0
    n_gen: int = 0
    per_trial: list = field(default_factory=list)

    KEYS = ("fid", "und_s", "und_l", "ove", "align", "occ", "rea", "den", "cov")

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [f"{'metric':<8}{'value':>12}"]
        for k in self.KEYS:
            v = getattr(self, k)
            rows.append(f"{k:<8}{'n/a' if v is None else f'{v:.5f}':>12}")
        rows.append(f"{'samples':<8}{self.n_gen:>12d}")
        return "\n".join(rows)


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def layout_metrics(layouts: Sequence[Layout], canvases: Sequence[Canvas], saliencies: Sequence[SaliencyMap], schema: CategorySchema) -> dict:
    """Per-dataset averages of the per-layout metrics (undefined values skipped)."""
    return {
        "und_s": _mean_defined(underlay_strict(l, schema) for l in layouts),
        "und_l": _mean_defined(underlay_loose(l, schema) for l in layouts),
        "ove": _mean_defined(overlay(l, schema) for l in layouts),
        "align": _mean_defined(alignment(l) for l in layouts),
        "occ": _mean_defined(occlusion(l, s) for l, s in zip(layouts, saliencies) if l.T),
        "rea": _mean_defined(readability(l, c, schema) for l, c in zip(layouts, canvases)),
    }


def evaluate_trial(real_feats, gen_feats, layouts, canvases, saliencies, schema, k: int = 5) -> dict:
    out = layout_metrics(layouts, canvases, saliencies, schema)
    out["fid"] = fid(real_feats, gen_feats)
    out["den"], out["cov"] = density_coverage(real_feats, gen_feats, k)
    return out


def average_trials(trials: list[dict], n_real: int, n_gen: int) -> MetricReport:
    report = MetricReport(n_real=n_real, n_gen=n_gen, per_trial=trials)
    for key in MetricReport.KEYS:
        setattr(report, key, _mean_defined(t.get(key) for t in trials))
    return report
