"""Retrieval database over the training split and exact top-K search.

Database file layout (little-endian)::

    magic     6s   b"RALFDB"
    version   u16
    kind      u8   0 = saliency, 1 = random
    reserved  u8
    E         u32  similarity-embedding length
    d         u32  layout-feature length
    t_max     u16  element slots per record
    id_width  u16  bytes reserved for the sample id
    stamp     16s  layout-encoder stamp (ASCII hex)
    count     u32
    count x record:
        id       id_width bytes, UTF-8, NUL padded
        sim      E x f64
        feature  d x f32
        T        u8
        t_max x (category u8, cx f64, cy f64, w f64, h f64)   unused slots zeroed
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .core import AnnotatedSample, Element, Layout, SaliencyMap
from .encoders import LayoutEncoder, encode_layouts
from .numerics.checkpoint import atomic_write

MAGIC = b"RALFDB"
VERSION = 1
KINDS = ("saliency", "random")
ID_WIDTH = 64
_HEADER = struct.Struct("<6sHBBIIHH16sI")
_ELEMENT = struct.Struct("<Bdddd")


class StampMismatch(RuntimeError):
    pass


class RetrievalError(ValueError):
    pass


def embed_saliency(saliency: SaliencyMap | np.ndarray, grid: int = 16) -> np.ndarray:
    """Average-pool to ``grid x grid``, flatten, L2-normalise.

    An all-zero map returns the unit vector (1, 0, ..., 0).
    """
    s = saliency.values[:, :, 0] if isinstance(saliency, SaliencyMap) else np.asarray(saliency)
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 3:
        s = s[:, :, 0]
    h, w = s.shape
    pooled = np.empty((grid, grid))
    for i in range(grid):
        r0 = (i * h) // grid
        r1 = max(r0 + 1, ((i + 1) * h) // grid)
        for j in range(grid):
            c0 = (j * w) // grid
            c1 = max(c0 + 1, ((j + 1) * w) // grid)
            pooled[i, j] = s[r0:r1, c0:c1].mean()
    v = pooled.reshape(-1)
    norm = np.linalg.norm(v)
    if norm == 0.0:
        out = np.zeros_like(v)
        out[0] = 1.0
        return out
    return v / norm


@dataclass(frozen=True)
class DatabaseEntry:
    sample_id: str
    sim_embedding: np.ndarray
    layout_feature: np.ndarray
    layout: Layout


class RetrievalDatabase:
    """Immutable store of (id, similarity embedding, layout feature, layout)."""

    def __init__(self, ids: Sequence[str], sims: np.ndarray, features: np.ndarray, layouts: Sequence[Layout], kind: str, stamp: str, t_max: int = 10):
        if kind not in KINDS:
            raise RetrievalError(f"unknown embedding kind {kind!r}")
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if list(ids).count(i) > 1})[:3]
            raise RetrievalError(f"duplicate sample ids in database: {dup}")
        n = len(ids)
        if not (len(sims) == len(features) == len(layouts) == n):
            raise RetrievalError("database columns have different lengths")
        self.ids = list(ids)
        self.sims = np.ascontiguousarray(sims, dtype=np.float64).reshape(n, -1)
        self.features = np.ascontiguousarray(features, dtype=np.float32).reshape(n, -1)
        self.layouts = list(layouts)
        self.kind = kind
        self.stamp = stamp
        self.t_max = t_max
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        # rank of each id in sorted order, used to break similarity ties
        self.rank = np.empty(n, dtype=np.int64)
        self.rank[np.argsort(np.array(self.ids, dtype=object), kind="stable")] = np.arange(n)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def E(self) -> int:
        return self.sims.shape[1]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def entry(self, i: int) -> DatabaseEntry:
        return DatabaseEntry(self.ids[i], self.sims[i], self.features[i], self.layouts[i])

    def check_stamp(self, stamp: str | None) -> None:
        if stamp is not None and stamp != self.stamp:
            raise StampMismatch(f"database built with layout encoder {self.stamp}, queried with {stamp}")

    # -- persistence --------------------------------------------------------------
    def to_bytes(self) -> bytes:
        parts = [
            _HEADER.pack(MAGIC, VERSION, KINDS.index(self.kind), 0, self.E, self.d, self.t_max, ID_WIDTH, self.stamp.encode("ascii").ljust(16, b"\0")[:16], len(self))
        ]
        for i in range(len(self)):
            raw = self.ids[i].encode("utf-8")
            if len(raw) > ID_WIDTH:
                raise RetrievalError(f"sample id {self.ids[i]!r} longer than {ID_WIDTH} bytes")
            parts.append(raw.ljust(ID_WIDTH, b"\0"))
            parts.append(self.sims[i].astype("<f8").tobytes())
            parts.append(self.features[i].astype("<f4").tobytes())
            layout = self.layouts[i]
            parts.append(struct.pack("<B", layout.T))
            for j in range(self.t_max):
                if j < layout.T:
                    e = layout.elements[j]
                    parts.append(_ELEMENT.pack(e.category, *e.bbox))
                else:
                    parts.append(_ELEMENT.pack(0, 0.0, 0.0, 0.0, 0.0))
        return b"".join(parts)

    def save(self, path) -> None:
        atomic_write(path, self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RetrievalDatabase":
        magic, version, kind, _, E, d, t_max, id_width, stamp, count = _HEADER.unpack_from(blob, 0)
        if magic != MAGIC:
            raise RetrievalError("not a retrieval database: bad magic")
        if version != VERSION:
            raise RetrievalError(f"unsupported database version {version}")
        off = _HEADER.size
        rec = id_width + 8 * E + 4 * d + 1 + t_max * _ELEMENT.size
        if len(blob) != off + count * rec:
            raise RetrievalError("database file size does not match its header")
        ids, sims, feats, layouts = [], np.empty((count, E)), np.empty((count, d), np.float32), []
        for i in range(count):
            base = off + i * rec
            ids.append(blob[base : base + id_width].rstrip(b"\0").decode("utf-8"))
            p = base + id_width
            sims[i] = np.frombuffer(blob, "<f8", E, p)
            p += 8 * E
            feats[i] = np.frombuffer(blob, "<f4", d, p)
            p += 4 * d
            t = blob[p]
            p += 1
            elements = []
            for j in range(t):
                cat, cx, cy, w, h = _ELEMENT.unpack_from(blob, p + j * _ELEMENT.size)
                elements.append(Element(cat, (cx, cy, w, h)))
            layouts.append(Layout(tuple(elements)))
        return cls(ids, sims, feats, layouts, KINDS[kind], stamp.rstrip(b"\0").decode("ascii"), t_max)

    @classmethod
    def load(cls, path) -> "RetrievalDatabase":
        return cls.from_bytes(Path(path).read_bytes())


def build_database(train: Sequence[AnnotatedSample], embedding_kind: str, encoder: LayoutEncoder, grid: int = 16) -> RetrievalDatabase:
    """One entry per training sample, layout features from the frozen encoder."""
    if not encoder.frozen:
        raise StampMismatch("build_database requires a frozen layout encoder")
    ids = [s.id for s in train]
    if len(set(ids)) != len(ids):
        raise RetrievalError("duplicate ids in training split")
    sims = np.stack([embed_saliency(s.saliency, grid) for s in train]) if train else np.zeros((0, grid * grid))
    layouts = [s.layout for s in train]
    feats = encode_layouts(layouts, encoder)
    return RetrievalDatabase(ids, sims, feats, layouts, embedding_kind, encoder.stamp, encoder.cfg.t_max)


def query_knn(db: RetrievalDatabase, query_embedding, K: int, exclude_id: str | None = None, stamp: str | None = None) -> list[DatabaseEntry]:
    """Exact top-K by cosine similarity; ties broken by ascending sample id."""
    return [db.entry(i) for i in query_indices(db, query_embedding, K, exclude_id, stamp)]


def query_indices(db: RetrievalDatabase, query_embedding, K: int, exclude_id: str | None = None, stamp: str | None = None) -> np.ndarray:
    db.check_stamp(stamp)
    exclude = db.index.get(exclude_id, -1) if exclude_id is not None else -1
    available = len(db) - (1 if exclude >= 0 else 0)
    if K > available:
        raise RetrievalError(f"K={K} exceeds the {available} available entries")
    q = np.asarray(query_embedding, dtype=np.float64)
    if q.shape != (db.E,):
        raise RetrievalError(f"query length {q.shape} != embedding length {db.E}")
    return kernels.knn_scan(db.sims, q, K, exclude, db.rank)


def random_indices(db: RetrievalDatabase, K: int, rng: np.random.Generator, exclude_id: str | None = None) -> np.ndarray:
    pool = np.arange(len(db))
    if exclude_id is not None and exclude_id in db.index:
        pool = pool[pool != db.index[exclude_id]]
    if K > len(pool):
        raise RetrievalError(f"K={K} exceeds the {len(pool)} available entries")
    return rng.choice(pool, size=K, replace=False)


def random_retrieve(db: RetrievalDatabase, K: int, rng: np.random.Generator, exclude_id: str | None = None) -> list[DatabaseEntry]:
    """K entries drawn uniformly without replacement."""
    return [db.entry(i) for i in random_indices(db, K, rng, exclude_id)]


def neighbor_table(db: RetrievalDatabase, queries: np.ndarray, K: int, exclude_ids: Sequence[str | None] | None = None) -> np.ndarray:
    """(Q, K) neighbour indices for many queries at once (leave-one-out when ids given).

    Uses one dense score matrix, then the same (score desc, id asc) order as
    :func:`query_indices`.
    """
    queries = np.asarray(queries, dtype=np.float64)
    scores = queries @ db.sims.T
    if exclude_ids is not None:
        for qi, sid in enumerate(exclude_ids):
            if sid is not None and sid in db.index:
                scores[qi, db.index[sid]] = -np.inf
    available = len(db) - (1 if exclude_ids is not None else 0)
    if K > available:
        raise RetrievalError(f"K={K} exceeds the {available} available entries")
    out = np.empty((len(queries), K), dtype=np.int64)
    for qi in range(len(queries)):
        order = np.lexsort((db.rank, -scores[qi]))
        out[qi] = order[:K]
    return out
