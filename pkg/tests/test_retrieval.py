import numpy as np
import pytest

from ralf.core import Layout, SaliencyMap
from ralf.retrieval import (
    RetrievalDatabase,
    RetrievalError,
    StampMismatch,
    build_database,
    embed_saliency,
    neighbor_table,
    query_indices,
    query_knn,
    random_retrieve,
)


def random_db(n: int, E: int = 16, seed: int = 0, duplicates: bool = False) -> RetrievalDatabase:
    rng = np.random.default_rng(seed)
    sims = rng.standard_normal((n, E))
    if duplicates:
        sims[n // 2 :] = sims[: n - n // 2]
    sims /= np.linalg.norm(sims, axis=1, keepdims=True)
    ids = [f"s{rng.integers(1 << 30):09d}-{i}" for i in range(n)]
    return RetrievalDatabase(ids, sims, rng.standard_normal((n, 4)), [Layout()] * n, "saliency", "0" * 16)


def scan_oracle(db: RetrievalDatabase, q: np.ndarray, K: int, exclude_id=None) -> list[str]:
    scored = []
    for sid, emb in zip(db.ids, db.sims):
        if sid == exclude_id:
            continue
        cos = float(np.dot(emb, q) / (np.linalg.norm(emb) * np.linalg.norm(q)))
        scored.append((-cos, sid))
    scored.sort()
    return [sid for _, sid in scored[:K]]


# -- embedding ------------------------------------------------------------------------

def test_uniform_saliency_embedding():
    np.testing.assert_allclose(embed_saliency(SaliencyMap(np.full((8, 6, 1), 0.5)), grid=2), [0.5] * 4)


def test_zero_saliency_embedding():
    v = embed_saliency(SaliencyMap(np.zeros((8, 8, 1))), grid=4)
    assert v[0] == 1.0 and not v[1:].any()


def test_embedding_scale_invariant_and_unit():
    s = np.random.default_rng(0).random((40, 28)) * 0.5
    a, b = embed_saliency(s), embed_saliency(2 * s)
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert abs(np.linalg.norm(a) - 1.0) < 1e-6 and a.shape == (256,)


def test_embedding_matches_block_mean():
    s = np.random.default_rng(1).random((32, 16))
    pooled = s.reshape(4, 8, 4, 4).mean(axis=(1, 3)).ravel()
    np.testing.assert_allclose(embed_saliency(s, grid=4), pooled / np.linalg.norm(pooled), atol=1e-12)


# -- exact search -----------------------------------------------------------------------

def test_self_query_returns_self_then_second():
    db = random_db(50)
    q = db.sims[7]
    assert [e.sample_id for e in query_knn(db, q, 1)] == [db.ids[7]]
    second = scan_oracle(db, q, 2)[1]
    assert [e.sample_id for e in query_knn(db, q, 1, exclude_id=db.ids[7])] == [second]


def test_knn_matches_exhaustive_scan():
    db = random_db(1000, seed=1)
    rng = np.random.default_rng(2)
    for qi in range(100):
        q = rng.standard_normal(db.E)
        exclude = db.ids[int(rng.integers(len(db)))] if qi % 2 else None
        got = [db.ids[i] for i in query_indices(db, q, 16, exclude)]
        assert got == scan_oracle(db, q, 16, exclude)


def test_ties_break_by_ascending_id():
    db = random_db(40, duplicates=True, seed=3)
    q = db.sims[0]
    got = [e.sample_id for e in query_knn(db, q, 2)]
    assert got == sorted([db.ids[0], db.ids[20]])
    sims = [float(e.sim_embedding @ q) for e in query_knn(db, q, 40)]
    assert all(a >= b for a, b in zip(sims, sims[1:]))


def test_leave_one_out_over_split():
    db = random_db(300, seed=4)
    table = neighbor_table(db, db.sims, 16, db.ids)
    for i, row in enumerate(table):
        assert i not in row
        assert [db.ids[j] for j in row] == scan_oracle(db, db.sims[i], 16, db.ids[i])


def test_k_too_large():
    db = random_db(10)
    with pytest.raises(RetrievalError):
        query_knn(db, db.sims[0], 11)
    with pytest.raises(RetrievalError):
        query_knn(db, db.sims[0], 10, exclude_id=db.ids[0])
    with pytest.raises(RetrievalError):
        random_retrieve(db, 11, np.random.default_rng(0))


def test_stamp_guard():
    db = random_db(10)
    with pytest.raises(StampMismatch):
        query_knn(db, db.sims[0], 1, stamp="f" * 16)


def test_duplicate_ids_rejected():
    with pytest.raises(RetrievalError, match="duplicate"):
        RetrievalDatabase(["a", "a"], np.eye(2), np.zeros((2, 1)), [Layout()] * 2, "saliency", "0" * 16)


# -- random retrieval -------------------------------------------------------------------

def test_random_full_size_is_permutation():
    db = random_db(12)
    got = [e.sample_id for e in random_retrieve(db, 12, np.random.default_rng(0))]
    assert sorted(got) == sorted(db.ids)


def test_random_reproducible():
    db = random_db(30)
    a = [e.sample_id for e in random_retrieve(db, 5, np.random.default_rng(9))]
    b = [e.sample_id for e in random_retrieve(db, 5, np.random.default_rng(9))]
    assert a == b


def test_random_uniform_frequencies():
    db = random_db(10)
    rng = np.random.default_rng(0)
    n = 10_000
    counts = np.bincount([db.index[random_retrieve(db, 1, rng)[0].sample_id] for _ in range(n)], minlength=10)
    sigma = np.sqrt(n * 0.1 * 0.9)
    assert np.all(np.abs(counts - n * 0.1) <= 3 * sigma)


# -- build and persistence --------------------------------------------------------------

def test_build_database_and_file_roundtrip(tmp_path, small_splits, small_encoder):
    train = small_splits["train"][:100]
    db = build_database(train, "saliency", small_encoder)
    assert len(db) == 100 and db.stamp == small_encoder.stamp
    np.testing.assert_allclose(np.linalg.norm(db.sims, axis=1), 1.0, atol=1e-6)
    db.save(tmp_path / "a.db")
    build_database(train, "saliency", small_encoder).save(tmp_path / "b.db")
    blob = (tmp_path / "a.db").read_bytes()
    assert blob == (tmp_path / "b.db").read_bytes()
    assert blob[:6] == b"RALFDB"
    back = RetrievalDatabase.load(tmp_path / "a.db")
    assert back.ids == db.ids and back.kind == "saliency" and back.stamp == db.stamp
    np.testing.assert_array_equal(back.sims, db.sims)
    np.testing.assert_array_equal(back.features, db.features)
    assert back.layouts == db.layouts
    assert back.to_bytes() == blob


def test_build_rejects_duplicate_ids(small_splits, small_encoder):
    s = small_splits["train"][0]
    with pytest.raises(RetrievalError):
        build_database([s, s], "saliency", small_encoder)
