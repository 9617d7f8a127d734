import numpy as np
import pytest

from ralf.core import PKU_SCHEMA, validate_layout
from ralf.metrics import underlay_strict
from ralf.synthdata import SynthConfig, generate_synthetic_dataset, template_for

LOGO, TEXT, UNDERLAY = 1, 2, 3


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic_dataset(SynthConfig(n_samples=300, seed=1))["train"]


def test_hundred_valid_samples():
    samples = generate_synthetic_dataset(SynthConfig(n_samples=100, seed=0))["train"]
    assert len(samples) == 100
    assert all(validate_layout(s.layout, PKU_SCHEMA) == [] for s in samples)


def test_same_seed_identical():
    cfg = SynthConfig(n_samples=20, seed=4)
    a, b = generate_synthetic_dataset(cfg)["train"], generate_synthetic_dataset(cfg)["train"]
    for x, y in zip(a, b):
        assert x.id == y.id and x.layout == y.layout
        assert x.canvas.pixels.tobytes() == y.canvas.pixels.tobytes()
        assert x.saliency.values.tobytes() == y.saliency.values.tobytes()
    other = generate_synthetic_dataset(SynthConfig(n_samples=20, seed=5))["train"]
    assert [s.layout for s in other] != [s.layout for s in a]


def test_underlay_strict_average(corpus):
    scores = [underlay_strict(s.layout, PKU_SCHEMA) for s in corpus]
    scores = [v for v in scores if v is not None]
    assert len(scores) > 50 and np.mean(scores) >= 0.9


def test_every_underlay_wraps_exactly_one_text(corpus):
    for s in corpus:
        texts = [e for e in s.layout.elements if e.category == TEXT]
        for u in (e for e in s.layout.elements if e.category == UNDERLAY):
            ux0, uy0, ux1, uy1 = u.corners()
            inside = []
            for t in texts:
                tx0, ty0, tx1, ty1 = t.corners()
                if ux0 <= tx0 and tx1 <= ux1 and uy0 <= ty0 and ty1 <= uy1:
                    inside.append(t)
            assert len(inside) == 1


def test_saliency_positive_and_counts_in_range(corpus):
    for s in corpus:
        assert s.saliency.values.sum() > 0
        assert 1 <= s.layout.T <= 10


def test_text_avoids_salient_regions(corpus):
    inside, overall = [], []
    for s in corpus:
        sal = s.saliency.values[..., 0]
        h, w = sal.shape
        overall.append(sal.mean())
        for e in s.layout.elements:
            if e.category == TEXT:
                x0, y0, x1, y1 = e.corners()
                r0, r1 = int(y0 * h), max(int(y0 * h) + 1, int(np.ceil(y1 * h)))
                c0, c1 = int(x0 * w), max(int(x0 * w) + 1, int(np.ceil(x1 * w)))
                inside.append(sal[r0:r1, c0:c1].mean())
    assert np.mean(inside) < 0.5 * np.mean(overall)


def test_templates_vary_with_composition():
    keys = [(side, n, off) for side in ("top", "bottom", "left", "right") for n in (1, 2, 3) for off in range(3)]
    templates = [template_for(k, (1, 10), 0.5, 0.5) for k in keys]
    assert len({(t.n_text, t.align, t.heights, t.widths) for t in templates}) > len(keys) // 2
    assert all(t.n_text >= 1 and len(t.heights) == len(t.widths) == t.n_text for t in templates)


def test_splits_disjoint():
    splits = generate_synthetic_dataset(SynthConfig(n_samples=30, seed=2, split_sizes=(20, 5, 5)))
    ids = [s.id for part in splits.values() for s in part]
    assert [len(v) for v in splits.values()] == [20, 5, 5] and len(set(ids)) == 30


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_samples=0), dict(elements=(0, 3)), dict(elements=(2, 11)), dict(underlay_prob=1.5), dict(n_samples=10, split_sizes=(5, 4))],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        SynthConfig(**kwargs)
