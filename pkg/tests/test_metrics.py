import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ralf.core import PKU_SCHEMA, Canvas, Element, Layout, SaliencyMap
from ralf.metrics import (
    MetricReport,
    alignment,
    average_trials,
    density_coverage,
    fid,
    occlusion,
    overlay,
    readability,
    underlay_loose,
    underlay_strict,
)

from conftest import layouts, random_layout

LOGO, TEXT, UNDERLAY = 1, 2, 3


def L(*items):
    return Layout(tuple(Element(c, tuple(b)) for c, b in items))


def moment_matched(n, mean, std, seed=0):
    z = np.random.default_rng(seed).standard_normal(n)
    z = (z - z.mean()) / z.std(ddof=1)
    return (mean + std * z)[:, None]


def slow_density_coverage(real, gen, k):
    n, m = len(real), len(gen)
    radii = []
    for i in range(n):
        d = sorted(math.dist(real[i], real[j]) for j in range(n) if j != i)
        radii.append(d[k - 1])
    hits = 0
    covered = [False] * n
    for j in range(m):
        for i in range(n):
            if math.dist(gen[j], real[i]) <= radii[i]:
                hits += 1
                covered[i] = True
    return hits / (k * m), sum(covered) / n


# -- FID -------------------------------------------------------------------------

def test_fid_identical_sets_zero():
    x = np.random.default_rng(0).standard_normal((200, 6))
    assert fid(x, x) == pytest.approx(0.0, abs=1e-8)


def test_fid_closed_form_unit_shift():
    a, b = moment_matched(500, 0.0, 1.0), moment_matched(500, 1.0, 1.0, seed=1)
    assert fid(a, b) == pytest.approx(1.0, abs=1e-6)


def test_fid_closed_form_scale():
    a, b = moment_matched(500, 0.0, 1.0), moment_matched(500, 0.5, 3.0, seed=1)
    assert fid(a, b) == pytest.approx(0.25 + 4.0, abs=1e-5)


def test_fid_symmetric_and_rotation_invariant():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((300, 5))
    y = rng.standard_normal((300, 5)) * 1.3 + 0.4
    q, _ = np.linalg.qr(rng.standard_normal((5, 5)))
    assert fid(x, y) == pytest.approx(fid(y, x), abs=1e-9)
    assert fid(x @ q, y @ q) == pytest.approx(fid(x, y), abs=1e-6)


def test_fid_small_sample_stays_finite():
    rng = np.random.default_rng(3)
    value = fid(rng.standard_normal((4, 16)), rng.standard_normal((4, 16)))
    assert np.isfinite(value) and value >= 0.0


def test_fid_rejects_non_finite():
    x = np.ones((5, 2))
    x[0, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        fid(x, np.ones((5, 2)))


# -- density / coverage ------------------------------------------------------------

def test_coverage_identical_sets():
    x = np.random.default_rng(0).standard_normal((30, 3))
    assert density_coverage(x, x, 1)[1] == 1.0


def test_far_generations_score_zero():
    x = np.random.default_rng(1).standard_normal((30, 3))
    assert density_coverage(x, x + 100.0, 5) == (0.0, 0.0)


@pytest.mark.parametrize("seed", range(20))
def test_density_coverage_matches_quadratic_scan(seed):
    rng = np.random.default_rng(seed)
    real, gen = rng.standard_normal((10, 2)), rng.standard_normal((10, 2)) * 1.5
    k = int(rng.integers(1, 5))
    den, cov = density_coverage(real, gen, k)
    slow_den, slow_cov = slow_density_coverage(real.tolist(), gen.tolist(), k)
    assert den == pytest.approx(slow_den, abs=1e-12)
    assert cov == pytest.approx(slow_cov, abs=1e-12)


def test_density_coverage_k_bound():
    x = np.zeros((5, 2))
    with pytest.raises(ValueError):
        density_coverage(x, x, 5)


# -- underlay ------------------------------------------------------------------

def test_underlay_strict_cases():
    full = L((UNDERLAY, (0.5, 0.5, 0.4, 0.4)), (TEXT, (0.5, 0.5, 0.2, 0.2)))
    partial = L((UNDERLAY, (0.5, 0.5, 0.4, 0.4)), (TEXT, (0.7, 0.5, 0.2, 0.2)))
    mixed = L((UNDERLAY, (0.5, 0.5, 0.4, 0.4)), (TEXT, (0.5, 0.5, 0.2, 0.2)), (UNDERLAY, (0.1, 0.9, 0.1, 0.1)))
    assert underlay_strict(full, PKU_SCHEMA) == 1.0
    assert underlay_strict(partial, PKU_SCHEMA) == 0.0
    assert underlay_strict(mixed, PKU_SCHEMA) == 0.5
    assert underlay_strict(L((TEXT, (0.5, 0.5, 0.2, 0.2))), PKU_SCHEMA) is None


def test_underlay_loose_cases():
    full = L((UNDERLAY, (0.5, 0.5, 0.4, 0.4)), (TEXT, (0.5, 0.5, 0.2, 0.2)))
    # the underlay's right edge at 0.7 cuts the text box [0.6, 0.8] in half
    half = L((UNDERLAY, (0.5, 0.5, 0.4, 0.4)), (TEXT, (0.7, 0.5, 0.2, 0.2)))
    none = L((UNDERLAY, (0.2, 0.2, 0.1, 0.1)), (TEXT, (0.7, 0.7, 0.2, 0.2)))
    assert underlay_loose(full, PKU_SCHEMA) == pytest.approx(1.0)
    assert underlay_loose(half, PKU_SCHEMA) == pytest.approx(0.5)
    assert underlay_loose(none, PKU_SCHEMA) == 0.0
    assert underlay_loose(L(), PKU_SCHEMA) is None


def test_full_containment_scores_one_both_ways():
    rng = np.random.default_rng(0)
    for _ in range(100):
        inner = rng.uniform(0.05, 0.2, 2)
        c = rng.uniform(0.3, 0.7, 2)
        scale = rng.uniform(1.0, 1.4)
        layout = L((UNDERLAY, (*c, *(inner * scale))), (TEXT, (*c, *inner)))
        assert underlay_strict(layout, PKU_SCHEMA) == 1.0
        assert underlay_loose(layout, PKU_SCHEMA) == pytest.approx(1.0)


# -- overlay / alignment ---------------------------------------------------------

def test_overlay_cases():
    box = (0.5, 0.5, 0.2, 0.2)
    assert overlay(L((TEXT, box), (TEXT, box)), PKU_SCHEMA) == pytest.approx(1.0)
    assert overlay(L((TEXT, (0.2, 0.2, 0.1, 0.1)), (LOGO, (0.8, 0.8, 0.1, 0.1))), PKU_SCHEMA) == 0.0
    assert overlay(L((TEXT, (0.5, 0.5, 0.2, 0.2)), (TEXT, (0.6, 0.5, 0.2, 0.2))), PKU_SCHEMA) == pytest.approx(1 / 3)
    # underlays are ignored
    assert overlay(L((TEXT, box), (UNDERLAY, box)), PKU_SCHEMA) == 0.0


@settings(max_examples=100)
@given(layouts(), st.randoms(use_true_random=False))
def test_overlay_and_occlusion_order_invariant(layout, rnd):
    perm = list(layout.elements)
    rnd.shuffle(perm)
    shuffled = Layout(tuple(perm))
    assert overlay(shuffled, PKU_SCHEMA) == pytest.approx(overlay(layout, PKU_SCHEMA), abs=1e-12)
    sal = SaliencyMap(np.random.default_rng(0).random((20, 14, 1)))
    assert occlusion(shuffled, sal) == occlusion(layout, sal)


def test_alignment_shared_left_edge():
    layout = L((TEXT, (0.25, 0.25, 0.25, 0.125)), (TEXT, (0.375, 0.75, 0.5, 0.125)))
    assert alignment(layout) == 0.0


def test_alignment_hand_case():
    layout = L((TEXT, (0.3, 0.3, 0.2, 0.2)), (TEXT, (0.4, 0.7, 0.2, 0.2)))
    assert alignment(layout) == pytest.approx(-math.log(0.9), abs=1e-12)
    assert alignment(layout) == pytest.approx(0.10536, abs=1e-5)


def test_alignment_increases_off_lines():
    base = [(TEXT, (0.3, 0.3, 0.2, 0.2)), (TEXT, (0.3, 0.7, 0.2, 0.2))]
    scores = [alignment(L(base[0], (TEXT, (0.3 + dx, 0.7, 0.2, 0.2)))) for dx in (0.0, 0.01, 0.03, 0.05)]
    assert scores[0] == 0.0
    assert all(a < b for a, b in zip(scores, scores[1:]))


def test_alignment_single_element_zero():
    assert alignment(L((TEXT, (0.5, 0.5, 0.2, 0.2)))) == 0.0


# -- occlusion / readability -------------------------------------------------------

def test_occlusion_uniform_and_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        layout = random_layout(rng, 1, 10)
        assert occlusion(layout, SaliencyMap(np.full((30, 20, 1), 0.7))) == pytest.approx(0.7)
        assert occlusion(layout, SaliencyMap(np.zeros((30, 20, 1)))) == 0.0
    assert occlusion(L(), SaliencyMap(np.ones((4, 4, 1)))) == 0.0


def test_occlusion_half_salient():
    s = np.zeros((10, 10, 1))
    s[:, :5] = 1.0
    # columns 3..6 of every row: two salient, two not
    assert occlusion(L((TEXT, (0.5, 0.5, 0.4, 1.0))), SaliencyMap(s)) == pytest.approx(0.5)


def test_occlusion_counts_union_once():
    s = np.zeros((10, 10, 1))
    s[:, :5] = 1.0
    twice = L((TEXT, (0.5, 0.5, 0.4, 1.0)), (LOGO, (0.4, 0.5, 0.2, 1.0)))
    assert occlusion(twice, SaliencyMap(s)) == pytest.approx(0.5)


def test_readability_constant_canvas():
    canvas = Canvas(np.full((20, 10, 3), 0.3))
    assert readability(L((TEXT, (0.5, 0.5, 0.6, 0.6))), canvas, PKU_SCHEMA) == 0.0
    assert readability(L((LOGO, (0.5, 0.5, 0.6, 0.6))), canvas, PKU_SCHEMA) is None


def test_readability_vertical_step_edge():
    px = np.zeros((10, 10, 3))
    px[:, 5:] = 0.8
    canvas = Canvas(px)
    # box covers rows and columns 2..7; the forward difference fires on column 4
    box_pixels, edge_pixels, magnitude = 36, 6, 0.8
    expected = magnitude * edge_pixels / (2 * box_pixels)
    layout = L((TEXT, (0.5, 0.5, 0.6, 0.6)))
    assert readability(layout, canvas, PKU_SCHEMA) == pytest.approx(expected, abs=1e-12)
    noisy = L((TEXT, (0.5, 0.5, 0.6, 0.6)), (LOGO, (0.2, 0.2, 0.3, 0.3)), (UNDERLAY, (0.5, 0.5, 0.7, 0.7)))
    assert readability(noisy, canvas, PKU_SCHEMA) == pytest.approx(expected, abs=1e-12)


# -- report --------------------------------------------------------------------------

def test_average_trials_skips_undefined():
    trials = [{"fid": 1.0, "und_s": None}, {"fid": 3.0, "und_s": 0.5}]
    rep = average_trials(trials, n_real=10, n_gen=10)
    assert rep.fid == 2.0 and rep.und_s == 0.5 and rep.ove is None
    assert "fid" in rep.table() and MetricReport(**{k: v for k, v in rep.to_json().items()}).fid == 2.0
