import numpy as np
import pytest

from ralf.core import Element, Layout
from ralf.generator import (
    DecodeState,
    GeneratorConfig,
    LayoutGenerator,
    build_memory,
    generate_batch,
    grammar_mask,
    restrict_logits,
)
from ralf.generator.decoding import sample_tokens
from ralf.numerics import EmptyDecodingSpace
from ralf.tasks import ConstraintSpec, Relationship, TaskKind, build_spec, check_satisfaction, refinement_window
from ralf.tokenizer import EOS, Vocabulary, check_grammar, layout_bins, quantize

from conftest import random_layout

LOGO, TEXT, UNDERLAY = 1, 2, 3


@pytest.fixture(scope="module")
def model():
    cfg = GeneratorConfig.toy(retrieval="off")
    m = LayoutGenerator(cfg, np.random.default_rng(0))
    m.eval()
    return m


def _images(n, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(n, 80, 56, 4), dtype=np.uint8)


def _generate(model, specs, seed=0):
    mem, valid = build_memory(model, _images(len(specs), seed), None, specs)
    return generate_batch(model, mem, valid, specs, np.random.default_rng(seed))


def _truths(n, seed, t_min=1, t_max=6):
    rng = np.random.default_rng(seed)
    return [random_layout(rng, t_min, t_max) for _ in range(n)]


# -- grammar --------------------------------------------------------------------

def test_grammar_mask_slot_classes():
    V = Vocabulary(3, 128)
    first = grammar_mask(1, V, 10)
    assert first[EOS] and first[V.cat_slice()].all() and not first[V.geo_slice()].any()
    geo = grammar_mask(2, V, 10)
    assert geo[V.geo_slice()].all() and not geo[EOS] and not geo[V.cat_slice()].any()
    last = grammar_mask(51, V, 10)
    assert last[EOS] and last.sum() == 1


def test_unconstrained_generations_are_grammatical(model):
    specs = [ConstraintSpec(TaskKind.UNCONSTRAINED)] * 1000
    mem, valid = build_memory(model, _images(1000), None, specs)
    tokens, failures = sample_tokens(model, mem, valid, specs, np.random.default_rng(1))
    assert failures == [None] * 1000
    for seq in tokens:
        check_grammar(seq, model.cfg.vocab)
        assert (len(seq) - 2) % 5 == 0


def test_fixed_seed_identical(model):
    specs = [ConstraintSpec(TaskKind.UNCONSTRAINED)] * 8
    assert _generate(model, specs, 3) == _generate(model, specs, 3)
    assert _generate(model, specs, 3) != _generate(model, specs, 4)


# -- task restriction ------------------------------------------------------------

def test_c2sp_text_logo_forced(model):
    spec = ConstraintSpec(TaskKind.C_TO_SP, categories=(TEXT, LOGO))
    out = _generate(model, [spec] * 200)
    assert all(list(layout.categories) == [TEXT, LOGO] for layout in out)


def test_c2sp_matches_random_specs(model):
    specs = [build_spec("c2sp", gt) for gt in _truths(200, 0)]
    out = _generate(model, specs)
    assert all(check_satisfaction(layout, spec).rate == 1.0 for layout, spec in zip(out, specs))


def test_cs2p_categories_and_sizes(model):
    specs = [build_spec("cs2p", gt) for gt in _truths(200, 1)]
    out = _generate(model, specs)
    for layout, spec in zip(out, specs):
        assert list(layout.categories) == list(spec.categories)
        want = quantize(np.array(spec.sizes), 128)
        np.testing.assert_array_equal(layout_bins(layout, 128)[:, 2:], want)


def test_completion_prefix_reproduced(model):
    gt = Layout((Element(TEXT, (0.5, 0.2, 0.6, 0.1)), Element(LOGO, (0.2, 0.9, 0.2, 0.08))))
    spec = ConstraintSpec(TaskKind.COMPLETION, partial=gt)
    specs = [spec] * 50 + [build_spec("completion", t, np.random.default_rng(i)) for i, t in enumerate(_truths(150, 2, 2, 8))]
    out = _generate(model, specs)
    for layout, s in zip(out, specs):
        n = s.partial.T
        assert list(layout.categories[:n]) == list(s.partial.categories)
        np.testing.assert_array_equal(layout_bins(layout, 128)[:n], layout_bins(s.partial, 128))


def test_refinement_within_window(model):
    rng = np.random.default_rng(3)
    specs = [build_spec("refinement", gt, rng) for gt in _truths(200, 3)]
    out = _generate(model, specs)
    delta = refinement_window(128)
    assert delta == 7
    for layout, spec in zip(out, specs):
        assert list(layout.categories) == list(spec.noisy.categories)
        assert np.abs(layout_bins(layout, 128) - layout_bins(spec.noisy, 128)).max() <= delta


def test_relationship_above_always_holds(model):
    spec = ConstraintSpec(TaskKind.RELATIONSHIP, categories=(TEXT, LOGO), relations=(Relationship(0, 1, pos_rel="above"),))
    out = _generate(model, [spec] * 200)
    for layout in out:
        a, b = layout.elements
        assert a.cy + a.h / 2 <= b.cy - b.h / 2 + 1e-9
        assert check_satisfaction(layout, spec).satisfied


def test_relationship_specs_from_ground_truth(model):
    rng = np.random.default_rng(4)
    specs = [build_spec("relationship", gt, rng, fraction=0.3) for gt in _truths(200, 4, 2, 6)]
    out = _generate(model, specs)
    assert all(check_satisfaction(layout, spec).rate == 1.0 for layout, spec in zip(out, specs))


def test_contradiction_raises_named_error(model):
    spec = ConstraintSpec(
        TaskKind.RELATIONSHIP,
        categories=(TEXT, TEXT),
        relations=(Relationship(0, 1, pos_rel="above"), Relationship(0, 1, pos_rel="below")),
    )
    with pytest.raises(EmptyDecodingSpace, match=r"step \d+: no token satisfies relationship"):
        _generate(model, [spec])


def test_restrict_logits_masks_to_minus_inf():
    V = Vocabulary(3, 128)
    state = DecodeState(ConstraintSpec(TaskKind.C_TO_SP, categories=(LOGO,)), V, 10)
    out = restrict_logits(state, np.zeros(V.size))
    assert np.isfinite(out).sum() == 1 and np.isfinite(out[V.cat_token(LOGO)])
