import pytest

from oracles.heuristic_oracle import oracle_scores
from refresolve.corpus import dummy_entities
from refresolve.heuristic import (
    NoCandidates,
    OutOfRange,
    PositionalSpec,
    Unsupported,
    apply_positional,
    category_oracle,
    heuristic_trace,
    label_match,
    match_category_keywords,
    no_text_oracle,
    parse_positional,
    resolve_heuristic,
)
from refresolve.screen_model import Entity, EntityCategory as C, OcrText, Request, Sample, Screen, Subset

R = Request.from_raw


def _cat_sample(raw, gold):
    return Sample(R(raw), dummy_entities(), frozenset(gold), Subset.CATEGORY_LEVEL)


@pytest.mark.parametrize("raw,expected", [
    ("call the top phone number", [C.PHONE_NUMBER]),
    ("navigate there with maps", [C.ADDRESS]),
    ("share this", []),
    ("email the second link to PERSON", [C.EMAIL_ADDRESS, C.URL]),
])
def test_match_category_keywords(raw, expected):
    assert match_category_keywords(R(raw)) == expected


@pytest.mark.parametrize("raw,spec", [
    ("send the third email address", PositionalSpec("ordinal", 3)),
    ("send the middle number to tim", PositionalSpec("middle")),
    ("call this", None),
    ("open the 2nd link", PositionalSpec("ordinal", 2)),
    ("the last one, not the first", PositionalSpec("last")),
])
def test_parse_positional(raw, spec):
    assert parse_positional(R(raw)) == spec


def _phones(ys, xs=None):
    xs = xs or [10] * len(ys)
    return [Entity(i, i, f"555-01{i:02d}", (x, y, 100, 20), C.PHONE_NUMBER) for i, (x, y) in enumerate(zip(xs, ys))]


def test_apply_positional():
    ents = _phones([500, 100, 300])
    assert apply_positional(PositionalSpec("middle"), ents).bbox[1] == 300
    assert apply_positional(PositionalSpec("ordinal", 1), ents).bbox[1] == 100
    assert apply_positional(PositionalSpec("bottom"), ents).bbox[1] == 500
    with pytest.raises(OutOfRange):
        apply_positional(PositionalSpec("ordinal", 4), ents)
    with pytest.raises(NoCandidates):
        apply_positional(PositionalSpec("top"), [])


def test_reading_order_breaks_row_ties_by_x():
    ents = _phones([100, 100], xs=[600, 20])
    assert apply_positional(PositionalSpec("ordinal", 1), ents).id == 1


def test_middle_of_even_list():
    ents = _phones([100, 200, 300, 400])
    assert apply_positional(PositionalSpec("middle"), ents).bbox[1] == 300


def _label_screen():
    texts = (OcrText(0, "Apple Business Manager", (40, 100, 400, 40)),
             OcrText(1, "1-800-275-2273", (40, 150, 300, 40)),
             OcrText(2, "Apple Support", (40, 400, 300, 40)),
             OcrText(3, "1-800-692-7753", (40, 450, 300, 40)))
    ents = (Entity(0, 1, texts[1].text, texts[1].bbox, C.PHONE_NUMBER),
            Entity(1, 3, texts[3].text, texts[3].bbox, C.PHONE_NUMBER))
    return Screen("s", 1080, 2340, texts, ents)


def test_label_match_picks_entity_near_best_label():
    s = _label_screen()
    hit = label_match(R("call the apple business manager number"), s, s.entities)
    assert hit.id == 0


def test_label_match_none_without_overlap():
    s = _label_screen()
    assert label_match(R("call this"), s, s.entities) is None


def test_label_match_tie_goes_to_lower_text_id():
    texts = (OcrText(0, "Sales", (40, 100, 200, 40)), OcrText(1, "555-0101", (40, 150, 200, 40)),
             OcrText(2, "Sales", (40, 800, 200, 40)), OcrText(3, "555-0102", (40, 850, 200, 40)))
    ents = (Entity(0, 1, "555-0101", texts[1].bbox, C.PHONE_NUMBER),
            Entity(1, 3, "555-0102", texts[3].bbox, C.PHONE_NUMBER))
    s = Screen("s", 1080, 2340, texts, ents)
    assert label_match(R("call sales"), s, s.entities).id == 0


def test_resolve_category_level_examples():
    s = _cat_sample("call this number", {0})
    assert resolve_heuristic(s.request, s) == [1.0, 0.0, 0.0, 0.0, 0.0]
    s = _cat_sample("share this", {0})
    assert resolve_heuristic(s.request, s) == [0.2] * 5


def test_resolve_third_number_ignores_email():
    texts = tuple(OcrText(i, t, (40, 100 + 100 * i, 300, 40)) for i, t in enumerate(
        ["555-0101", "hr@acme.com", "555-0102", "555-0103"]))
    cats = [C.PHONE_NUMBER, C.EMAIL_ADDRESS, C.PHONE_NUMBER, C.PHONE_NUMBER]
    ents = tuple(Entity(i, i, t.text, t.bbox, c) for i, (t, c) in enumerate(zip(texts, cats)))
    s = Screen("s", 1080, 2340, texts, ents)
    sample = Sample(R("send the third number"), ents, frozenset({3}), Subset.DESCRIPTIVE, screen=s)
    scores, rule = heuristic_trace(sample.request, sample)
    assert scores == [0.0, 0.0, 0.0, 1.0] and rule == "location"


def test_no_candidates():
    s = Sample(R("call this"), (), frozenset({0}), Subset.CATEGORY_LEVEL)
    with pytest.raises(NoCandidates):
        resolve_heuristic(s.request, s)


def test_scores_shape_invariant(default_corpus):
    for s in default_corpus.all_samples()[::7]:
        scores, rule = heuristic_trace(s.request, s)
        if rule == "uniform":
            assert sum(scores) == pytest.approx(1.0)
        else:
            assert sorted(scores)[-1] == 1.0 and sum(scores) == 1.0


def test_agrees_with_independent_oracle(default_corpus):
    samples = default_corpus.all_samples()
    for s in samples[::5]:
        assert resolve_heuristic(s.request, s) == pytest.approx(oracle_scores(s))


def test_oracles_on_category_level():
    s = _cat_sample("take me there", {2, 3})
    assert category_oracle(s) == [0, 0, 1, 1, 0]
    assert no_text_oracle(s) == [0, 0, 1, 1, 0]


def test_category_oracle_never_exact_on_descriptive(default_corpus):
    for s in default_corpus.all_samples():
        if s.subset is Subset.DESCRIPTIVE:
            assert sum(category_oracle(s)) >= 2


def test_no_text_oracle_needs_reference_type(default_corpus):
    s = next(x for x in default_corpus.all_samples() if x.subset is Subset.DESCRIPTIVE)
    bare = Sample(s.request, s.candidates, s.gold_ids, s.subset, screen=s.screen)
    with pytest.raises(Unsupported):
        no_text_oracle(bare)


def test_no_text_oracle_solves_ordinals(default_corpus):
    for s in default_corpus.all_samples():
        if s.meta.get("reference_type") == "ordinal":
            scores = no_text_oracle(s)
            assert {e.id for e, p in zip(s.candidates, scores) if p == 1.0} == set(s.gold_ids)
