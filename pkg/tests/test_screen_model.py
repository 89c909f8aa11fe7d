import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refresolve.screen_model import (
    EmptyRequest,
    Entity,
    EntityCategory,
    OcrText,
    Request,
    Screen,
    center_distance,
    load_samples,
    sample_from_dict,
    sample_to_dict,
    save_samples,
    tokenize,
    validate_sample,
    validate_screen,
)


def test_tokenize_label_request():
    assert tokenize("Call the Apple Business Manager number") == [
        "call", "the", "apple", "business", "manager", "number"]


def test_tokenize_digit_runs():
    assert tokenize("call 1-866-902-7144") == ["call", "1", "866", "902", "7144"]


@pytest.mark.parametrize("raw", ["", "   ", "\t\n", "-- !!"])
def test_tokenize_empty(raw):
    with pytest.raises(EmptyRequest):
        tokenize(raw)


def test_placeholder_kept_as_one_token():
    assert tokenize("send it to PERSON") == ["send", "it", "to", "person"]


@given(st.text(min_size=1, max_size=60))
def test_tokenize_idempotent_on_joined_output(raw):
    try:
        toks = tokenize(raw)
    except EmptyRequest:
        return
    assert tokenize(" ".join(toks)) == toks
    assert all(t == t.lower() and t for t in toks)


def _screen(texts=(), entities=(), w=800, h=600):
    return Screen(id="s", width=w, height=h, ocr_texts=tuple(texts), entities=tuple(entities))


def test_validate_screen_ok():
    s = _screen([OcrText(0, "hello", (10, 10, 100, 20))])
    assert validate_screen(s) == []


def test_validate_screen_out_of_bounds_entity():
    t = OcrText(0, "555-0100", (700, 10, 100, 20))
    e = Entity(0, 0, "555-0100", (790, 10, 100, 20), EntityCategory.PHONE_NUMBER)
    problems = validate_screen(_screen([t], [e]))
    assert any("out-of-bounds" in p for p in problems)


def test_validate_screen_duplicate_entity_id():
    t = OcrText(0, "555-0100 555-0199", (10, 10, 300, 20))
    a = Entity(3, 0, "555-0100", (10, 10, 140, 20), EntityCategory.PHONE_NUMBER)
    b = Entity(3, 0, "555-0199", (160, 10, 140, 20), EntityCategory.PHONE_NUMBER)
    problems = validate_screen(_screen([t], [a, b]))
    assert any("duplicate id" in p for p in problems)


def test_validate_screen_empty_text():
    problems = validate_screen(_screen([OcrText(0, "  ", (10, 10, 100, 20))]))
    assert any("empty text" in p for p in problems)


def test_center_distance_examples():
    assert center_distance((1, 2, 3, 4), (1, 2, 3, 4)) == 0.0
    assert center_distance((0, 0, 2, 2), (3, 0, 2, 2)) == 3.0
    assert center_distance((0, 0, 2, 2), (3, 4, 2, 2)) == 5.0


_box = st.tuples(*(st.floats(0, 1000, allow_nan=False) for _ in range(2)),
                 *(st.floats(0.1, 500, allow_nan=False) for _ in range(2)))


@given(_box, _box, _box)
def test_center_distance_metric(a, b, c):
    assert center_distance(a, b) == center_distance(b, a)
    assert center_distance(a, b) >= 0
    assert center_distance(a, c) <= center_distance(a, b) + center_distance(b, c) + 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6))
def test_corpus_samples_round_trip_and_validate(small_corpus, idx):
    samples = small_corpus.all_samples()
    s = samples[idx % len(samples)]
    back = sample_from_dict(sample_to_dict(s))
    assert back == s and back.meta == s.meta
    assert validate_sample(back) == []


def test_ndjson_file_round_trip(tmp_path, small_corpus):
    path = tmp_path / "s.ndjson"
    samples = small_corpus.splits["val"]
    save_samples(path, samples)
    assert load_samples(path) == samples


def test_request_from_raw_matches_tokenizer():
    r = Request.from_raw("Open the third LINK", id="r1")
    assert r.tokens == ("open", "the", "third", "link")
