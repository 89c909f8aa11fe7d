import json

import pytest

from refresolve.detectors import ConfigError, DetectorConfig, default_config, detect_category, detect_entities, detect_spans
from refresolve.screen_model import EntityCategory as C, OcrText, entity_to_dict


def _one(text):
    return detect_entities([OcrText(0, text, (0, 0, 10 * len(text), 40))])


def test_international_phone():
    ents = _one("+91 9998888")
    assert [(e.text, e.category) for e in ents] == [("+91 9998888", C.PHONE_NUMBER)]


def test_email_is_not_also_a_url():
    ents = _one("support@example.com")
    assert [(e.text, e.category) for e in ents] == [("support@example.com", C.EMAIL_ADDRESS)]


def test_url_and_phone_in_one_line():
    ents = _one("Visit https://example.com or call 1-866-902-7144")
    assert [(e.text, e.category) for e in ents] == [
        ("https://example.com", C.URL), ("1-866-902-7144", C.PHONE_NUMBER)]


@pytest.mark.parametrize("text,cat", [
    ("1-866-902-7144", C.PHONE_NUMBER),
    ("tomorrow at 5pm", C.DATE_TIME),
    ("hello world", None),
    ("www.citylibrary.org/hours", C.URL),
    ("1200 Harbor Blvd, Portland, OR 97201", C.ADDRESS),
    ("Monday, March 3 at 9:30 am", C.DATE_TIME),
])
def test_detect_category(text, cat):
    assert detect_category(text) is cat


def test_date_span_merges_glue_words():
    spans = detect_spans("Friday at 7pm", default_config())
    assert spans == [(0, 13, C.DATE_TIME)]


def test_sub_bbox_is_proportional_slice():
    t = OcrText(0, "Call 555-0100 now", (100, 50, 170, 40))
    (e,) = detect_entities([t])
    assert e.text == "555-0100"
    x, y, w, h = e.bbox
    assert (y, h) == (50, 40)
    assert x == pytest.approx(100 + 170 * 5 / 17)
    assert w == pytest.approx(170 * 8 / 17)


def test_spans_never_overlap(small_corpus):
    cfg = default_config()
    for s in small_corpus.all_samples():
        if s.screen is None:
            continue
        for t in s.screen.ocr_texts:
            spans = detect_spans(t.text, cfg)
            for (a0, a1, _), (b0, b1, _) in zip(spans, spans[1:]):
                assert a1 <= b0


def test_recall_on_generated_screens(small_corpus):
    # every planted entity comes back with its category
    for s in small_corpus.all_samples():
        if s.screen is None:
            continue
        again = detect_entities(s.screen.ocr_texts)
        assert [entity_to_dict(e) for e in again] == [entity_to_dict(e) for e in s.screen.entities]


def test_deterministic():
    texts = [OcrText(i, t, (0, 40 * i, 400, 40)) for i, t in enumerate(
        ["Email hr@acme.com", "Call (415) 555-0134", "12 Oak St, Springfield"])]
    a = [entity_to_dict(e) for e in detect_entities(texts)]
    b = [entity_to_dict(e) for e in detect_entities(texts)]
    assert json.dumps(a) == json.dumps(b)


def test_config_from_file_with_list_paths(tmp_path):
    (tmp_path / "sfx.txt").write_text("Street\nSt\n")
    (tmp_path / "cfg.json").write_text(json.dumps(
        {"street_suffixes": "sfx.txt", "cities": ["Gotham"], "states": ["NY"]}))
    cfg = DetectorConfig.from_file(tmp_path / "cfg.json")
    assert cfg.street_suffixes == ("Street", "St")
    assert detect_category("44 Elm Street, Gotham", cfg) is C.ADDRESS


def test_empty_gazetteer_rejected():
    with pytest.raises(ConfigError):
        DetectorConfig(street_suffixes=(), cities=("X",), states=("Y",))


def test_disabled_category_not_detected():
    cfg = DetectorConfig(enabled_categories=frozenset({C.EMAIL_ADDRESS}))
    assert detect_category("call 1-866-902-7144", cfg) is None
