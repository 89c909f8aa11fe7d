"""Pattern-based data detectors.

Turns OCR lines into categorised entities. Phone numbers, e-mail
addresses, URLs and dates/times come from regular expressions; street
addresses come from a number + street name + suffix pattern or a city
gazetteer hit. Overlapping matches are resolved once, in the fixed order
URL > e-mail > phone > date/time > address.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .screen_model import BBox, Entity, EntityCategory, OcrText

DATA_DIR = Path(__file__).parent / "data"

PRECEDENCE: tuple[EntityCategory, ...] = (
    EntityCategory.URL,
    EntityCategory.EMAIL_ADDRESS,
    EntityCategory.PHONE_NUMBER,
    EntityCategory.DATE_TIME,
    EntityCategory.ADDRESS,
)


class ConfigError(ValueError):
    pass


def _read_list(path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]


def _packaged_list(name: str) -> list[str]:
    return _read_list(DATA_DIR / "gazetteer" / name)


@dataclass(frozen=True)
class DetectorConfig:
    street_suffixes: tuple[str, ...] = field(default_factory=lambda: tuple(_packaged_list("street_suffixes.txt")))
    cities: tuple[str, ...] = field(default_factory=lambda: tuple(_packaged_list("cities.txt")))
    states: tuple[str, ...] = field(default_factory=lambda: tuple(_packaged_list("states.txt")))
    enabled_categories: frozenset[EntityCategory] = frozenset(EntityCategory)

    def __post_init__(self):
        if EntityCategory.ADDRESS in self.enabled_categories:
            if not (self.street_suffixes and self.cities and self.states):
                raise ConfigError("address detection needs non-empty gazetteer lists")

    @classmethod
    def from_file(cls, path) -> "DetectorConfig":
        """Load from JSON.

        Gazetteer entries are either inline lists or paths to word lists
        (one term per line), relative to the config file.
        """
        path = Path(path)
        raw = json.loads(path.read_text(encoding="utf-8"))
        kwargs = {}
        for key in ("street_suffixes", "cities", "states"):
            if key not in raw:
                continue
            val = raw[key]
            if isinstance(val, str):
                val = _read_list(path.parent / val)
            kwargs[key] = tuple(val)
        if "enabled_categories" in raw:
            kwargs["enabled_categories"] = frozenset(EntityCategory(c) for c in raw["enabled_categories"])
        return cls(**kwargs)


# ---------------------------------------------------------------------------
# patterns

_TLDS = r"(?:com|org|net|edu|gov|io|co|us|info|app|biz)"

_URL_RE = re.compile(
    r"(?<![\w@.\-])(?:"
    r"https?://[^\s]+"
    r"|www\.[a-z0-9\-]+(?:\.[a-z0-9\-]+)+(?:/[^\s]*)?"
    r"|[a-z0-9][a-z0-9\-]*(?:\.[a-z0-9\-]+)*\." + _TLDS + r"(?:/[^\s]*)?"
    r")(?![\w@])",
    re.IGNORECASE,
)

_EMAIL_RE = re.compile(r"(?<![\w.+\-])[a-z0-9._%+\-]+@[a-z0-9.\-]+\.[a-z]{2,}(?![\w])", re.IGNORECASE)

_PHONE_RES = (
    # NANP, optional country code 1
    re.compile(r"(?<![\w+])(?:\+?1[\s.\-])?(?:\(\d{3}\)\s?|\d{3}[\s.\-])\d{3}[\s.\-]\d{4}(?![\w])"),
    # international with leading +
    re.compile(r"(?<![\w+])\+\d{1,3}(?:[\s\-]\d{2,10}){1,4}(?![\w])"),
    # local seven-digit
    re.compile(r"(?<![\w+.\-/])\d{3}-\d{4}(?![\w\-/])"),
)

_MONTHS = (r"(?:Jan(?:uary)?|Feb(?:ruary)?|Mar(?:ch)?|Apr(?:il)?|May|June?|July?|Aug(?:ust)?"
           r"|Sep(?:t(?:ember)?)?|Oct(?:ober)?|Nov(?:ember)?|Dec(?:ember)?)")
_DATE_ATOMS = (
    re.compile(r"(?<![\w/])\d{1,2}/\d{1,2}(?:/\d{2,4})?(?![\w/])"),
    re.compile(r"(?<![\w\-])\d{4}-\d{2}-\d{2}(?![\w\-])"),
    re.compile(r"(?<![\w:])\d{1,2}(?::\d{2})?\s?(?:[ap]\.m\.|[ap]m\b)", re.IGNORECASE),
    re.compile(r"(?<![\w:])\d{1,2}:\d{2}(?![\w:])"),
    re.compile(r"\b" + _MONTHS + r"\b\.?(?:\s+\d{1,2}(?:st|nd|rd|th)?\b)(?:,?\s+\d{4}\b)?"),
    re.compile(r"\b(?:January|February|March|April|June|July|August|September|October|November|December)\b"),
    re.compile(r"\b(?:monday|tuesday|wednesday|thursday|friday|saturday|sunday|today|tomorrow|tonight)\b",
               re.IGNORECASE),
)
# text allowed between two date/time atoms that belong to the same span
_DATE_GLUE = re.compile(r"^[\s,@\-]*(?:(?:at|from|to|on|by)\b)?[\s,@\-]*$", re.IGNORECASE)

_TRAILING_PUNCT = ".,;:!?)\"'"


def _alternation(words: Iterable[str]) -> str:
    # longest first so "Palo Alto" beats a hypothetical "Palo"
    return "|".join(re.escape(w) for w in sorted(set(words), key=lambda s: (-len(s), s)))


class _AddressPatterns:
    def __init__(self, config: DetectorConfig):
        suffix = _alternation(config.street_suffixes)
        city = _alternation(config.cities)
        state = _alternation(config.states)
        tail = (r"(?:,?\s+(?:" + city + r")\b)?"
                r"(?:,?\s+(?:" + state + r")\b)?"
                r"(?:\s+\d{5}\b)?")
        self.street = re.compile(
            r"(?<![\w\-])\d{1,5}\s+(?:(?:\d+(?:st|nd|rd|th)|[A-Z][A-Za-z]*)\s+){1,3}(?:" + suffix + r")\b\.?" + tail)
        self.city = re.compile(r"\b(?:" + city + r")\b(?:,?\s+(?:" + state + r")\b)?(?:\s+\d{5}\b)?")


_ADDRESS_CACHE: dict[int, tuple[DetectorConfig, _AddressPatterns]] = {}


def _address_patterns(config: DetectorConfig) -> _AddressPatterns:
    key = id(config)
    hit = _ADDRESS_CACHE.get(key)
    if hit is None or hit[0] is not config:
        hit = (config, _AddressPatterns(config))
        _ADDRESS_CACHE[key] = hit
    return hit[1]


def _strip_span(text: str, start: int, end: int) -> tuple[int, int]:
    while end > start and text[end - 1] in _TRAILING_PUNCT:
        end -= 1
    while start < end and text[start].isspace():
        start += 1
    return start, end


def _date_spans(text: str) -> list[tuple[int, int]]:
    atoms: list[tuple[int, int]] = []
    for rx in _DATE_ATOMS:
        atoms += [(m.start(), m.end()) for m in rx.finditer(text)]
    if not atoms:
        return []
    atoms.sort(key=lambda s: (s[0], -s[1]))
    merged: list[list[int]] = []
    for s, e in atoms:
        if merged and s <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], e)
        elif merged and _DATE_GLUE.match(text[merged[-1][1]:s]):
            merged[-1][1] = e
        else:
            merged.append([s, e])
    return [(s, e) for s, e in merged]


def _category_spans(text: str, category: EntityCategory, config: DetectorConfig) -> list[tuple[int, int]]:
    if category is EntityCategory.URL:
        return [(m.start(), m.end()) for m in _URL_RE.finditer(text)]
    if category is EntityCategory.EMAIL_ADDRESS:
        return [(m.start(), m.end()) for m in _EMAIL_RE.finditer(text)]
    if category is EntityCategory.PHONE_NUMBER:
        spans = []
        for rx in _PHONE_RES:
            for m in rx.finditer(text):
                if sum(c.isdigit() for c in m.group()) >= 7:
                    spans.append((m.start(), m.end()))
        return spans
    if category is EntityCategory.DATE_TIME:
        return _date_spans(text)
    pats = _address_patterns(config)
    return ([(m.start(), m.end()) for m in pats.street.finditer(text)]
            + [(m.start(), m.end()) for m in pats.city.finditer(text)])


def detect_spans(text: str, config: DetectorConfig) -> list[tuple[int, int, EntityCategory]]:
    """Non-overlapping (start, end, category) spans in ``text``, by start offset."""
    taken: list[tuple[int, int, EntityCategory]] = []
    for category in PRECEDENCE:
        if category not in config.enabled_categories:
            continue
        # longer matches first within a category
        for s, e in sorted(_category_spans(text, category, config), key=lambda se: (se[0], -se[1])):
            s, e = _strip_span(text, s, e)
            if e <= s:
                continue
            if any(s < te and ts < e for ts, te, _ in taken):
                continue
            taken.append((s, e, category))
    return sorted(taken)


def sub_bbox(bbox: BBox, n_chars: int, start: int, end: int) -> BBox:
    """Horizontal slice of a line box proportional to character offsets."""
    x, y, w, h = bbox
    if n_chars <= 0:
        return bbox
    return (x + w * start / n_chars, y, w * (end - start) / n_chars, h)


def detect_entities(ocr_texts: Sequence[OcrText], config: Optional[DetectorConfig] = None,
                    start_id: int = 0) -> list[Entity]:
    config = config or default_config()
    entities: list[Entity] = []
    next_id = start_id
    for t in ocr_texts:
        for s, e, category in detect_spans(t.text, config):
            entities.append(Entity(
                id=next_id,
                ocr_text_id=t.id,
                text=t.text[s:e],
                bbox=sub_bbox(t.bbox, len(t.text), s, e),
                category=category,
            ))
            next_id += 1
    return entities


def detect_category(text: str, config: Optional[DetectorConfig] = None) -> Optional[EntityCategory]:
    """Category of the first span detected in ``text``, if any."""
    spans = detect_spans(text, config or default_config())
    return spans[0][2] if spans else None


_DEFAULT: Optional[DetectorConfig] = None


def default_config() -> DetectorConfig:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = DetectorConfig()
    return _DEFAULT
