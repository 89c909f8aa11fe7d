"""Rule-cascade baseline and the two evaluation oracles.

The rules run in order: keyword category filter, positional/ordinal
pick, label match against on-screen text, uniform fallback.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

from .features import load_stopwords, word_overlap, content_words
from .screen_model import (
    CATEGORIES,
    Entity,
    EntityCategory,
    Request,
    Sample,
    Screen,
    Subset,
    center_distance,
    reading_order_key,
)

_DATA = Path(__file__).parent / "data"


class NoCandidates(ValueError):
    pass


class OutOfRange(IndexError):
    pass


class Unsupported(ValueError):
    pass


@dataclass(frozen=True)
class KeywordLexicon:
    nouns: dict[EntityCategory, frozenset[str]]
    verbs: dict[EntityCategory, frozenset[str]]
    apps: dict[EntityCategory, frozenset[str]]
    priority: tuple[EntityCategory, ...] = CATEGORIES

    def __post_init__(self):
        for c in CATEGORIES:
            if not self.nouns.get(c) or not self.verbs.get(c):
                raise ValueError(f"lexicon needs at least one noun and one verb for {c.value}")

    @classmethod
    def from_dict(cls, raw: dict) -> "KeywordLexicon":
        cats = raw["categories"]

        def part(key):
            return {EntityCategory(c): frozenset(w.lower() for w in v.get(key, [])) for c, v in cats.items()}

        priority = tuple(EntityCategory(c) for c in raw.get("priority", [c.value for c in CATEGORIES]))
        return cls(nouns=part("nouns"), verbs=part("verbs"), apps=part("apps"), priority=priority)

    @classmethod
    def from_file(cls, path) -> "KeywordLexicon":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@lru_cache(maxsize=1)
def default_lexicon() -> KeywordLexicon:
    return KeywordLexicon.from_file(_DATA / "lexicon.json")


# ---------------------------------------------------------------------------
# rule 1


def match_category_keywords(request: Request, lexicon: Optional[KeywordLexicon] = None) -> list[EntityCategory]:
    """Categories hinted at by the request: noun hits, then verbs, then apps."""
    lexicon = lexicon or default_lexicon()
    tokens = set(request.tokens)
    out: list[EntityCategory] = []
    for table in (lexicon.nouns, lexicon.verbs, lexicon.apps):
        for c in lexicon.priority:
            if c not in out and tokens & table.get(c, frozenset()):
                out.append(c)
    return out


# ---------------------------------------------------------------------------
# rule 2


@dataclass(frozen=True)
class PositionalSpec:
    kind: str  # "ordinal", "top", "bottom", "middle", "last"
    k: int = 0

    def __post_init__(self):
        if self.kind not in ("ordinal", "top", "bottom", "middle", "last"):
            raise ValueError(f"unknown positional kind {self.kind!r}")
        if self.kind == "ordinal" and self.k < 1:
            raise ValueError("ordinal position must be >= 1")


ORDINAL_WORDS = {
    "first": 1, "second": 2, "third": 3, "fourth": 4, "fifth": 5,
    "sixth": 6, "seventh": 7, "eighth": 8, "ninth": 9, "tenth": 10,
}
_ORDINAL_SUFFIXES = {"st", "nd", "rd", "th"}
_POSITION_WORDS = {"top", "bottom", "middle", "last"}


def parse_positional(request: Request) -> Optional[PositionalSpec]:
    toks = request.tokens
    for i, tok in enumerate(toks):
        if tok in ORDINAL_WORDS:
            return PositionalSpec("ordinal", ORDINAL_WORDS[tok])
        if tok in _POSITION_WORDS:
            return PositionalSpec(tok)
        if tok.isdigit() and i + 1 < len(toks) and toks[i + 1] in _ORDINAL_SUFFIXES:
            k = int(tok)
            if 1 <= k <= 10:
                return PositionalSpec("ordinal", k)
    return None


def apply_positional(spec: PositionalSpec, candidates: Sequence[Entity]) -> Entity:
    if not candidates:
        raise NoCandidates("no candidates to position")
    ordered = sorted(candidates, key=reading_order_key)
    if spec.kind == "ordinal":
        if spec.k > len(ordered):
            raise OutOfRange(f"position {spec.k} of {len(ordered)}")
        return ordered[spec.k - 1]
    if spec.kind == "top":
        return ordered[0]
    if spec.kind in ("bottom", "last"):
        return ordered[-1]
    return ordered[len(ordered) // 2]


# ---------------------------------------------------------------------------
# rule 3


def _best_text(request: Request, texts, stop) -> Optional[object]:
    best = None
    best_key = None
    for t in texts:
        ratio = word_overlap(request.tokens, t.text, stop)
        if ratio <= 0:
            continue
        count = len(content_words(t.text, stop) & set(request.tokens))
        key = (-ratio, -count, t.id)
        if best_key is None or key < best_key:
            best, best_key = t, key
    return best


def label_match(request: Request, screen: Optional[Screen], candidates: Sequence[Entity]) -> Optional[Entity]:
    """Candidate nearest to the screen text that best overlaps the request."""
    if screen is None or not candidates:
        return None
    stop = load_stopwords()
    cand_texts = {e.text.strip() for e in candidates}
    others = [t for t in screen.ocr_texts if t.text.strip() not in cand_texts]
    anchor = _best_text(request, others, stop)
    if anchor is not None:
        return min(candidates, key=lambda e: (center_distance(e.bbox, anchor.bbox), e.id))
    # no label overlaps: let the candidates' own texts compete
    best = None
    best_key = None
    for e in candidates:
        ratio = word_overlap(request.tokens, e.text, stop)
        if ratio <= 0:
            continue
        count = len(content_words(e.text, stop) & set(request.tokens))
        key = (-ratio, -count, e.id)
        if best_key is None or key < best_key:
            best, best_key = e, key
    return best


# ---------------------------------------------------------------------------
# cascade


def heuristic_trace(request: Request, sample: Sample,
                    lexicon: Optional[KeywordLexicon] = None) -> tuple[list[float], str]:
    """Scores aligned with ``sample.candidates`` plus the name of the rule that fired."""
    candidates = sample.candidates
    if not candidates:
        raise NoCandidates("sample has no candidates")
    cats = match_category_keywords(request, lexicon)
    filtered = [e for e in candidates if e.category in cats] if cats else list(candidates)
    if not filtered:
        filtered = list(candidates)

    def one_hot(chosen: Entity) -> list[float]:
        return [1.0 if e.id == chosen.id else 0.0 for e in candidates]

    spec = parse_positional(request)
    if spec is not None:
        try:
            return one_hot(apply_positional(spec, filtered)), "location"
        except OutOfRange:
            pass
    hit = label_match(request, sample.screen, filtered)
    if hit is not None:
        return one_hot(hit), "label"
    keep = {e.id for e in filtered}
    share = 1.0 / len(filtered)
    return [share if e.id in keep else 0.0 for e in candidates], "uniform"


def resolve_heuristic(request: Request, sample: Sample, lexicon: Optional[KeywordLexicon] = None) -> list[float]:
    return heuristic_trace(request, sample, lexicon)[0]


# ---------------------------------------------------------------------------
# oracles (evaluation only)


def category_oracle(sample: Sample) -> list[float]:
    gold_cats = {e.category for e in sample.candidates if e.id in sample.gold_ids}
    return [1.0 if e.category in gold_cats else 0.0 for e in sample.candidates]


_POSITIONAL_TYPES = {"ordinal"}


def no_text_oracle(sample: Sample) -> list[float]:
    """Knows simple and ordinal references, but not text values."""
    if sample.subset is Subset.CATEGORY_LEVEL:
        return [1.0 if e.id in sample.gold_ids else 0.0 for e in sample.candidates]
    ref_type = sample.meta.get("reference_type")
    if ref_type is None:
        raise Unsupported("no_text_oracle needs the sample's reference_type metadata")
    if ref_type in _POSITIONAL_TYPES:
        return [1.0 if e.id in sample.gold_ids else 0.0 for e in sample.candidates]
    return category_oracle(sample)
