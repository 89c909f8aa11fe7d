"""Location and text-matching features for the resolver modules.

Vector layout per candidate (42 floats)::

    self_loc(5) | ctx_loc(5 x 5) | self_text(3) | nbr_text(3 x 3)

Location tuples are ``[x/K, y/K, (x+w)/K, (y+h)/K, w*h/K^2]`` with
``K = max(screen width, screen height)``. Text triples are
``(contained, word_overlap, digit_overlap)``.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .screen_model import BBox, Entity, Request, Sample, Screen, center_distance, tokenize

N_CONTEXT = 5
N_NEIGHBORS = 3
LOC_TUPLE = 5
TEXT_TRIPLE = 3
LOC_DIM = LOC_TUPLE * (1 + N_CONTEXT)
TEXT_DIM = TEXT_TRIPLE * (1 + N_NEIGHBORS)
FEATURE_LAYOUT = "self_loc(5),ctx_loc(25),self_text(3),nbr_text(9)"

_DATA = Path(__file__).parent / "data"


@lru_cache(maxsize=None)
def load_stopwords(path: Optional[str] = None) -> frozenset[str]:
    p = Path(path) if path else _DATA / "stopwords.txt"
    with open(p, encoding="utf-8") as fh:
        return frozenset(ln.strip().lower() for ln in fh if ln.strip())


def _safe_tokens(text: str) -> list[str]:
    return tokenize(text) if text and text.strip() else []


def content_words(text: str, stopwords: Iterable[str]) -> set[str]:
    stop = stopwords if isinstance(stopwords, (set, frozenset)) else set(stopwords)
    return {t for t in _safe_tokens(text) if t not in stop}


# ---------------------------------------------------------------------------
# text matching


def word_overlap(request_tokens: Iterable[str], text: str, stopwords: Optional[Iterable[str]] = None) -> float:
    """Share of the text's content words that occur in the request."""
    words = content_words(text, load_stopwords() if stopwords is None else stopwords)
    if not words:
        return 0.0
    req = set(request_tokens)
    return len(words & req) / len(words)


def digit_overlap(request_tokens: Iterable[str], text: str) -> float:
    """Share of the text's digit runs that occur as request tokens."""
    digits = {t for t in _safe_tokens(text) if t.isdigit()}
    if not digits:
        return 0.0
    req = set(request_tokens)
    return len(digits & req) / len(digits)


_SEP_RE = re.compile(r"[\W_]+")


def normalize_text(text: str) -> str:
    return _SEP_RE.sub(" ", text.lower()).strip()


def containment(request_raw: str, text: str) -> int:
    norm = normalize_text(text)
    if not norm:
        return 0
    return int(norm in normalize_text(request_raw))


def text_triple(request: Request, text: str, stopwords: Optional[frozenset[str]] = None) -> tuple[float, float, float]:
    return (float(containment(request.raw, text)),
            word_overlap(request.tokens, text, stopwords),
            digit_overlap(request.tokens, text))


# ---------------------------------------------------------------------------
# location


def normalized_box(bbox: BBox, k: float) -> list[float]:
    x, y, w, h = bbox
    return [x / k, y / k, (x + w) / k, (y + h) / k, (w * h) / (k * k)]


@dataclass(frozen=True)
class LocationFeatures:
    self_box: tuple[float, ...]
    context: tuple[float, ...]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.self_box + self.context, dtype=np.float64)


@dataclass(frozen=True)
class TextMatchFeatures:
    self_features: tuple[float, float, float]
    neighbor_features: tuple[float, ...]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.self_features + self.neighbor_features, dtype=np.float64)


def _is_dummy(entity: Entity) -> bool:
    return entity.bbox[2] <= 0 or entity.bbox[3] <= 0


def location_features(entity: Entity, screen: Optional[Screen], n_context: int = N_CONTEXT) -> LocationFeatures:
    zeros_ctx = (0.0,) * (LOC_TUPLE * n_context)
    if screen is None or _is_dummy(entity):
        return LocationFeatures((0.0,) * LOC_TUPLE, zeros_ctx)
    k = float(max(screen.width, screen.height))
    others = [e for e in screen.entities if e.category == entity.category and e.id != entity.id]
    others.sort(key=lambda e: (center_distance(entity.bbox, e.bbox), e.id))
    ctx: list[float] = []
    for e in others[:n_context]:
        ctx += normalized_box(e.bbox, k)
    ctx += [0.0] * (LOC_TUPLE * n_context - len(ctx))
    return LocationFeatures(tuple(normalized_box(entity.bbox, k)), tuple(ctx))


def neighbor_texts(entity: Entity, screen: Screen, n_neighbors: int = N_NEIGHBORS):
    """Nearest OCR texts to ``entity`` by centre distance, nearest first.

    The entity's own OCR line is skipped when it holds nothing but the
    entity text; a longer line (an inline label) stays a neighbour.
    """
    pool = [t for t in screen.ocr_texts
            if not (t.id == entity.ocr_text_id and t.text.strip() == entity.text.strip())]
    pool.sort(key=lambda t: (center_distance(entity.bbox, t.bbox), t.id))
    return pool[:n_neighbors]


def text_match_features(request: Request, entity: Entity, screen: Optional[Screen],
                        n_neighbors: int = N_NEIGHBORS) -> TextMatchFeatures:
    stop = load_stopwords()
    own = text_triple(request, entity.text, stop)
    nbr: list[float] = []
    if screen is not None and not _is_dummy(entity):
        for t in neighbor_texts(entity, screen, n_neighbors):
            nbr += text_triple(request, t.text, stop)
    nbr += [0.0] * (TEXT_TRIPLE * n_neighbors - len(nbr))
    return TextMatchFeatures(own, tuple(nbr))


def candidate_features(sample: Sample) -> tuple[np.ndarray, np.ndarray]:
    """(location [n, 30], text [n, 12]) arrays aligned with ``sample.candidates``."""
    loc = np.stack([location_features(e, sample.screen).as_array() for e in sample.candidates])
    txt = np.stack([text_match_features(sample.request, e, sample.screen).as_array()
                    for e in sample.candidates])
    return loc, txt


def feature_vector(sample: Sample, entity: Entity) -> list[float]:
    return (location_features(entity, sample.screen).as_array().tolist()
            + text_match_features(sample.request, entity, sample.screen).as_array().tolist())
