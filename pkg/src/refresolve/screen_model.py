"""Screens, OCR texts, entities, requests and samples.

All types are frozen dataclasses. Coordinates are pixels; normalisation is
left to :mod:`refresolve.features`.
"""
from __future__ import annotations

import enum
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Optional, Sequence

BBox = tuple[float, float, float, float]


class EmptyRequest(ValueError):
    """Raised when a request has no tokens."""


class EntityCategory(str, enum.Enum):
    PHONE_NUMBER = "phone_number"
    EMAIL_ADDRESS = "email_address"
    URL = "url"
    ADDRESS = "address"
    DATE_TIME = "date_time"


# canonical order; dummy entity ids in category-level samples follow it
CATEGORIES: tuple[EntityCategory, ...] = tuple(EntityCategory)

CATEGORY_NAMES: dict[EntityCategory, str] = {
    EntityCategory.PHONE_NUMBER: "phone number",
    EntityCategory.EMAIL_ADDRESS: "email address",
    EntityCategory.URL: "url",
    EntityCategory.ADDRESS: "address",
    EntityCategory.DATE_TIME: "date time",
}


class SupervisionTag(str, enum.Enum):
    CATEGORY_MODULE = "category_module"
    LOCATION_MODULE = "location_module"
    TEXT_MODULE = "text_module"


class Subset(str, enum.Enum):
    CATEGORY_LEVEL = "category_level"
    DESCRIPTIVE = "descriptive"


@dataclass(frozen=True)
class OcrText:
    id: int
    text: str
    bbox: BBox


@dataclass(frozen=True)
class Entity:
    id: int
    ocr_text_id: int
    text: str
    bbox: BBox
    category: EntityCategory


@dataclass(frozen=True)
class Screen:
    id: str
    width: int
    height: int
    ocr_texts: tuple[OcrText, ...] = ()
    entities: tuple[Entity, ...] = ()

    def text_by_id(self, text_id: int) -> OcrText:
        for t in self.ocr_texts:
            if t.id == text_id:
                return t
        raise KeyError(text_id)


@dataclass(frozen=True)
class Request:
    id: str
    raw: str
    tokens: tuple[str, ...]

    @classmethod
    def from_raw(cls, raw: str, id: str = "") -> "Request":
        return cls(id=id, raw=raw, tokens=tuple(tokenize(raw)))


@dataclass(frozen=True)
class Sample:
    request: Request
    candidates: tuple[Entity, ...]
    gold_ids: frozenset[int]
    subset: Subset
    screen: Optional[Screen] = None
    supervision_tag: Optional[SupervisionTag] = None
    # generation metadata: reference_type, reference, template
    meta: dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def candidate(self, entity_id: int) -> Entity:
        for e in self.candidates:
            if e.id == entity_id:
                return e
        raise KeyError(entity_id)


# ---------------------------------------------------------------------------
# tokenizer

# digit runs, letter runs; everything else separates
_TOKEN_RE = re.compile(r"[0-9]+|[^\W\d_]+")


def tokenize(raw: str) -> list[str]:
    """Lowercased word and digit-run tokens of ``raw``.

    Whitespace and punctuation split tokens, and so does a change between
    digits and letters ("5pm" -> ["5", "pm"]).
    """
    if not raw or not raw.strip():
        raise EmptyRequest("request is empty")
    tokens = [t.lower() for t in _TOKEN_RE.findall(raw)]
    if not tokens:
        raise EmptyRequest(f"request has no tokens: {raw!r}")
    return tokens


# ---------------------------------------------------------------------------
# geometry


def bbox_center(b: BBox) -> tuple[float, float]:
    x, y, w, h = b
    return x + w / 2.0, y + h / 2.0


def center_distance(a: BBox, b: BBox) -> float:
    """Euclidean distance between the centres of two boxes."""
    ax, ay = bbox_center(a)
    bx, by = bbox_center(b)
    return math.hypot(ax - bx, ay - by)


def reading_order_key(e: Entity) -> tuple[float, float, int]:
    return (e.bbox[1], e.bbox[0], e.id)


# ---------------------------------------------------------------------------
# validation


def _bbox_violations(kind: str, obj_id: int, b: BBox, width: int, height: int) -> list[str]:
    x, y, w, h = b
    out = []
    if not (w > 0 and h > 0):
        out.append(f"{kind} {obj_id}: non-positive size {b}")
    if x < 0 or y < 0 or x + w > width or y + h > height:
        out.append(f"{kind} {obj_id}: out-of-bounds bbox {b} on {width}x{height}")
    return out


def validate_screen(screen: Screen) -> list[str]:
    """Return every invariant violation on ``screen``; an empty list means ok."""
    problems: list[str] = []
    if screen.width <= 0 or screen.height <= 0:
        problems.append(f"screen {screen.id}: bad dimensions {screen.width}x{screen.height}")
    seen: set[int] = set()
    for t in screen.ocr_texts:
        if t.id in seen:
            problems.append(f"ocr_text {t.id}: duplicate id")
        seen.add(t.id)
        if not t.text.strip():
            problems.append(f"ocr_text {t.id}: empty text")
        problems += _bbox_violations("ocr_text", t.id, t.bbox, screen.width, screen.height)
    text_ids = seen
    seen = set()
    for e in screen.entities:
        if e.id in seen:
            problems.append(f"entity {e.id}: duplicate id")
        seen.add(e.id)
        if not e.text.strip():
            problems.append(f"entity {e.id}: empty text")
        problems += _bbox_violations("entity", e.id, e.bbox, screen.width, screen.height)
        if e.ocr_text_id not in text_ids:
            problems.append(f"entity {e.id}: unknown ocr_text_id {e.ocr_text_id}")
            continue
        src = screen.text_by_id(e.ocr_text_id)
        if e.text not in src.text:
            problems.append(f"entity {e.id}: text {e.text!r} not in source text")
        if not _contained(e.bbox, src.bbox):
            problems.append(f"entity {e.id}: bbox outside source text bbox")
    return problems


def _contained(inner: BBox, outer: BBox, tol: float = 1e-6) -> bool:
    ix, iy, iw, ih = inner
    ox, oy, ow, oh = outer
    return (ix >= ox - tol and iy >= oy - tol
            and ix + iw <= ox + ow + tol and iy + ih <= oy + oh + tol)


def validate_sample(sample: Sample) -> list[str]:
    problems: list[str] = []
    ids = [e.id for e in sample.candidates]
    if len(set(ids)) != len(ids):
        problems.append("duplicate candidate ids")
    if not sample.gold_ids:
        problems.append("empty gold set")
    if not set(sample.gold_ids) <= set(ids):
        problems.append("gold ids not among candidates")
    if not sample.request.tokens:
        problems.append("request has no tokens")
    elif list(sample.request.tokens) != tokenize(sample.request.raw):
        problems.append("request tokens do not match tokenizer output")
    if sample.subset is Subset.DESCRIPTIVE:
        if sample.screen is None:
            problems.append("descriptive sample without screen")
        else:
            problems += validate_screen(sample.screen)
        if len(sample.gold_ids) != 1:
            problems.append("descriptive sample must have exactly one gold id")
    else:
        if sample.screen is not None:
            problems.append("category-level sample must not carry a screen")
        if sorted(e.category for e in sample.candidates) != sorted(CATEGORIES) or len(ids) != 5:
            problems.append("category-level sample needs one dummy per category")
    return problems


# ---------------------------------------------------------------------------
# (de)serialisation, newline-delimited JSON


def _bbox_to_json(b: BBox) -> list[float]:
    return [float(v) for v in b]


def _bbox_from_json(v: Sequence[float]) -> BBox:
    if len(v) != 4:
        raise ValueError(f"bbox needs 4 values, got {v!r}")
    return (float(v[0]), float(v[1]), float(v[2]), float(v[3]))


def ocr_text_to_dict(t: OcrText) -> dict:
    return {"id": t.id, "text": t.text, "bbox": _bbox_to_json(t.bbox)}


def entity_to_dict(e: Entity) -> dict:
    return {"id": e.id, "ocr_text_id": e.ocr_text_id, "text": e.text,
            "bbox": _bbox_to_json(e.bbox), "category": e.category.value}


def screen_to_dict(s: Screen) -> dict:
    return {"id": s.id, "width": s.width, "height": s.height,
            "ocr_texts": [ocr_text_to_dict(t) for t in s.ocr_texts],
            "entities": [entity_to_dict(e) for e in s.entities]}


def request_to_dict(r: Request) -> dict:
    return {"id": r.id, "raw": r.raw, "tokens": list(r.tokens)}


def sample_to_dict(s: Sample) -> dict:
    return {
        "request": request_to_dict(s.request),
        "screen": screen_to_dict(s.screen) if s.screen is not None else None,
        "candidates": [entity_to_dict(e) for e in s.candidates],
        "gold_ids": sorted(s.gold_ids),
        "supervision_tag": s.supervision_tag.value if s.supervision_tag else None,
        "subset": s.subset.value,
        "meta": s.meta,
    }


def ocr_text_from_dict(d: dict) -> OcrText:
    return OcrText(id=int(d["id"]), text=str(d["text"]), bbox=_bbox_from_json(d["bbox"]))


def entity_from_dict(d: dict) -> Entity:
    return Entity(id=int(d["id"]), ocr_text_id=int(d["ocr_text_id"]), text=str(d["text"]),
                  bbox=_bbox_from_json(d["bbox"]), category=EntityCategory(d["category"]))


def screen_from_dict(d: dict) -> Screen:
    return Screen(id=str(d["id"]), width=int(d["width"]), height=int(d["height"]),
                  ocr_texts=tuple(ocr_text_from_dict(t) for t in d.get("ocr_texts", [])),
                  entities=tuple(entity_from_dict(e) for e in d.get("entities", [])))


def request_from_dict(d: dict) -> Request:
    raw = str(d["raw"])
    tokens = d.get("tokens")
    return Request(id=str(d.get("id", "")), raw=raw,
                   tokens=tuple(tokens) if tokens is not None else tuple(tokenize(raw)))


def sample_from_dict(d: dict) -> Sample:
    tag = d.get("supervision_tag")
    screen = d.get("screen")
    return Sample(
        request=request_from_dict(d["request"]),
        screen=screen_from_dict(screen) if screen is not None else None,
        candidates=tuple(entity_from_dict(e) for e in d["candidates"]),
        gold_ids=frozenset(int(i) for i in d.get("gold_ids", [])),
        supervision_tag=SupervisionTag(tag) if tag else None,
        subset=Subset(d["subset"]),
        meta=dict(d.get("meta") or {}),
    )


def dumps_line(obj: dict) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_ndjson(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_line(rec))
            fh.write("\n")


def read_ndjson(path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc


def load_samples(path) -> list[Sample]:
    return [sample_from_dict(d) for d in read_ndjson(path)]


def save_samples(path, samples: Iterable[Sample]) -> None:
    write_ndjson(path, (sample_to_dict(s) for s in samples))
