"""Deterministic synthetic corpus of category-level and descriptive samples.

Category-level samples pair a generic request ("call this number") with a
pool of five dummy entities, one per category. Descriptive samples are
built on generated screens that hold at least two entities of the target
category, each next to a unique label, so every request refers to exactly
one entity by construction.

Everything is driven by one ``random.Random`` stream seeded from the
config, so a config fully determines the corpus.
"""
from __future__ import annotations

import hashlib
import json
import random
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional, Sequence

from .detectors import DetectorConfig, default_config, detect_entities
from .features import load_stopwords
from .heuristic import ORDINAL_WORDS
from .screen_model import (
    CATEGORIES,
    Entity,
    EntityCategory,
    OcrText,
    Request,
    Sample,
    Screen,
    Subset,
    SupervisionTag,
    reading_order_key,
    sample_to_dict,
    tokenize,
    write_ndjson,
)

_DATA = Path(__file__).parent / "data"

DUMMY_TEXTS = {
    EntityCategory.PHONE_NUMBER: "555-0100",
    EntityCategory.EMAIL_ADDRESS: "user@example.com",
    EntityCategory.URL: "https://example.com",
    EntityCategory.ADDRESS: "1 Main St Springfield",
    EntityCategory.DATE_TIME: "tomorrow 5pm",
}

REFERENCE_TYPES = ("label", "full_text", "ordinal", "partial_value")
_TAG_FOR_REFERENCE = {
    "label": SupervisionTag.TEXT_MODULE,
    "full_text": SupervisionTag.TEXT_MODULE,
    "partial_value": SupervisionTag.TEXT_MODULE,
    "ordinal": SupervisionTag.LOCATION_MODULE,
    "simple": SupervisionTag.CATEGORY_MODULE,
}
_QUESTION_WORDS = {"how", "what", "do", "did", "am", "is"}
_ORDINAL_BY_INDEX = {v - 1: k for k, v in ORDINAL_WORDS.items()}


class LayoutOverflow(ValueError):
    pass


class ConfigError(ValueError):
    pass


class ExhaustedTemplates(RuntimeError):
    pass


class GenerationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class LayoutSpec:
    width: int = 1080
    height: int = 2340
    rows: int = 9
    cols: int = 2
    margin: int = 40
    char_width: float = 18.0
    line_height: float = 44.0
    inline_fraction: float = 0.3
    other_entities: tuple[int, int] = (0, 3)
    distractors: tuple[int, int] = (5, 10)


@dataclass
class GeneratorConfig:
    seed: int = 0
    n_category_samples: int = 4600
    n_descriptive_screens: int = 378
    requests_per_screen: int = 3
    multilabel_fraction: float = 0.22
    supervision_counts: dict[str, int] = field(default_factory=lambda: {
        SupervisionTag.CATEGORY_MODULE.value: 500,
        SupervisionTag.LOCATION_MODULE.value: 500,
        SupervisionTag.TEXT_MODULE.value: 500,
    })
    reference_mix: dict[str, float] = field(default_factory=lambda: {
        "label": 0.45, "full_text": 0.25, "ordinal": 0.20, "partial_value": 0.10,
    })
    same_category_weights: dict[int, float] = field(default_factory=lambda: {2: 0.4, 3: 0.3, 4: 0.2, 5: 0.1})
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    layout: LayoutSpec = field(default_factory=LayoutSpec)
    templates_path: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.multilabel_fraction <= 1.0:
            raise ConfigError("multilabel_fraction must lie in [0, 1]")
        if self.requests_per_screen < 1:
            raise ConfigError("requests_per_screen must be >= 1")
        if set(self.reference_mix) - set(REFERENCE_TYPES):
            raise ConfigError(f"unknown reference types in mix: {sorted(set(self.reference_mix) - set(REFERENCE_TYPES))}")
        self.same_category_weights = {int(k): float(v) for k, v in self.same_category_weights.items()}
        if min(self.same_category_weights) < 2:
            raise ConfigError("descriptive screens need at least two entities of the target category")
        if isinstance(self.layout, dict):
            self.layout = LayoutSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.layout.items()})

    @classmethod
    def from_dict(cls, raw: dict) -> "GeneratorConfig":
        raw = dict(raw)
        if "split_ratios" in raw:
            raw["split_ratios"] = tuple(raw["split_ratios"])
        return cls(**raw)

    @classmethod
    def from_file(cls, path) -> "GeneratorConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CorpusStats:
    total_requests: int
    unique_requests: int
    multilabel_count: int
    tokens_per_request: float
    tokens_per_reference: float
    screen_count: int


# ---------------------------------------------------------------------------
# template banks


class TemplateBanks:
    """Request templates, label/distractor pools and value vocabularies."""

    def __init__(self, raw: dict):
        self.raw = raw
        cl = raw["category_level"]
        self.cat_prefixes: list[str] = cl["prefixes"]
        self.cat_suffixes: list[str] = cl["suffixes"]
        self.single = {EntityCategory(k): v for k, v in cl["single"].items()}
        self.multilabel = [dict(g, gold=[EntityCategory(c) for c in g["gold"]]) for g in cl["multilabel"]]
        d = raw["descriptive"]
        self.desc_prefixes: list[str] = d["prefixes"]
        self.desc_suffixes: list[str] = d["suffixes"]
        self.desc = {EntityCategory(k): v for k, v in d["categories"].items()}
        self.forms = d["reference_forms"]
        self.labels = {EntityCategory(k): v for k, v in raw["labels"].items()}
        self.distractors: list[str] = raw["distractors"]
        self.values: dict[str, list[str]] = raw["values"]
        for c in CATEGORIES:
            for table, what in ((self.single, "category-level"), (self.desc, "descriptive"), (self.labels, "label")):
                entry = table.get(c)
                if not entry:
                    raise ConfigError(f"{what} template bank empty for {c.value}")
            if not self.single[c].get("refs") or not self.single[c].get("cores"):
                raise ConfigError(f"category-level bank incomplete for {c.value}")
            if not self.desc[c].get("actions") or not self.desc[c].get("nouns"):
                raise ConfigError(f"descriptive bank incomplete for {c.value}")
        for kind in ("label", "ordinal", "partial", "partial_phone"):
            if not self.forms.get(kind):
                raise ConfigError(f"no reference forms for {kind}")

    @classmethod
    def from_file(cls, path) -> "TemplateBanks":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))


@lru_cache(maxsize=4)
def load_banks(path: Optional[str] = None) -> TemplateBanks:
    return TemplateBanks.from_file(path or _DATA / "templates.json")


# ---------------------------------------------------------------------------
# value grammars


def _phone(rng: random.Random) -> str:
    a, b, c = rng.randint(201, 989), rng.randint(200, 999), rng.randint(0, 9999)
    fmt = rng.choice(["({a}) {b}-{c}", "{a}-{b}-{c}", "1-{a}-{b}-{c}", "+1 {a} {b} {c}", "{a}.{b}.{c}", "intl"])
    if fmt == "intl":
        return f"+{rng.choice([44, 49, 61, 91, 33])} {rng.randint(1000000, 99999999)}"
    return fmt.format(a=a, b=b, c=f"{c:04d}")


def _email(rng: random.Random, v: dict) -> str:
    company = rng.choice(v["companies"])
    tld = rng.choice(v["tlds"])
    kind = rng.random()
    if kind < 0.4:
        local = f"{rng.choice(v['first_names'])}.{rng.choice(v['last_names'])}"
    elif kind < 0.75:
        local = rng.choice(v["departments"])
    else:
        local = rng.choice(v["first_names"])
    return f"{local}@{company}.{tld}"


def _url(rng: random.Random, v: dict) -> str:
    company = rng.choice(v["companies"])
    tld = rng.choice(v["tlds"])
    path = rng.choice(v["url_paths"])
    base = rng.choice([f"www.{company}.{tld}", f"https://{company}.{tld}", f"{company}.{tld}",
                       f"https://www.{company}.{tld}"])
    return f"{base}/{path}" if path else base


def _address(rng: random.Random, v: dict, gaz: DetectorConfig) -> str:
    street = f"{rng.randint(1, 9899)} {rng.choice(v['streets'])} {rng.choice(gaz.street_suffixes[:16])}"
    r = rng.random()
    if r < 0.35:
        return street
    city = rng.choice(gaz.cities)
    if r < 0.6:
        return f"{street}, {city}"
    state = rng.choice(gaz.states)
    if r < 0.85:
        return f"{street}, {city}, {state}"
    return f"{street}, {city}, {state} {rng.randint(10000, 99999)}"


def _date(rng: random.Random, v: dict) -> str:
    wd = rng.choice(v["weekdays"])
    mo = rng.choice(v["months"])
    d = rng.randint(1, 28)
    h = rng.randint(1, 12)
    mm = rng.choice(["00", "15", "30", "45"])
    ap = rng.choice(["AM", "PM"])
    kind = rng.randrange(6)
    if kind == 0:
        return f"{wd}, {mo} {d} at {h}:{mm} {ap}"
    if kind == 1:
        return f"{mo} {d}, {rng.randint(2024, 2027)}"
    if kind == 2:
        return f"{rng.randint(1, 12):02d}/{d:02d}/{rng.randint(2024, 2027)}"
    if kind == 3:
        return f"{wd} {h}{ap.lower()}"
    if kind == 4:
        return f"{mo} {d} from {h}pm to {min(h + rng.randint(1, 3), 12)}pm"
    return f"{mo} {d} at {h} {ap}"


def generate_value(rng: random.Random, category: EntityCategory, banks: TemplateBanks,
                   gaz: Optional[DetectorConfig] = None) -> str:
    v = banks.values
    if category is EntityCategory.PHONE_NUMBER:
        return _phone(rng)
    if category is EntityCategory.EMAIL_ADDRESS:
        return _email(rng, v)
    if category is EntityCategory.URL:
        return _url(rng, v)
    if category is EntityCategory.ADDRESS:
        return _address(rng, v, gaz or default_config())
    return _date(rng, v)


# ---------------------------------------------------------------------------
# screens


@dataclass(frozen=True)
class GeneratedScreen:
    """A screen plus the label planted next to each entity."""

    screen: Screen
    labels: dict[int, str]


def _label_words(label: str) -> set[str]:
    return set(tokenize(label)) - load_stopwords()


def _pick_labels(rng: random.Random, categories: Sequence[EntityCategory], banks: TemplateBanks) -> list[str]:
    chosen: list[str] = []
    used: set[str] = set()
    for c in categories:
        pool = [lab for lab in banks.labels[c] if not (_label_words(lab) & used)]
        if not pool:
            raise LayoutOverflow(f"label pool for {c.value} exhausted")
        lab = rng.choice(pool)
        chosen.append(lab)
        used |= _label_words(lab)
    return chosen


def _unique_values(rng: random.Random, categories: Sequence[EntityCategory], banks: TemplateBanks,
                   gaz: DetectorConfig) -> list[str]:
    values: list[str] = []
    tails: set[str] = set()
    for c in categories:
        for _ in range(200):
            val = generate_value(rng, c, banks, gaz)
            tail = tokenize(val)[-1] if c is EntityCategory.PHONE_NUMBER else None
            if val in values or (tail is not None and tail in tails):
                continue
            values.append(val)
            if tail is not None:
                tails.add(tail)
            break
        else:
            raise GenerationError(f"could not draw a unique {c.value} value")
    return values


def generate_screen(rng: random.Random, layout: LayoutSpec, target_category: EntityCategory,
                    n_same_category: int, banks: Optional[TemplateBanks] = None,
                    screen_id: str = "screen", detector_config: Optional[DetectorConfig] = None,
                    max_attempts: int = 20) -> GeneratedScreen:
    """Lay out a screen with ``n_same_category`` entities of ``target_category``."""
    if n_same_category < 2:
        raise ValueError("a descriptive screen needs at least two entities of the target category")
    banks = banks or load_banks()
    gaz = detector_config or default_config()
    n_cells = layout.rows * layout.cols
    if n_same_category > n_cells:
        raise LayoutOverflow(f"{n_same_category} entities do not fit in {n_cells} cells")
    for _ in range(max_attempts):
        got = _try_screen(rng, layout, target_category, n_same_category, banks, screen_id, gaz)
        if got is not None:
            return got
    raise GenerationError(f"detectors disagreed with the planted entities on {screen_id}")


def _try_screen(rng, layout, target, n_same, banks, screen_id, gaz) -> Optional[GeneratedScreen]:
    n_cells = layout.rows * layout.cols
    others = [c for c in CATEGORIES if c is not target]
    n_other = min(rng.randint(*layout.other_entities), n_cells - n_same)
    cats = [target] * n_same + [rng.choice(others) for _ in range(n_other)]
    n_distract = min(rng.randint(*layout.distractors), n_cells - len(cats))
    labels = _pick_labels(rng, cats, banks)
    values = _unique_values(rng, cats, banks, gaz)
    cells = rng.sample(range(n_cells), len(cats) + n_distract)
    distractors = rng.sample(banks.distractors, n_distract)

    cell_w = (layout.width - 2 * layout.margin) / layout.cols
    cell_h = (layout.height - 2 * layout.margin) / layout.rows
    max_w = cell_w - 40

    def line(text: str, cell: int, y_off: float) -> tuple[str, tuple[float, float, float, float]]:
        r, c = divmod(cell, layout.cols)
        x = layout.margin + c * cell_w + 20
        y = layout.margin + r * cell_h + y_off
        w = min(len(text) * layout.char_width, max_w)
        return text, (x, y, w, layout.line_height)

    lines: list[tuple[str, tuple]] = []
    planted: list[tuple[int, str, EntityCategory, str]] = []  # line index, value, category, label
    value_y = 30 + layout.line_height + 16
    for cat, label, value, cell in zip(cats, labels, values, cells):
        if rng.random() < layout.inline_fraction:
            lines.append(line(f"{label}: {value}", cell, value_y))
        else:
            lines.append(line(label, cell, 30))
            lines.append(line(value, cell, value_y))
        planted.append((len(lines) - 1, value, cat, label))
    for text, cell in zip(distractors, cells[len(cats):]):
        lines.append(line(text, cell, 30 + rng.choice([0, 20, 40])))

    order = sorted(range(len(lines)), key=lambda i: (lines[i][1][1], lines[i][1][0], i))
    new_id = {old: new for new, old in enumerate(order)}
    texts = tuple(OcrText(id=new_id[i], text=lines[i][0], bbox=lines[i][1]) for i in order)
    entities = detect_entities(texts, gaz)

    want = sorted((new_id[li], value, cat) for li, value, cat, _ in planted)
    got = sorted((e.ocr_text_id, e.text, e.category) for e in entities)
    if want != got:
        return None
    label_of_line = {new_id[li]: label for li, _, _, label in planted}
    screen = Screen(id=screen_id, width=layout.width, height=layout.height, ocr_texts=texts,
                    entities=tuple(entities))
    return GeneratedScreen(screen=screen, labels={e.id: label_of_line[e.ocr_text_id] for e in entities})


# ---------------------------------------------------------------------------
# descriptive requests


def _join(*parts: str) -> str:
    return " ".join(p for p in (s.strip() for s in parts) if p)


_PIECE_SKIP = {"www", "com", "org", "net", "io", "co", "https", "http", "am", "pm", "at", "from", "to"}


def _partial_piece(rng: random.Random, target: Entity, peers: Sequence[Entity]) -> Optional[str]:
    """A token of the target's text that no other same-category entity shares."""
    other_tokens: set[str] = set()
    for e in peers:
        if e.id != target.id:
            other_tokens |= set(tokenize(e.text))
    toks = tokenize(target.text)
    if target.category is EntityCategory.PHONE_NUMBER:
        tail = toks[-1]
        return tail if tail not in other_tokens and len(tail) >= 3 else None
    stop = load_stopwords()
    pool = [t for t in dict.fromkeys(toks)
            if t not in other_tokens and t not in stop and t not in _PIECE_SKIP
            and (t.isalpha() and len(t) >= 3)]
    return rng.choice(pool) if pool else None


def _ordinal_refs(index: int, n: int) -> tuple[list[str], list[str]]:
    ords = [_ORDINAL_BY_INDEX[index]] if index in _ORDINAL_BY_INDEX else []
    pos = []
    if index == 0:
        pos.append("top")
    if index == n - 1:
        pos += ["bottom", "last"]
    if n % 2 == 1 and n >= 3 and index == n // 2:
        pos.append("middle")
    return ords, pos


def _feasible(ref_type: str, rng: random.Random, target: Entity, peers: Sequence[Entity]) -> bool:
    if ref_type == "partial_value":
        return _partial_piece(random.Random(0), target, peers) is not None
    return True


def generate_descriptive_sample(rng: random.Random, gscreen: GeneratedScreen, target: Entity,
                                banks: Optional[TemplateBanks] = None, ref_type: Optional[str] = None,
                                reference_mix: Optional[dict[str, float]] = None,
                                request_id: str = "") -> Sample:
    """A uniquely referring request for ``target`` on ``gscreen``."""
    banks = banks or load_banks()
    screen = gscreen.screen
    cat = target.category
    bank = banks.desc.get(cat)
    if not bank or not bank.get("actions"):
        raise ConfigError(f"descriptive template bank empty for {cat.value}")
    peers = sorted((e for e in screen.entities if e.category is cat), key=reading_order_key)
    if len(peers) < 2 or target not in peers:
        raise ValueError("target must share its category with at least one other entity on screen")
    mix = reference_mix or GeneratorConfig().reference_mix
    if ref_type is None:
        kinds = [k for k in REFERENCE_TYPES if mix.get(k, 0) > 0 and _feasible(k, rng, target, peers)]
        ref_type = rng.choices(kinds, weights=[mix[k] for k in kinds])[0]

    action, specific = rng.choice(bank["actions"])
    noun = rng.choice(bank["nouns"])

    def pick_form(kind: str) -> str:
        forms = [f for f, needs_noun in banks.forms[kind] if specific or needs_noun]
        return rng.choice(forms)

    extra: dict[str, Any] = {}
    if ref_type == "label":
        label = gscreen.labels[target.id].lower()
        ref = pick_form("label").format(label=label, noun=noun)
        extra["label"] = gscreen.labels[target.id]
    elif ref_type == "full_text":
        ref = target.text.lower()
    elif ref_type == "ordinal":
        index = peers.index(target)
        ords, pos = _ordinal_refs(index, len(peers))
        forms = [f for f in (f for f, nn in banks.forms["ordinal"] if specific or nn)
                 if ("{ord}" in f and ords) or ("{pos}" in f and pos)]
        form = rng.choice(forms)
        ref = form.format(ord=rng.choice(ords) if ords else "", pos=rng.choice(pos) if pos else "", noun=noun)
        extra["position"] = index
    elif ref_type == "partial_value":
        piece = _partial_piece(rng, target, peers)
        if piece is None:
            raise GenerationError("no unique partial value for target")
        kind = "partial_phone" if cat is EntityCategory.PHONE_NUMBER else "partial"
        ref = pick_form(kind).format(piece=piece, noun=noun)
        extra["piece"] = piece
    else:
        raise ValueError(f"unknown reference type {ref_type!r}")

    prefix = rng.choice(banks.desc_prefixes)
    if action.split()[0] in _QUESTION_WORDS:
        prefix = rng.choice(["", "hey"])
    suffix = rng.choice(banks.desc_suffixes)
    raw = _join(prefix, action.format(ref=ref), suffix)
    tag = _TAG_FOR_REFERENCE[ref_type]
    meta = {"reference_type": ref_type, "reference": ref, "template": action, **extra}
    return Sample(
        request=Request(id=request_id, raw=raw, tokens=tuple(tokenize(raw))),
        screen=screen,
        candidates=screen.entities,
        gold_ids=frozenset({target.id}),
        subset=Subset.DESCRIPTIVE,
        supervision_tag=tag,
        meta=meta,
    )


def resolve_symbolically(sample: Sample, labels: dict[int, str]) -> int:
    """Re-derive the referent of a generated descriptive sample from its metadata."""
    meta = sample.meta
    kind = meta["reference_type"]
    gold = next(iter(sample.gold_ids))
    cat = sample.candidate(gold).category
    peers = sorted((e for e in sample.candidates if e.category is cat), key=reading_order_key)
    if kind == "label":
        hits = [e.id for e in peers if labels.get(e.id) == meta["label"]]
    elif kind == "full_text":
        hits = [e.id for e in peers if e.text.lower() == meta["reference"]]
    elif kind == "ordinal":
        hits = [peers[meta["position"]].id]
    else:
        hits = [e.id for e in peers if meta["piece"] in tokenize(e.text)]
    if len(hits) != 1:
        raise GenerationError(f"{sample.request.id}: reference resolves to {hits}")
    return hits[0]


# ---------------------------------------------------------------------------
# category-level requests


def dummy_entities() -> tuple[Entity, ...]:
    return tuple(Entity(id=i, ocr_text_id=i, text=DUMMY_TEXTS[c], bbox=(0.0, 0.0, 0.0, 0.0), category=c)
                 for i, c in enumerate(CATEGORIES))


def generate_category_sample(rng: random.Random, banks: Optional[TemplateBanks] = None,
                             multilabel_fraction: float = 0.22, request_id: str = "") -> Sample:
    banks = banks or load_banks()
    if banks.multilabel and rng.random() < multilabel_fraction:
        group = rng.choice(banks.multilabel)
        gold_cats, cores, refs = group["gold"], group["cores"], group["refs"]
    else:
        cat = rng.choice(CATEGORIES)
        gold_cats, cores, refs = [cat], banks.single[cat]["cores"], banks.single[cat]["refs"]
    core = rng.choice(cores)
    ref = rng.choice(refs)
    prefix = rng.choice(banks.cat_prefixes)
    if core.split()[0] in _QUESTION_WORDS:
        prefix = rng.choice(["", "hey"])
    raw = _join(prefix, core.format(ref=ref), rng.choice(banks.cat_suffixes))
    pool = dummy_entities()
    return Sample(
        request=Request(id=request_id, raw=raw, tokens=tuple(tokenize(raw))),
        candidates=pool,
        gold_ids=frozenset(CATEGORIES.index(c) for c in gold_cats),
        subset=Subset.CATEGORY_LEVEL,
        supervision_tag=SupervisionTag.CATEGORY_MODULE,
        meta={"reference_type": "simple", "reference": ref, "template": core},
    )


# ---------------------------------------------------------------------------
# corpus


@dataclass
class Corpus:
    splits: dict[str, list[Sample]]
    stats: dict[str, CorpusStats]
    labels: dict[str, dict[int, str]]

    def all_samples(self) -> list[Sample]:
        return [s for name in ("train", "val", "test") for s in self.splits[name]]


def _split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def compute_stats(samples: Sequence[Sample]) -> CorpusStats:
    if not samples:
        return CorpusStats(0, 0, 0, 0.0, 0.0, 0)
    raws = [s.request.raw for s in samples]
    ref_tokens = [len(tokenize(s.meta["reference"])) for s in samples if s.meta.get("reference")]
    screens = {s.screen.id for s in samples if s.screen is not None}
    return CorpusStats(
        total_requests=len(samples),
        unique_requests=len(set(raws)),
        multilabel_count=sum(len(s.gold_ids) > 1 for s in samples),
        tokens_per_request=sum(len(s.request.tokens) for s in samples) / len(samples),
        tokens_per_reference=sum(ref_tokens) / len(ref_tokens) if ref_tokens else 0.0,
        screen_count=len(screens),
    )


def _with_tag(s: Sample, tag: Optional[SupervisionTag]) -> Sample:
    return Sample(request=s.request, candidates=s.candidates, gold_ids=s.gold_ids, subset=s.subset,
                  screen=s.screen, supervision_tag=tag, meta=s.meta)


def generate_corpus(config: Optional[GeneratorConfig] = None, banks: Optional[TemplateBanks] = None) -> Corpus:
    config = config or GeneratorConfig()
    banks = banks or load_banks(config.templates_path)
    gaz = default_config()
    rng = random.Random(config.seed)

    # category-level, unique requests
    cat_samples: list[Sample] = []
    seen: set[str] = set()
    attempts = 0
    while len(cat_samples) < config.n_category_samples:
        attempts += 1
        if attempts > 50 * max(config.n_category_samples, 1):
            raise ExhaustedTemplates(f"only {len(cat_samples)} unique category-level requests reachable")
        s = generate_category_sample(rng, banks, config.multilabel_fraction,
                                     request_id=f"c{len(cat_samples):06d}")
        if s.request.raw in seen:
            continue
        seen.add(s.request.raw)
        cat_samples.append(s)

    # descriptive, grouped by screen
    sizes = sorted(config.same_category_weights)
    weights = [config.same_category_weights[k] for k in sizes]
    by_screen: list[list[Sample]] = []
    labels: dict[str, dict[int, str]] = {}
    for si in range(config.n_descriptive_screens):
        target_cat = rng.choice(CATEGORIES)
        n_same = rng.choices(sizes, weights=weights)[0]
        sid = f"s{si:05d}"
        gs = generate_screen(rng, config.layout, target_cat, n_same, banks, sid, gaz)
        labels[sid] = gs.labels
        peers = [e for e in gs.screen.entities if e.category is target_cat]
        group: list[Sample] = []
        used: set[tuple[int, str]] = set()
        raws: set[str] = set()
        tries = 0
        while len(group) < config.requests_per_screen:
            tries += 1
            if tries > 100:
                raise GenerationError(f"{sid}: could not draw {config.requests_per_screen} distinct requests")
            target = rng.choice(peers)
            s = generate_descriptive_sample(rng, gs, target, banks, reference_mix=config.reference_mix,
                                            request_id=f"d{si:05d}-{len(group)}")
            key = (target.id, s.meta["reference_type"])
            if key in used or s.request.raw in raws:
                continue
            if resolve_symbolically(s, gs.labels) != target.id:
                raise GenerationError(f"{s.request.id}: generated request does not resolve to its target")
            used.add(key)
            raws.add(s.request.raw)
            group.append(s)
        by_screen.append(group)

    # cap supervision tags
    desc_flat = [s for g in by_screen for s in g]
    pools: dict[SupervisionTag, list[tuple[str, int]]] = {t: [] for t in SupervisionTag}
    for i, s in enumerate(cat_samples):
        pools[s.supervision_tag].append(("c", i))
    for i, s in enumerate(desc_flat):
        pools[s.supervision_tag].append(("d", i))
    keep: set[tuple[str, int]] = set()
    for tag, pool in pools.items():
        cap = int(config.supervision_counts.get(tag.value, 0))
        keep |= set(rng.sample(pool, min(cap, len(pool))))
    cat_samples = [s if ("c", i) in keep else _with_tag(s, None) for i, s in enumerate(cat_samples)]
    it = iter(s if ("d", i) in keep else _with_tag(s, None) for i, s in enumerate(desc_flat))
    by_screen = [[next(it) for _ in g] for g in by_screen]

    # splits: category-level by request, descriptive by screen
    cat_order = list(range(len(cat_samples)))
    rng.shuffle(cat_order)
    scr_order = list(range(len(by_screen)))
    rng.shuffle(scr_order)
    ct, cv, _ = _split_counts(len(cat_order), config.split_ratios)
    dt, dv, _ = _split_counts(len(scr_order), config.split_ratios)
    cat_parts = {"train": sorted(cat_order[:ct]), "val": sorted(cat_order[ct:ct + cv]),
                 "test": sorted(cat_order[ct + cv:])}
    scr_parts = {"train": sorted(scr_order[:dt]), "val": sorted(scr_order[dt:dt + dv]),
                 "test": sorted(scr_order[dt + dv:])}
    splits = {name: [cat_samples[i] for i in cat_parts[name]]
              + [s for j in scr_parts[name] for s in by_screen[j]] for name in ("train", "val", "test")}

    stats = {
        Subset.CATEGORY_LEVEL.value: compute_stats(cat_samples),
        Subset.DESCRIPTIVE.value: compute_stats(desc_flat),
    }
    return Corpus(splits=splits, stats=stats, labels=labels)


# ---------------------------------------------------------------------------
# band checks and I/O

STAT_BANDS = {
    (Subset.CATEGORY_LEVEL.value, "tokens_per_request"): (6.5, 9.0),
    (Subset.DESCRIPTIVE.value, "tokens_per_request"): (6.5, 9.0),
    (Subset.CATEGORY_LEVEL.value, "tokens_per_reference"): (1.5, 2.6),
    (Subset.DESCRIPTIVE.value, "tokens_per_reference"): (3.5, 5.0),
    (Subset.DESCRIPTIVE.value, "multilabel_count"): (0, 0),
}


def check_stats(stats: dict[str, CorpusStats]) -> list[tuple[str, float, tuple[float, float], bool]]:
    """(name, value, band, ok) for every statistic with a target band."""
    out = []
    for (subset, name), (lo, hi) in STAT_BANDS.items():
        val = getattr(stats[subset], name)
        out.append((f"{subset}.{name}", val, (lo, hi), lo <= val <= hi))
    return out


def stats_to_dict(stats: dict[str, CorpusStats]) -> dict:
    return {k: asdict(v) for k, v in stats.items()}


def write_corpus(corpus: Corpus, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, samples in corpus.splits.items():
        p = out / f"{name}.ndjson"
        write_ndjson(p, (sample_to_dict(s) for s in samples))
        paths[name] = p
    p = out / "stats.json"
    p.write_text(json.dumps(stats_to_dict(corpus.stats), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths["stats"] = p
    return paths


def corpus_digest(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for name in ("train", "val", "test"):
        for s in corpus.splits[name]:
            h.update(json.dumps(sample_to_dict(s), sort_keys=True).encode())
            h.update(b"\n")
    return h.hexdigest()
