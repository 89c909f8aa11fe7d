"""Exact match / top-1 error, per-subset reports, and the ablation table."""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .heuristic import category_oracle, no_text_oracle, resolve_heuristic
from .screen_model import Sample, Subset

# a resolver maps a sample to probabilities aligned with sample.candidates
Resolver = Callable[[Sample], Sequence[float]]

RESOLVER_ORDER = ("heuristic", "srr", "cat-oracle", "no-text-oracle")
_DISPLAY = {"heuristic": "Heuristic", "srr": "SRR", "cat-oracle": "Cat. Oracle",
            "no-text-oracle": "No text Oracle"}


def exact_match(selected_ids: Iterable[int], gold_ids: Iterable[int]) -> int:
    gold = set(gold_ids)
    if not gold:
        raise ValueError("gold set must be non-empty")
    return int(set(selected_ids) == gold)


def argmax_id(entity_ids: Sequence[int], scores: Sequence[float]) -> int:
    if not scores:
        raise ValueError("need at least one score")
    best = 0
    for i in range(1, len(scores)):
        if scores[i] > scores[best] or (scores[i] == scores[best] and entity_ids[i] < entity_ids[best]):
            best = i
    return entity_ids[best]


def top1_error(scores: Sequence[float], gold_ids: Iterable[int], entity_ids: Optional[Sequence[int]] = None) -> int:
    """1 unless the best-scoring entity (lowest id on ties) is gold; ``entity_ids`` default to 0..n-1."""
    ids = list(range(len(scores))) if entity_ids is None else list(entity_ids)
    return int(argmax_id(ids, list(scores)) not in set(gold_ids))


def round1(x: float) -> float:
    return float(Decimal(repr(x)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass
class SubsetResult:
    resolver: str
    subset: str
    n: int
    top1_error: float
    exact_match: float
    empty_selection_rate: float
    failures: int
    ms_per_sample: float
    failed_ids: list[str] = field(default_factory=list)


@dataclass
class MetricsReport:
    rows: list[SubsetResult]
    threshold: float
    corpus_hash: str = ""
    model_hash: str = ""

    def get(self, resolver: str, subset: Subset | str) -> SubsetResult:
        sub = subset.value if isinstance(subset, Subset) else subset
        for r in self.rows:
            if r.resolver == resolver and r.subset == sub:
                return r
        raise KeyError((resolver, sub))

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "corpus_hash": self.corpus_hash, "model_hash": self.model_hash,
                "rows": [asdict(r) for r in self.rows]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        head = f"{'Dataset':<16}{'Model':<16}{'Top-1 Err.':>11}{'EM':>8}{'Empty':>8}{'N':>7}{'Fail':>6}{'ms':>8}"
        out = [head, "-" * len(head)]
        for sub in (Subset.CATEGORY_LEVEL.value, Subset.DESCRIPTIVE.value):
            for r in self.rows:
                if r.subset != sub:
                    continue
                out.append(f"{sub:<16}{_DISPLAY.get(r.resolver, r.resolver):<16}"
                           f"{round1(r.top1_error):>11.1f}{round1(r.exact_match):>8.1f}"
                           f"{round1(r.empty_selection_rate):>8.1f}{r.n:>7}{r.failures:>6}{r.ms_per_sample:>8.3f}")
        return "\n".join(out)


def _score_one(resolver: Resolver, sample: Sample, threshold: float) -> tuple[int, int, int, bool]:
    """(top1 error, exact match, empty selection, failed) for one sample."""
    try:
        scores = list(resolver(sample))
        if len(scores) != len(sample.candidates):
            raise ValueError("resolver returned the wrong number of scores")
        ids = [e.id for e in sample.candidates]
        selected = {i for i, p in zip(ids, scores) if p > threshold}
        return (top1_error(scores, sample.gold_ids, ids), exact_match(selected, sample.gold_ids),
                int(not selected), False)
    except Exception:  # scored as a failure, the run goes on
        return 1, 0, 1, True


def evaluate(resolvers: Mapping[str, Resolver], samples: Sequence[Sample], threshold: float = 0.7,
             corpus_hash: str = "", model_hash: str = "") -> MetricsReport:
    if not samples:
        raise ValueError("dataset is empty")
    rows: list[SubsetResult] = []
    names = [n for n in RESOLVER_ORDER if n in resolvers] + [n for n in resolvers if n not in RESOLVER_ORDER]
    for name in names:
        resolver = resolvers[name]
        for sub in Subset:
            part = [s for s in samples if s.subset is sub]
            if not part:
                continue
            err = em = empty = 0
            failed: list[str] = []
            t0 = time.perf_counter()
            for s in part:
                e, m, z, bad = _score_one(resolver, s, threshold)
                err += e
                em += m
                empty += z
                if bad:
                    failed.append(s.request.id)
            elapsed = time.perf_counter() - t0
            n = len(part)
            rows.append(SubsetResult(name, sub.value, n, 100.0 * err / n, 100.0 * em / n, 100.0 * empty / n,
                                     len(failed), 1000.0 * elapsed / n, sorted(failed)))
    return MetricsReport(rows, threshold, corpus_hash, model_hash)


def baseline_resolvers() -> dict[str, Resolver]:
    return {
        "heuristic": lambda s: resolve_heuristic(s.request, s),
        "cat-oracle": category_oracle,
        "no-text-oracle": no_text_oracle,
    }


def srr_resolver(params, cfg, threshold: Optional[float] = None) -> Resolver:
    from .srr import encode_sample, predict_encoded

    def run(sample: Sample) -> list[float]:
        return predict_encoded(params, [encode_sample(sample, cfg)], cfg, threshold=threshold)[0].probabilities

    return run


def batched_srr_scores(params, cfg, samples: Sequence[Sample], modules=None) -> dict[str, list[float]]:
    """SRR probabilities for many samples in one batched pass, keyed by request id."""
    from .srr import MODULES, encode_sample, predict_encoded

    enc = [encode_sample(s, cfg) for s in samples]
    preds = predict_encoded(params, enc, cfg, modules=modules or MODULES)
    return {s.request.id: p.probabilities for s, p in zip(samples, preds)}


def cached_resolver(scores: Mapping[str, Sequence[float]]) -> Resolver:
    return lambda s: scores[s.request.id]


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# ablation table


def _label(modules: Sequence[str]) -> str:
    return "".join(("Y" if m in modules else "-") for m in ("cat", "loc", "text"))


def monotonicity_violations(errors: Mapping[tuple[str, ...], float]) -> list[str]:
    """Pairs where a single-module model is not worse than a two-module model containing it."""
    out = []
    singles = [k for k in errors if len(k) == 1]
    pairs = [k for k in errors if len(k) == 2]
    for s in singles:
        for p in pairs:
            if s[0] in p and not errors[s] > errors[p]:
                out.append(f"{'+'.join(s)} ({errors[s]:.1f}) is not worse than {'+'.join(p)} ({errors[p]:.1f})")
    full = ("cat", "loc", "text")
    if full in errors:
        for k, v in errors.items():
            if k != full and not errors[full] < v:
                out.append(f"full model ({errors[full]:.1f}) is not better than {'+'.join(k)} ({v:.1f})")
    return out


def report_ablation(results: Mapping[tuple[str, ...], float]) -> tuple[str, list[str]]:
    """Text table sorted by descriptive top-1 error plus the list of ordering violations."""
    if len(results) != 7:
        raise ValueError(f"expected 7 module subsets, got {len(results)}")
    ordered = sorted(results.items(), key=lambda kv: (kv[1], len(kv[0])))
    lines = [f"{'cat/loc/text':<14}{'Top-1 Err.':>11}", "-" * 25]
    for mods, err in ordered:
        lines.append(f"{_label(mods):<14}{round1(err):>11.1f}")
    full = ("cat", "loc", "text")
    if ordered[0][0] != full:
        lines.append("note: full model is not first")
    violations = monotonicity_violations(results)
    for v in violations:
        lines.append(f"violation: {v}")
    return "\n".join(lines), violations
