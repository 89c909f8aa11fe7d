"""Command-line entry point: ``refresolve <subcommand> ...``.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import Optional

from . import __version__

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


def _load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a JSON object")
    return data


def _section(args, name: str, explicit: Optional[str]) -> dict:
    """Config block from an explicit file, else from the global --config file."""
    if explicit:
        return _load_json(explicit)
    if args.config:
        return dict(_load_json(args.config).get(name, {}))
    return {}


def _print(msg: str = "") -> None:
    print(msg, flush=True)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    from .corpus import GeneratorConfig, check_stats, generate_corpus, write_corpus, corpus_digest

    raw = _section(args, "generator", args.gen_config)
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = GeneratorConfig.from_dict(raw)
    corpus = generate_corpus(cfg)
    write_corpus(corpus, args.out_dir)
    ok = True
    for name, value, (lo, hi), good in check_stats(corpus.stats):
        ok &= good
        _print(f"{'PASS' if good else 'FAIL'} {name} = {value:.3f} (band [{lo}, {hi}])")
    sizes = {k: len(v) for k, v in corpus.splits.items()}
    _print(f"splits {sizes} digest {corpus_digest(corpus)[:16]}")
    return EXIT_OK if ok else EXIT_INVALID


def cmd_detect(args) -> int:
    from .detectors import DetectorConfig, default_config, detect_entities
    from .screen_model import entity_to_dict, read_ndjson, screen_from_dict, write_ndjson

    cfg = DetectorConfig.from_file(args.detector_config) if args.detector_config else default_config()
    out = []
    for rec in read_ndjson(args.inp):
        rec.setdefault("entities", [])
        screen = screen_from_dict(rec)
        ents = detect_entities(screen.ocr_texts, cfg)
        out.append({"screen_id": screen.id, "entities": [entity_to_dict(e) for e in ents]})
    write_ndjson(args.out, out)
    _print(f"{len(out)} screens, {sum(len(r['entities']) for r in out)} entities")
    return EXIT_OK


def cmd_features(args) -> int:
    from .features import FEATURE_LAYOUT, feature_vector
    from .screen_model import load_samples, write_ndjson

    rows: list[dict] = [{"layout": FEATURE_LAYOUT, "dim": 42}]
    for s in load_samples(args.inp):
        for e in s.candidates:
            rows.append({"request_id": s.request.id, "entity_id": e.id, "features": feature_vector(s, e)})
    write_ndjson(args.out, rows)
    _print(f"{len(rows) - 1} feature vectors")
    return EXIT_OK


def _load_splits(corpus_dir) -> dict:
    from .screen_model import load_samples

    root = Path(corpus_dir)
    return {name: load_samples(root / f"{name}.ndjson") for name in ("train", "val", "test")}


def _configs(args):
    from .srr import ModelConfig
    from .trainer import TrainConfig

    mraw = _section(args, "model", args.model_config)
    traw = _section(args, "train", args.train_config)
    if args.seed is not None:
        traw["seed"] = args.seed
    return ModelConfig.from_dict(mraw), TrainConfig.from_dict(traw)


def cmd_train(args) -> int:
    from .srr import save_model
    from .trainer import parse_modules, train

    mcfg, tcfg = _configs(args)
    modules = parse_modules(args.modules)
    splits = _load_splits(args.corpus)
    params, history = train(splits, mcfg, tcfg, modules=modules, log=_print if args.verbose else None)
    save_model(args.out, params, mcfg)
    if args.history:
        Path(args.history).write_text(history.to_json() + "\n", encoding="utf-8")
    best = history.selected_epoch
    _print(f"selected epoch {best}: val top-1 {history.val_top1_error[best]:.2f} "
           f"EM {history.val_exact_match[best]:.2f}")
    return EXIT_OK


def _resolver(name: str, args):
    from .evaluate import baseline_resolvers

    base = baseline_resolvers()
    if name in base:
        return base[name], None
    if name != "srr":
        raise ValueError(f"unknown resolver {name!r}")
    if not args.model:
        raise ValueError("--model is required for the srr resolver")
    from .srr import load_model

    params, cfg = load_model(args.model)
    return None, (params, cfg)


def cmd_resolve(args) -> int:
    from .screen_model import load_samples, write_ndjson
    from .srr import resolve

    fn, model = _resolver(args.resolver, args)
    threshold = args.threshold
    out = []
    for s in load_samples(args.inp):
        rec = {"request_id": s.request.id, "entity_ids": [e.id for e in s.candidates]}
        if model is not None:
            params, cfg = model
            pred = resolve(s.request, s, params, cfg, threshold=threshold, explain=args.explain,
                           skip_eps=args.skip_eps)
            rec.update(probabilities=pred.probabilities, argmax_id=pred.argmax_id,
                       selected_ids=sorted(pred.selected_ids))
            if args.explain:
                rec["explain"] = pred.explain
        else:
            from .evaluate import argmax_id

            scores = list(fn(s))
            rec.update(probabilities=scores, argmax_id=argmax_id(rec["entity_ids"], scores),
                       selected_ids=[i for i, p in zip(rec["entity_ids"], scores) if p > threshold])
        out.append(rec)
    write_ndjson(args.out, out)
    _print(f"{len(out)} predictions")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluate import baseline_resolvers, batched_srr_scores, cached_resolver, evaluate, file_hash

    names = [n.strip() for n in args.resolvers.split(",") if n.strip()]
    splits = _load_splits(args.corpus) if args.split == "all" else None
    if splits is not None:
        samples = [s for v in splits.values() for s in v]
    else:
        from .screen_model import load_samples
        samples = load_samples(Path(args.corpus) / f"{args.split}.ndjson")
    resolvers = {}
    base = baseline_resolvers()
    model_hash = ""
    for n in names:
        if n in base:
            resolvers[n] = base[n]
        elif n == "srr":
            if not args.model:
                raise ValueError("--model is required for the srr resolver")
            from .srr import load_model

            params, cfg = load_model(args.model)
            resolvers[n] = cached_resolver(batched_srr_scores(params, cfg, samples))
            model_hash = file_hash(args.model)
        else:
            raise ValueError(f"unknown resolver {n!r}")
    corpus_hash = "".join(file_hash(Path(args.corpus) / f"{n}.ndjson")[:16] for n in ("train", "val", "test"))
    report = evaluate(resolvers, samples, threshold=args.threshold, corpus_hash=corpus_hash,
                      model_hash=model_hash)
    _print(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluate import report_ablation
    from .trainer import ablate, encode_all, module_subsets, parse_modules

    mcfg, tcfg = _configs(args)
    splits = _load_splits(args.corpus)
    encoded = {k: encode_all(v, mcfg) for k, v in splits.items()}
    subsets = module_subsets() if args.modules == "all" else [parse_modules(args.modules)]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [tcfg.seed]
    results = []
    for seed in seeds:
        errors = {}
        for mods in subsets:
            res = ablate(splits, mods, mcfg, dataclasses.replace(tcfg, seed=seed), encoded=encoded)
            errors[mods] = res.descriptive_top1_error
            results.append({"seed": seed, "modules": list(mods), "descriptive_top1_error": res.descriptive_top1_error,
                            "descriptive_exact_match": res.descriptive_exact_match,
                            "selected_epoch": res.history.selected_epoch})
            _print(f"seed {seed} {'+'.join(mods):<14} top-1 {res.descriptive_top1_error:.1f}")
        if len(errors) == 7:
            table, _ = report_ablation(errors)
            _print(f"\nseed {seed}\n{table}")
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refresolve", description="Resolve spoken references to on-screen entities.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=None, help="overrides the seed of the generator or trainer")
    p.add_argument("--config", default=None,
                   help="JSON file with optional 'generator', 'model' and 'train' sections")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--gen-config", default=None, help="GeneratorConfig JSON")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_generate)

    d = sub.add_parser("detect", help="run the data detectors over screens")
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--detector-config", default=None)
    d.set_defaults(func=cmd_detect)

    f = sub.add_parser("features", help="dump the 42-float feature vector of every candidate")
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_features)

    def model_args(sp):
        sp.add_argument("--corpus", required=True, help="directory with train/val/test.ndjson")
        sp.add_argument("--model-config", default=None)
        sp.add_argument("--train-config", default=None)
        sp.add_argument("--verbose", action="store_true")

    t = sub.add_parser("train", help="train the resolver network")
    model_args(t)
    t.add_argument("--out", required=True)
    t.add_argument("--history", default=None)
    t.add_argument("--modules", default="cat,loc,text")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("resolve", help="score the candidates of each sample")
    r.add_argument("--resolver", default="srr", choices=["srr", "heuristic", "cat-oracle", "no-text-oracle"])
    r.add_argument("--model", default=None)
    r.add_argument("--threshold", type=float, default=0.7)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--explain", action="store_true")
    r.add_argument("--skip-eps", type=float, default=0.0, help="skip modules whose weight is below this")
    r.set_defaults(func=cmd_resolve)

    e = sub.add_parser("eval", help="top-1 error and exact match per subset")
    e.add_argument("--resolvers", default="heuristic,srr,cat-oracle,no-text-oracle")
    e.add_argument("--model", default=None)
    e.add_argument("--corpus", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    e.add_argument("--threshold", type=float, default=0.7)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score module subsets")
    model_args(a)
    a.add_argument("--modules", default="all", help="'all' or a comma list such as cat,loc")
    a.add_argument("--seeds", default=None, help="comma list of training seeds")
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError, TypeError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
