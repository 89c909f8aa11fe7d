import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refresolve.corpus import LayoutSpec, generate_descriptive_sample, generate_screen
from refresolve.screen_model import EntityCategory as C, Request, Sample, Subset, reading_order_key
from refresolve.srr import (
    BadMagic,
    ModelConfig,
    ModuleScores,
    ModuleWeights,
    NoCandidates,
    ShapeMismatch,
    VersionMismatch,
    category_score,
    compute_module_weights,
    deserialize,
    embed_tokens,
    encode_sample,
    forward,
    fuse,
    init_params,
    load_model,
    location_score,
    make_batch,
    module_attention,
    module_skip,
    predict_encoded,
    resolve,
    save_model,
    serialize,
    text_score,
    zero_params,
)

SMALL = ModelConfig(embed_dim=8, hidden_dim=12, vocab_buckets=97, attention_dim=6, joint_dim=5)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(threshold=1.0)
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=0)


def test_embedding_lookup():
    p = init_params(SMALL, seed=1)
    e = embed_tokens(["call", "x", "call"], p, SMALL)
    assert np.array_equal(e[0], e[2])
    assert not embed_tokens(["call"], zero_params(SMALL), SMALL).any()


def test_single_token_attention():
    p = init_params(SMALL, seed=2)
    h = embed_tokens(["call"], p, SMALL)
    q, alpha = module_attention(h, "cat", p)
    assert alpha.tolist() == [1.0]
    assert np.array_equal(q, h[0])


def test_identical_tokens_uniform_attention():
    p = init_params(SMALL, seed=2)
    q, alpha = module_attention(embed_tokens(["go"] * 4, p, SMALL), "loc", p)
    np.testing.assert_allclose(alpha, 0.25, atol=1e-7)


def test_zero_params_examples(default_corpus):
    p = zero_params(SMALL)
    h = embed_tokens(["call", "this"], p, SMALL)
    assert compute_module_weights(h, p).as_tuple() == pytest.approx((1 / 3,) * 3)
    assert category_score(C.URL, h[0], p, SMALL) == 0.0
    assert location_score(np.ones(30), h[0], p) == 0.0
    assert text_score(np.ones(12), p) == 0.0
    enc = [encode_sample(s, SMALL) for s in default_corpus.splits["val"][:20]]
    fw = forward(p, make_batch(enc), SMALL)
    assert np.all(fw["p"] == 0.5)


def test_fuse_examples():
    third = ModuleWeights(1 / 3, 1 / 3, 1 / 3)
    assert fuse(third, ModuleScores(0.6, 0.6, 0.6)) == pytest.approx(0.6457, abs=1e-4)
    assert fuse(third, ModuleScores(0, 0, 0)) == 0.5
    only_cat = ModuleWeights(1.0, 0.0, 0.0)
    assert fuse(only_cat, ModuleScores(1.2, 5.0, -3.0)) == fuse(only_cat, ModuleScores(1.2, -9.0, 7.0))


def test_module_skip_examples():
    assert module_skip(ModuleWeights(0.5, 0.3, 0.2), 0.0) == set()
    assert module_skip(ModuleWeights(0.98, 0.01, 0.01), 0.05) == {"loc", "text"}
    with pytest.raises(ValueError):
        module_skip(ModuleWeights(0.98, 0.01, 0.01), 0.5)


def _desc_sample(seed=4, n=3):
    rng = random.Random(seed)
    gs = generate_screen(rng, LayoutSpec(), C.PHONE_NUMBER, n)
    peers = sorted((e for e in gs.screen.entities if e.category is C.PHONE_NUMBER), key=reading_order_key)
    return generate_descriptive_sample(rng, gs, peers[1])


def test_vectorised_forward_matches_per_op_helpers():
    cfg = SMALL
    p = init_params(cfg, seed=5, dtype=np.float64)
    s = _desc_sample()
    enc = encode_sample(s, cfg)
    fw = forward(p, make_batch([enc], dtype=np.float64), cfg)
    h = embed_tokens(s.request.tokens, p, cfg)
    w = compute_module_weights(h, p)
    np.testing.assert_allclose(fw["w"][0], w.as_tuple(), rtol=1e-12)
    q_cat, _ = module_attention(h, "cat", p)
    q_loc, _ = module_attention(h, "loc", p)
    for i, e in enumerate(s.candidates):
        sc = ModuleScores(category_score(e.category, q_cat, p, cfg), location_score(enc.loc[i], q_loc, p),
                          text_score(enc.text[i], p))
        np.testing.assert_allclose(fw["S"][i], (sc.s_cat, sc.s_loc, sc.s_text), rtol=1e-10, atol=1e-12)
        assert fw["p"][i] == pytest.approx(fuse(w, sc), rel=1e-12)


def test_equal_category_shares_cat_score():
    p = init_params(SMALL, seed=6)
    s = _desc_sample()
    fw = forward(p, make_batch([encode_sample(s, SMALL)]), SMALL)
    cats = [e.category for e in s.candidates]
    for i in range(len(cats)):
        for j in range(len(cats)):
            if cats[i] is cats[j]:
                assert fw["S"][i, 0] == fw["S"][j, 0]


def test_excluded_module_gets_zero_weight():
    p = init_params(SMALL, seed=7)
    fw = forward(p, make_batch([encode_sample(_desc_sample(), SMALL)]), SMALL, modules=("cat", "text"))
    assert fw["w"][0, 1] == 0.0
    assert fw["w"][0].sum() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.lists(st.sampled_from(["call", "the", "third", "number", "mail", "x", "2"]),
                                             min_size=1, max_size=12))
def test_simplex_and_finite(seed, words):
    p = init_params(SMALL, seed=seed)
    rng = np.random.default_rng(seed)
    for k in p:
        p[k] = p[k] * np.float32(rng.uniform(0.5, 20.0))
    w = compute_module_weights(embed_tokens(words, p, SMALL), p).as_tuple()
    assert all(0.0 <= v <= 1.0 for v in w)
    assert abs(sum(w) - 1.0) <= 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.randoms(use_true_random=False))
def test_permuting_candidates_permutes_probabilities(seed, rnd):
    p = init_params(SMALL, seed=seed)
    s = _desc_sample(seed=seed % 50 + 1)
    order = list(range(len(s.candidates)))
    rnd.shuffle(order)
    s2 = Sample(s.request, tuple(s.candidates[i] for i in order), s.gold_ids, s.subset, screen=s.screen,
                meta=s.meta)
    a = resolve(s.request, s, p, SMALL).probabilities
    b = resolve(s2.request, s2, p, SMALL).probabilities
    assert b == [a[i] for i in order]


def test_prediction_semantics():
    p = init_params(SMALL, seed=3)
    s = _desc_sample()
    pred = resolve(s.request, s, p, SMALL, threshold=0.999999)
    assert pred.selected_ids == set() and pred.argmax_id in pred.entity_ids
    pred = resolve(s.request, s, p, SMALL, threshold=1e-9)
    assert pred.selected_ids == set(pred.entity_ids)
    with pytest.raises(NoCandidates):
        resolve(s.request, Sample(s.request, (), frozenset({0}), Subset.DESCRIPTIVE), p, SMALL)


def test_resolve_explain_and_skip():
    p = init_params(SMALL, seed=3)
    s = _desc_sample()
    pred = resolve(s.request, s, p, SMALL, explain=True)
    ex = pred.explain
    assert sum(ex["module_weights"].values()) == pytest.approx(1.0, abs=1e-6)
    assert [t for t, _ in ex["attention"]["cat"]] == list(s.request.tokens)
    assert ex["skipped_modules"] == []
    w = ex["module_weights"]
    eps = min(sorted(w.values())[0] + 1e-6, 0.33)
    skipped = resolve(s.request, s, p, SMALL, explain=True, skip_eps=eps)
    low = min(w, key=w.get)
    if w[low] < eps:
        assert skipped.explain["skipped_modules"] == [low]
        # skipping moves p by at most 1/4 (sigmoid slope) times the dropped weighted score
        for before, after, sc in zip(pred.probabilities, skipped.probabilities, ex["module_scores"]):
            assert abs(before - after) <= 0.25 * w[low] * abs(sc[low]) + 1e-6


def test_resolve_accepts_a_new_request():
    p = init_params(SMALL, seed=3)
    s = _desc_sample()
    a = resolve(Request.from_raw("call the top number"), s, p, SMALL)
    b = resolve(s.request, s, p, SMALL)
    assert a.probabilities != b.probabilities


def test_serialization_round_trip(tmp_path, default_corpus):
    cfg = ModelConfig()
    p = init_params(cfg, seed=9)
    path = tmp_path / "m.bin"
    save_model(path, p, cfg)
    assert path.stat().st_size < 5 * 2 ** 20
    q, cfg2 = load_model(path)
    assert cfg2 == cfg
    assert all(np.array_equal(p[k], q[k]) for k in p)
    enc = [encode_sample(s, cfg) for s in default_corpus.splits["test"][::10][:100]]
    a = predict_encoded(p, enc, cfg)
    b = predict_encoded(q, enc, cfg2)
    assert [x.probabilities for x in a] == [x.probabilities for x in b]
    assert serialize(q, cfg2) == path.read_bytes()


def test_serialization_errors():
    blob = serialize(init_params(SMALL, seed=0), SMALL)
    with pytest.raises(BadMagic):
        deserialize(b"NOTMODEL" + blob[8:])
    with pytest.raises(VersionMismatch):
        deserialize(blob[:8] + (2).to_bytes(4, "little") + blob[12:])
    with pytest.raises(ShapeMismatch):
        deserialize(blob[:-10])
    with pytest.raises(ShapeMismatch):
        deserialize(blob + b"\0")
    bad = dict(init_params(SMALL, seed=0))
    bad["emb"] = bad["emb"][:-1]
    with pytest.raises(ShapeMismatch):
        serialize(bad, SMALL)


def test_trained_weights_favour_location_on_ordinals(trained_default, default_encoded):
    params, _, cfg = trained_default
    enc = [e for e in default_encoded["test"] if e.sample.meta.get("reference_type") == "ordinal"]
    fw = forward(params, make_batch(enc), cfg)
    assert np.mean(np.argmax(fw["w"], axis=1) == 1) > 0.9
    probe = Sample(Request.from_raw("send the third email address"), enc[0].sample.candidates,
                   enc[0].sample.gold_ids, Subset.DESCRIPTIVE, screen=enc[0].sample.screen)
    w = resolve(probe.request, probe, params, cfg, explain=True).explain["module_weights"]
    assert max(w, key=w.get) == "loc"


def test_trained_category_scores(trained_default):
    params, _, cfg = trained_default
    h = embed_tokens(Request.from_raw("call this number").tokens, params, cfg)
    q, _ = module_attention(h, "cat", params)
    assert category_score(C.PHONE_NUMBER, q, params, cfg) > category_score(C.URL, q, params, cfg)


def test_trained_top_position(trained_default, default_encoded):
    params, _, cfg = trained_default
    hits = total = 0
    for e in default_encoded["test"]:
        s = e.sample
        if s.subset is not Subset.DESCRIPTIVE:
            continue
        cat = s.candidate(next(iter(s.gold_ids))).category
        phones = sorted((c for c in s.candidates if c.category is cat), key=reading_order_key)
        probe = Sample(Request.from_raw("call the top one"), s.candidates, frozenset({phones[0].id}),
                       s.subset, screen=s.screen)
        pred = resolve(probe.request, probe, params, cfg, explain=True)
        s_loc = {i: sc["loc"] for i, sc in zip(pred.entity_ids, pred.explain["module_scores"])}
        total += 1
        hits += max(phones, key=lambda c: s_loc[c.id]).id == phones[0].id
    assert hits / total > 0.8
