"""Training for the resolver network: loss, hand-written backprop, Adam.

Every gradient below is derived by hand from the forward pass in
``refresolve.srr``; ``tests/test_trainer.py`` checks them against
central finite differences in float64.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Iterable, Optional, Sequence

import numpy as np

from .screen_model import Entity, Sample, Subset
from .srr import (
    MODULES,
    Batch,
    EncodedSample,
    ModelConfig,
    category_token_ids,
    encode_sample,
    forward,
    init_params,
    make_batch,
    predict_encoded,
)

P_MIN = 1e-7


class EmptySplit(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 4e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 30
    patience: int = 5
    aux_loss_weight: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.aux_loss_weight < 0:
            raise ValueError("aux_loss_weight must be >= 0")

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_top1_error: list[float] = field(default_factory=list)
    val_exact_match: list[float] = field(default_factory=list)
    selected_epoch: int = -1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


# ---------------------------------------------------------------------------
# pairs


def make_pairs(sample: Sample, rng: np.random.Generator) -> list[tuple[Entity, int]]:
    """One (gold, 1) pair per gold entity, each followed by a random (non-gold, 0)."""
    negatives = [e for e in sample.candidates if e.id not in sample.gold_ids]
    out: list[tuple[Entity, int]] = []
    for e in sample.candidates:
        if e.id not in sample.gold_ids:
            continue
        out.append((e, 1))
        if negatives:
            out.append((negatives[int(rng.integers(len(negatives)))], 0))
    return out


def _pair_rows(enc: EncodedSample, rng: np.random.Generator) -> tuple[list[int], list[float]]:
    neg = np.flatnonzero(~enc.gold)
    rows, labels = [], []
    for i in np.flatnonzero(enc.gold):
        rows.append(int(i))
        labels.append(1.0)
        if len(neg):
            rows.append(int(neg[int(rng.integers(len(neg)))]))
            labels.append(0.0)
    return rows, labels


def pair_batch(encoded: Sequence[EncodedSample], rng: np.random.Generator, dtype=np.float32) -> Batch:
    rows, labels = zip(*(_pair_rows(e, rng) for e in encoded))
    return make_batch(encoded, rows=rows, labels=labels, dtype=dtype)


# ---------------------------------------------------------------------------
# loss and gradients


def _aux_rows(batch: Batch, modules: Sequence[str]) -> np.ndarray:
    """Tagged requests whose tag points at a module that is switched on."""
    if batch.tag is None:
        return np.zeros(0, dtype=np.int64)
    allowed = np.array([MODULES.index(m) for m in modules])
    return np.flatnonzero(np.isin(batch.tag, allowed) & (batch.tag >= 0))


def loss_from_forward(fw: dict, batch: Batch, aux_weight: float, modules: Sequence[str] = MODULES) -> float:
    p = np.clip(fw["p"].astype(np.float64), P_MIN, 1.0 - P_MIN)
    y = batch.y.astype(np.float64)
    bce = float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))
    rows = _aux_rows(batch, modules)
    aux = 0.0
    if aux_weight > 0 and len(rows):
        logits = fw["logits"][rows].astype(np.float64)
        m = np.max(logits, axis=1, keepdims=True)
        logz = m[:, 0] + np.log(np.sum(np.exp(logits - m), axis=1))
        aux = float(np.mean(logz - logits[np.arange(len(rows)), batch.tag[rows]]))
    return bce + aux_weight * aux


def loss(batch: Batch, params, cfg: ModelConfig, aux_weight: float, modules: Sequence[str] = MODULES) -> float:
    return loss_from_forward(forward(params, batch, cfg, modules=modules), batch, aux_weight, modules)


def _mlp_backward(params, grads, prefix: str, cache, dout: np.ndarray) -> np.ndarray:
    x, hid = cache
    grads[f"{prefix}.W2"] += hid.T @ dout
    grads[f"{prefix}.b2"] += dout.sum(axis=0)
    dpre = (dout @ params[f"{prefix}.W2"].T) * (1.0 - hid * hid)
    grads[f"{prefix}.W1"] += x.T @ dpre
    grads[f"{prefix}.b1"] += dpre.sum(axis=0)
    return dpre @ params[f"{prefix}.W1"].T


def _scatter_rows(index: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n,) + values.shape[1:], dtype=values.dtype)
    np.add.at(out, index, values)
    return out


def _attention_backward(params, grads, module: str, H, mask, alpha, U, dq) -> np.ndarray:
    """Gradient w.r.t. H of q = sum_l alpha_l H_l with alpha = softmax(v . tanh(W H_l))."""
    dH = alpha[..., None] * dq[:, None, :]
    dalpha = np.einsum("rd,rld->rl", dq, H)
    de = alpha * (dalpha - np.sum(alpha * dalpha, axis=1, keepdims=True))
    de = de * mask
    grads[f"att_{module}.v"] += np.einsum("rl,rla->a", de, U)
    dpre = de[..., None] * params[f"att_{module}.v"] * (1.0 - U * U)
    grads[f"att_{module}.W"] += np.einsum("rld,rla->da", H, dpre)
    dH += dpre @ params[f"att_{module}.W"].T
    return dH


def gradients(batch: Batch, params, cfg: ModelConfig, aux_weight: float,
              modules: Sequence[str] = MODULES) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and its exact gradient w.r.t. every parameter tensor."""
    modules = tuple(modules)
    fw = forward(params, batch, cfg, modules=modules)
    value = loss_from_forward(fw, batch, aux_weight, modules)
    dt = params["emb"].dtype
    grads = {k: np.zeros_like(v) for k, v in params.items()}

    p, y = fw["p"], batch.y.astype(dt)
    n_pairs = len(p)
    inside = (p >= P_MIN) & (p <= 1.0 - P_MIN)
    dz = np.where(inside, (p - y) / n_pairs, 0.0).astype(dt)

    S, W, w = fw["S"], fw["W"], fw["w"]
    R = w.shape[0]
    dw = _scatter_rows(batch.req, dz[:, None] * S, R)
    dlogits = w * (dw - np.sum(dw * w, axis=1, keepdims=True))
    rows = _aux_rows(batch, modules)
    if aux_weight > 0 and len(rows):
        onehot = np.zeros((len(rows), len(MODULES)), dtype=dt)
        onehot[np.arange(len(rows)), batch.tag[rows]] = 1.0
        dlogits[rows] += aux_weight * (w[rows] - onehot) / len(rows)
    active = np.array([m in modules for m in MODULES])
    dlogits = np.where(active, dlogits, 0.0).astype(dt)

    keep = np.array([m not in fw["skip"] for m in MODULES], dtype=dt)
    ds = dz[:, None] * W * keep
    ds_cat, ds_loc, ds_text = ds[:, 0], ds[:, 1], ds[:, 2]

    H, mask = fw["H"], fw["mask"]
    dH = np.zeros_like(H)

    # weight compute block
    dpooled = _mlp_backward(params, grads, "wc", fw["wc"], dlogits)
    dH += (dpooled / fw["n_tok"])[:, None, :] * mask[..., None]

    # text module
    _mlp_backward(params, grads, "text", fw["st_cache"], ds_text[:, None])

    # location module
    fl, gl = fw["fl"], fw["gl"]
    _mlp_backward(params, grads, "loc_feat", fw["fl_cache"], ds_loc[:, None] * gl[batch.req])
    dgl = _scatter_rows(batch.req, ds_loc[:, None] * fl, R)
    dq_loc = _mlp_backward(params, grads, "loc_req", fw["gl_cache"], dgl)
    dH += _attention_backward(params, grads, "loc", H, mask, fw["alpha_loc"], fw["U_loc"], dq_loc)

    # category module
    fc, gc = fw["fc"], fw["gc"]
    dfc = _scatter_rows(batch.cat, ds_cat[:, None] * gc[batch.req], fc.shape[0])
    dC = _mlp_backward(params, grads, "cat_ent", fw["fc_cache"], dfc)
    dgc = _scatter_rows(batch.req, ds_cat[:, None] * fc[batch.cat], R)
    dq_cat = _mlp_backward(params, grads, "cat_req", fw["gc_cache"], dgc)
    dH += _attention_backward(params, grads, "cat", H, mask, fw["alpha_cat"], fw["U_cat"], dq_cat)

    # embedding table: request tokens and category-name tokens
    valid = mask > 0
    np.add.at(grads["emb"], batch.tok[valid], dH[valid])
    cids, cmask = category_token_ids(cfg)
    per_tok = (dC / cmask.sum(axis=1, keepdims=True))[:, None, :] * cmask[..., None]
    cvalid = cmask > 0
    np.add.at(grads["emb"], cids[cvalid], per_tok[cvalid].astype(dt))
    return value, grads


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()})


def adam_step(params, grads, state: AdamState, config: TrainConfig) -> tuple[dict, AdamState]:
    """In-place bias-corrected Adam update; returns (params, state) for chaining."""
    for k in params:
        if grads[k].shape != params[k].shape or state.m[k].shape != params[k].shape:
            raise ShapeError(f"{k}: gradient/state shape does not match parameter shape {params[k].shape}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= (config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(p.dtype)
    return params, state


# ---------------------------------------------------------------------------
# training loop


def top1_and_em(encoded: Sequence[EncodedSample], preds) -> tuple[float, float]:
    err = em = 0
    for enc, pr in zip(encoded, preds):
        gold = enc.sample.gold_ids
        err += pr.argmax_id not in gold
        em += pr.selected_ids == set(gold)
    n = max(len(encoded), 1)
    return 100.0 * err / n, 100.0 * em / n


def train_encoded(train_set: Sequence[EncodedSample], val_set: Sequence[EncodedSample],
                  model_config: ModelConfig, train_config: TrainConfig,
                  modules: Sequence[str] = MODULES, log=None) -> tuple[dict, TrainHistory]:
    if not train_set or not val_set:
        raise EmptySplit("train and val splits must be non-empty")
    modules = tuple(modules)
    rng = np.random.default_rng(train_config.seed)
    params = init_params(model_config, seed=train_config.seed)
    state = AdamState.zeros_like(params)
    history = TrainHistory()
    best = None
    since_best = 0
    for epoch in range(train_config.max_epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), train_config.batch_size):
            chunk = [train_set[i] for i in order[start:start + train_config.batch_size]]
            batch = pair_batch(chunk, rng)
            value, grads = gradients(batch, params, model_config, train_config.aux_loss_weight, modules)
            adam_step(params, grads, state, train_config)
            losses.append(value)
        preds = predict_encoded(params, val_set, model_config, modules=modules)
        top1, em = top1_and_em(val_set, preds)
        history.train_loss.append(float(np.mean(losses)))
        history.val_top1_error.append(top1)
        history.val_exact_match.append(em)
        if log:
            log(f"epoch {epoch}: loss {history.train_loss[-1]:.4f} val top1 {top1:.2f} EM {em:.2f}")
        if best is None or top1 < history.val_top1_error[history.selected_epoch]:
            best = {k: v.copy() for k, v in params.items()}
            history.selected_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= train_config.patience:
                break
    return best, history


def encode_all(samples: Iterable[Sample], cfg: ModelConfig) -> list[EncodedSample]:
    return [encode_sample(s, cfg) for s in samples]


def train(corpus_splits: dict[str, Sequence[Sample]], model_config: Optional[ModelConfig] = None,
          train_config: Optional[TrainConfig] = None, modules: Sequence[str] = MODULES,
          log=None) -> tuple[dict, TrainHistory]:
    """Train one model on both subsets of the train split; select on val top-1."""
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    for name in ("train", "val", "test"):
        if not corpus_splits.get(name):
            raise EmptySplit(f"split {name!r} is empty")
    tr = encode_all(corpus_splits["train"], model_config)
    va = encode_all(corpus_splits["val"], model_config)
    return train_encoded(tr, va, model_config, train_config, modules, log)


# ---------------------------------------------------------------------------
# ablation


def module_subsets() -> list[tuple[str, ...]]:
    """All 7 non-empty subsets of the three modules, smallest first."""
    return [c for r in (1, 2, 3) for c in combinations(MODULES, r)]


def parse_modules(spec: str | Sequence[str]) -> tuple[str, ...]:
    names = [s.strip() for s in spec.split(",")] if isinstance(spec, str) else list(spec)
    names = [n for n in names if n]
    if not names:
        raise ValueError("module subset must be non-empty")
    bad = [n for n in names if n not in MODULES]
    if bad:
        raise ValueError(f"unknown modules {bad}; choose from {MODULES}")
    return tuple(m for m in MODULES if m in names)


@dataclass
class AblationResult:
    modules: tuple[str, ...]
    descriptive_top1_error: float
    descriptive_exact_match: float
    history: TrainHistory


def ablate(corpus_splits: dict[str, Sequence[Sample]], module_subset: Sequence[str],
           model_config: Optional[ModelConfig] = None, train_config: Optional[TrainConfig] = None,
           encoded: Optional[dict[str, list[EncodedSample]]] = None, log=None) -> AblationResult:
    """Train with the weight softmax restricted to ``module_subset``; score descriptive test."""
    modules = parse_modules(module_subset)
    model_config = model_config or ModelConfig()
    train_config = train_config or TrainConfig()
    if encoded is None:
        encoded = {k: encode_all(corpus_splits[k], model_config) for k in ("train", "val", "test")}
    params, history = train_encoded(encoded["train"], encoded["val"], model_config, train_config,
                                    modules, log)
    test = [e for e in encoded["test"] if e.sample.subset is Subset.DESCRIPTIVE]
    if not test:
        raise EmptySplit("no descriptive samples in the test split")
    top1, em = top1_and_em(test, predict_encoded(params, test, model_config, modules=modules))
    return AblationResult(modules, top1, em, history)
