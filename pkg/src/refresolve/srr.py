"""Screen reference resolver network.

A hashed token-embedding table feeds three things: a weight-compute
block (mean pool -> 2-layer MLP -> softmax over the three modules) and
two soft-attention poolings, one for the category module and one for the
location module. Each module scores an entity:

* category: <MLP(category-name embedding), MLP(attended request)>
* location: <MLP(location features), MLP(attended request)>
* text:     MLP(text-matching features)

and the final logit is ``w_cat*s_cat + w_loc*s_loc + w_text*s_text``,
squashed with a sigmoid. Everything is vectorised over a batch of
(request, entity) rows; ``forward`` keeps the intermediates that
``refresolve.trainer`` needs for the backward pass.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .features import LOC_DIM, TEXT_DIM, candidate_features
from .screen_model import CATEGORIES, CATEGORY_NAMES, Request, Sample, tokenize

MODULES = ("cat", "loc", "text")


class NoCandidates(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    hidden_dim: int = 128
    vocab_buckets: int = 8192
    attention_dim: int = 64
    joint_dim: int = 64
    n_modules: int = 3
    threshold: float = 0.7
    loc_dim: int = LOC_DIM
    text_dim: int = TEXT_DIM

    def __post_init__(self):
        for name in ("embed_dim", "hidden_dim", "vocab_buckets", "attention_dim", "joint_dim",
                     "loc_dim", "text_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_modules != 3:
            raise ValueError("the resolver has exactly three modules")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        return cls(**raw)

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes, in serialisation order."""
    d, h, a, o = cfg.embed_dim, cfg.hidden_dim, cfg.attention_dim, cfg.joint_dim
    shapes: dict[str, tuple[int, ...]] = {"emb": (cfg.vocab_buckets, d)}

    def mlp(prefix, n_in, n_out):
        shapes.update({f"{prefix}.W1": (n_in, h), f"{prefix}.b1": (h,),
                       f"{prefix}.W2": (h, n_out), f"{prefix}.b2": (n_out,)})

    mlp("wc", d, cfg.n_modules)
    for m in ("cat", "loc"):
        shapes[f"att_{m}.W"] = (d, a)
        shapes[f"att_{m}.v"] = (a,)
    mlp("cat_ent", d, o)
    mlp("cat_req", d, o)
    mlp("loc_feat", cfg.loc_dim, o)
    mlp("loc_req", d, o)
    mlp("text", cfg.text_dim, 1)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "emb":
            arr = rng.normal(0.0, 0.1, size=shape)
        elif name.endswith(".v"):
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        elif len(shape) == 2:
            arr = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def zero_params(cfg: ModelConfig, dtype=np.float32) -> dict[str, np.ndarray]:
    return {name: np.zeros(shape, dtype=dtype) for name, shape in param_shapes(cfg).items()}


# ---------------------------------------------------------------------------
# token hashing


_BUCKET_CACHE: dict[tuple[str, int], int] = {}


def token_bucket(token: str, vocab_buckets: int) -> int:
    key = (token, vocab_buckets)
    b = _BUCKET_CACHE.get(key)
    if b is None:
        b = zlib.crc32(token.encode("utf-8")) % vocab_buckets
        _BUCKET_CACHE[key] = b
    return b


def token_ids(tokens: Sequence[str], vocab_buckets: int) -> np.ndarray:
    return np.array([token_bucket(t, vocab_buckets) for t in tokens], dtype=np.int64)


def category_token_ids(cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Padded bucket ids and mask for each category name ("phone number" -> 2 tokens)."""
    toks = [tokenize(CATEGORY_NAMES[c]) for c in CATEGORIES]
    width = max(len(t) for t in toks)
    ids = np.zeros((len(toks), width), dtype=np.int64)
    mask = np.zeros((len(toks), width))
    for i, t in enumerate(toks):
        ids[i, :len(t)] = token_ids(t, cfg.vocab_buckets)
        mask[i, :len(t)] = 1.0
    return ids, mask


# ---------------------------------------------------------------------------
# encoded samples and batches


@dataclass
class EncodedSample:
    """Model inputs for one sample, computed once."""

    sample: Sample
    tokens: np.ndarray          # bucket ids [L]
    entity_ids: np.ndarray      # [n]
    categories: np.ndarray      # category index [n]
    loc: np.ndarray             # [n, loc_dim]
    text: np.ndarray            # [n, text_dim]
    gold: np.ndarray            # bool [n]
    tag: int                    # module index of the supervision tag, -1 if none


_TAG_INDEX = {"category_module": 0, "location_module": 1, "text_module": 2}


def encode_sample(sample: Sample, cfg: ModelConfig) -> EncodedSample:
    if not sample.candidates:
        raise NoCandidates(f"sample {sample.request.id} has no candidates")
    loc, txt = candidate_features(sample)
    tag = _TAG_INDEX[sample.supervision_tag.value] if sample.supervision_tag else -1
    return EncodedSample(
        sample=sample,
        tokens=token_ids(sample.request.tokens, cfg.vocab_buckets),
        entity_ids=np.array([e.id for e in sample.candidates], dtype=np.int64),
        categories=np.array([CATEGORIES.index(e.category) for e in sample.candidates], dtype=np.int64),
        loc=loc,
        text=txt,
        gold=np.array([e.id in sample.gold_ids for e in sample.candidates]),
        tag=tag,
    )


@dataclass
class Batch:
    tok: np.ndarray        # [R, L] bucket ids (0-padded)
    mask: np.ndarray       # [R, L] 1.0 for real tokens
    req: np.ndarray        # [P] row -> request index
    cat: np.ndarray        # [P] category index
    loc: np.ndarray        # [P, loc_dim]
    text: np.ndarray       # [P, text_dim]
    y: Optional[np.ndarray] = None    # [P] labels
    tag: Optional[np.ndarray] = None  # [R] module index or -1


def make_batch(encoded: Sequence[EncodedSample], rows: Optional[Sequence[Sequence[int]]] = None,
               labels: Optional[Sequence[Sequence[float]]] = None, dtype=np.float32) -> Batch:
    """Stack requests and the chosen candidate rows (all candidates by default)."""
    width = max(len(e.tokens) for e in encoded)
    R = len(encoded)
    tok = np.zeros((R, width), dtype=np.int64)
    mask = np.zeros((R, width), dtype=dtype)
    req, cat, loc, text, ys = [], [], [], [], []
    for r, enc in enumerate(encoded):
        n = len(enc.tokens)
        tok[r, :n] = enc.tokens
        mask[r, :n] = 1.0
        idx = np.arange(len(enc.entity_ids)) if rows is None else np.asarray(rows[r], dtype=np.int64)
        req.append(np.full(len(idx), r, dtype=np.int64))
        cat.append(enc.categories[idx])
        loc.append(enc.loc[idx])
        text.append(enc.text[idx])
        if labels is not None:
            ys.append(np.asarray(labels[r], dtype=dtype))
    return Batch(
        tok=tok, mask=mask,
        req=np.concatenate(req), cat=np.concatenate(cat),
        loc=np.concatenate(loc).astype(dtype), text=np.concatenate(text).astype(dtype),
        y=np.concatenate(ys) if labels is not None else None,
        tag=np.array([e.tag for e in encoded], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# forward pass


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def mlp_forward(params, prefix: str, x: np.ndarray):
    hid = np.tanh(x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"])
    return hid @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"], (x, hid)


def attend(params, module: str, H: np.ndarray, mask: np.ndarray):
    """Additive soft attention over token embeddings ``H`` [R, L, d]."""
    U = np.tanh(H @ params[f"att_{module}.W"])
    logits = U @ params[f"att_{module}.v"]
    logits = np.where(mask > 0, logits, -np.inf)
    alpha = _softmax(logits, axis=1)
    q = np.einsum("rl,rld->rd", alpha, H)
    return q, alpha, U


def category_embeddings(params, cfg: ModelConfig) -> np.ndarray:
    ids, mask = category_token_ids(cfg)
    rows = params["emb"][ids] * mask[..., None].astype(params["emb"].dtype)
    return rows.sum(axis=1) / mask.sum(axis=1, keepdims=True).astype(params["emb"].dtype)


def forward(params: dict[str, np.ndarray], batch: Batch, cfg: ModelConfig,
            modules: Iterable[str] = MODULES, skip: Iterable[str] = ()) -> dict:
    """Probabilities and every intermediate needed for backprop.

    ``modules`` restricts the weight softmax (excluded logits are -inf);
    ``skip`` zeroes the scores of modules that are not evaluated.
    """
    modules = tuple(modules)
    skip = set(skip)
    dt = params["emb"].dtype
    mask = batch.mask.astype(dt)
    H = params["emb"][batch.tok] * mask[..., None]
    n_tok = mask.sum(axis=1, keepdims=True)
    pooled = H.sum(axis=1) / n_tok

    wc_out, wc_cache = mlp_forward(params, "wc", pooled)
    active = np.array([m in modules for m in MODULES])
    logits = np.where(active, wc_out, -np.inf)
    w = _softmax(logits, axis=1)

    q_cat, alpha_cat, U_cat = attend(params, "cat", H, mask)
    q_loc, alpha_loc, U_loc = attend(params, "loc", H, mask)

    C = category_embeddings(params, cfg)
    fc, fc_cache = mlp_forward(params, "cat_ent", C)
    gc, gc_cache = mlp_forward(params, "cat_req", q_cat)
    s_cat = np.sum(fc[batch.cat] * gc[batch.req], axis=1)

    fl, fl_cache = mlp_forward(params, "loc_feat", batch.loc.astype(dt))
    gl, gl_cache = mlp_forward(params, "loc_req", q_loc)
    s_loc = np.sum(fl * gl[batch.req], axis=1)

    st, st_cache = mlp_forward(params, "text", batch.text.astype(dt))
    s_text = st[:, 0]

    S = np.stack([s_cat, s_loc, s_text], axis=1)
    if skip:
        S = S * np.array([m not in skip for m in MODULES], dtype=dt)
    W = w[batch.req]
    z = np.sum(W * S, axis=1)
    p = sigmoid(z)
    return {
        "p": p, "z": z, "w": w, "logits": logits, "S": S, "W": W, "H": H, "mask": mask,
        "n_tok": n_tok, "pooled": pooled, "wc": wc_cache,
        "q_cat": q_cat, "alpha_cat": alpha_cat, "U_cat": U_cat,
        "q_loc": q_loc, "alpha_loc": alpha_loc, "U_loc": U_loc,
        "C": C, "fc": fc, "fc_cache": fc_cache, "gc": gc, "gc_cache": gc_cache,
        "fl": fl, "fl_cache": fl_cache, "gl": gl, "gl_cache": gl_cache, "st_cache": st_cache,
        "skip": skip,
    }


# ---------------------------------------------------------------------------
# per-op helpers (single request / entity), mostly for inspection and tests


def embed_tokens(tokens: Sequence[str], params, cfg: ModelConfig) -> np.ndarray:
    return params["emb"][token_ids(tokens, cfg.vocab_buckets)]


def module_attention(token_embs: np.ndarray, module: str, params) -> tuple[np.ndarray, np.ndarray]:
    H = token_embs[None]
    q, alpha, _ = attend(params, module, H, np.ones(H.shape[:2], dtype=H.dtype))
    return q[0], alpha[0]


@dataclass(frozen=True)
class ModuleWeights:
    w_cat: float
    w_loc: float
    w_text: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.w_cat, self.w_loc, self.w_text)


@dataclass(frozen=True)
class ModuleScores:
    s_cat: float
    s_loc: float
    s_text: float


def compute_module_weights(token_embs: np.ndarray, params) -> ModuleWeights:
    out, _ = mlp_forward(params, "wc", token_embs.mean(axis=0))
    w = _softmax(out)
    return ModuleWeights(*(float(v) for v in w))


def category_score(category, attended_cat: np.ndarray, params, cfg: ModelConfig) -> float:
    C = category_embeddings(params, cfg)
    fc, _ = mlp_forward(params, "cat_ent", C[CATEGORIES.index(category)])
    gc, _ = mlp_forward(params, "cat_req", attended_cat)
    return float(fc @ gc)


def location_score(loc_features: np.ndarray, attended_loc: np.ndarray, params) -> float:
    fl, _ = mlp_forward(params, "loc_feat", np.asarray(loc_features, dtype=params["emb"].dtype))
    gl, _ = mlp_forward(params, "loc_req", attended_loc)
    return float(fl @ gl)


def text_score(text_features: np.ndarray, params) -> float:
    out, _ = mlp_forward(params, "text", np.asarray(text_features, dtype=params["emb"].dtype))
    return float(out[0])


def fuse(weights: ModuleWeights, scores: ModuleScores) -> float:
    z = weights.w_cat * scores.s_cat + weights.w_loc * scores.s_loc + weights.w_text * scores.s_text
    return float(sigmoid(np.array([z], dtype=np.float64))[0])


def module_skip(weights: ModuleWeights, eps: float) -> set[str]:
    """Modules whose weight falls below ``eps``; their scores count as 0."""
    if not 0.0 <= eps < 1.0 / 3.0:
        raise ValueError("eps must lie in [0, 1/3)")
    return {m for m, w in zip(MODULES, weights.as_tuple()) if w < eps}


# ---------------------------------------------------------------------------
# prediction


@dataclass
class Prediction:
    entity_ids: list[int]
    probabilities: list[float]
    argmax_id: int
    selected_ids: set[int]
    explain: Optional[dict] = None


def argmax_lowest_id(entity_ids: Sequence[int], scores: Sequence[float]) -> int:
    best = None
    for eid, s in zip(entity_ids, scores):
        if best is None or s > best[1] or (s == best[1] and eid < best[0]):
            best = (eid, s)
    if best is None:
        raise NoCandidates("no candidates")
    return best[0]


def _prediction(enc: EncodedSample, probs: np.ndarray, threshold: float) -> Prediction:
    ids = [int(i) for i in enc.entity_ids]
    pr = [float(p) for p in probs]
    return Prediction(entity_ids=ids, probabilities=pr, argmax_id=argmax_lowest_id(ids, pr),
                      selected_ids={i for i, p in zip(ids, pr) if p > threshold})


def predict_encoded(params, encoded: Sequence[EncodedSample], cfg: ModelConfig,
                    threshold: Optional[float] = None, modules: Iterable[str] = MODULES,
                    batch_size: int = 256) -> list[Prediction]:
    threshold = cfg.threshold if threshold is None else threshold
    modules = tuple(modules)
    out: list[Prediction] = []
    for start in range(0, len(encoded), batch_size):
        chunk = encoded[start:start + batch_size]
        fw = forward(params, make_batch(chunk, dtype=params["emb"].dtype), cfg, modules=modules)
        p = fw["p"]
        offset = 0
        for enc in chunk:
            n = len(enc.entity_ids)
            out.append(_prediction(enc, p[offset:offset + n], threshold))
            offset += n
    return out


def resolve(request: Request, sample: Sample, params, cfg: ModelConfig, threshold: Optional[float] = None,
            explain: bool = False, skip_eps: float = 0.0, modules: Iterable[str] = MODULES) -> Prediction:
    """Score every candidate of ``sample`` against ``request``."""
    if not sample.candidates:
        raise NoCandidates("sample has no candidates")
    if request is not sample.request:
        sample = Sample(request=request, candidates=sample.candidates, gold_ids=sample.gold_ids,
                        subset=sample.subset, screen=sample.screen, meta=sample.meta)
    threshold = cfg.threshold if threshold is None else threshold
    enc = encode_sample(sample, cfg)
    batch = make_batch([enc], dtype=params["emb"].dtype)
    skip: set[str] = set()
    if skip_eps > 0:
        fw0 = forward(params, batch, cfg, modules=modules)
        skip = module_skip(ModuleWeights(*(float(v) for v in fw0["w"][0])), skip_eps)
    fw = forward(params, batch, cfg, modules=modules, skip=skip)
    pred = _prediction(enc, fw["p"], threshold)
    if explain:
        pred.explain = {
            "module_weights": dict(zip(MODULES, (float(v) for v in fw["w"][0]))),
            "module_scores": [dict(zip(MODULES, (float(v) for v in row))) for row in fw["S"]],
            "attention": {
                "cat": dict_pairs(request.tokens, fw["alpha_cat"][0]),
                "loc": dict_pairs(request.tokens, fw["alpha_loc"][0]),
            },
            "skipped_modules": sorted(skip),
        }
    return pred


def dict_pairs(tokens: Sequence[str], alpha: np.ndarray) -> list[list]:
    return [[t, float(a)] for t, a in zip(tokens, alpha[:len(tokens)])]


# ---------------------------------------------------------------------------
# model file

MAGIC = b"SRRMODEL"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


class BadMagic(ModelFormatError):
    pass


class VersionMismatch(ModelFormatError):
    pass


class ShapeMismatch(ModelFormatError):
    pass


def serialize(params: dict[str, np.ndarray], cfg: ModelConfig) -> bytes:
    """Magic, version, JSON config block, then float32 LE tensors with shape headers."""
    shapes = param_shapes(cfg)
    cfg_blob = json.dumps(cfg.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(cfg_blob)), cfg_blob,
             struct.pack("<I", len(shapes))]
    for name, shape in shapes.items():
        arr = params[name]
        if arr.shape != shape:
            raise ShapeMismatch(f"{name}: expected {shape}, got {arr.shape}")
        parts.append(struct.pack("<I", len(shape)))
        parts.append(struct.pack(f"<{len(shape)}I", *shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> tuple[dict[str, np.ndarray], ModelConfig]:
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagic("not a resolver model file")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise ShapeMismatch("model file truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    version, cfg_len = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, expected {FORMAT_VERSION}")
    cfg = ModelConfig.from_dict(json.loads(take(cfg_len).decode("utf-8")))
    shapes = param_shapes(cfg)
    (count,) = struct.unpack("<I", take(4))
    if count != len(shapes):
        raise ShapeMismatch(f"{count} tensors in file, config needs {len(shapes)}")
    params = {}
    for name, shape in shapes.items():
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if tuple(dims) != shape:
            raise ShapeMismatch(f"{name}: file has {dims}, config needs {shape}")
        n = int(np.prod(shape))
        params[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
    if pos != len(blob):
        raise ShapeMismatch(f"{len(blob) - pos} trailing bytes after last tensor")
    return params, cfg


def save_model(path, params, cfg: ModelConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(params, cfg))


def load_model(path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
