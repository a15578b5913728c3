"""In-context transformer classifier.

Context rows become tokens ``proj(pad(x)) + label_embed[y]``; query rows
become ``proj(pad(x))``. Context tokens attend to the whole context, each
query token attends to the context and to itself only. Nothing is
positional, so the model treats the context as a set.

Because the context never attends to queries, the two token streams are
computed separately: the context stream once, the query stream against the
context keys/values at every layer. Query-side products use row-stable
matmuls so a query's output does not depend on which other queries share the
batch.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset

CHECKPOINT_FORMAT = "icdistill-ckpt-v1"


class ModelInputError(ValueError):
    pass


@dataclass(frozen=True)
class PfnConfig:
    max_features: int = 10
    max_classes: int = 10
    embed_dim: int = 64
    num_layers: int = 3
    num_heads: int = 4
    ff_dim: int = 128
    context_cap: int = 1000

    def __post_init__(self):
        for name in ("max_features", "max_classes", "embed_dim", "num_layers", "num_heads", "ff_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_classes < 2:
            raise ValueError("max_classes must be >= 2")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.context_cap < 1:
            raise ValueError("context_cap must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


def weight_shapes(cfg: PfnConfig) -> dict[str, tuple]:
    E, F = cfg.embed_dim, cfg.ff_dim
    shapes = {
        "feature_proj.weight": (cfg.max_features, E),
        "feature_proj.bias": (E,),
        "label_embed": (cfg.max_classes, E),
    }
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gain": (E,),
            p + "ln1.bias": (E,),
            p + "attn.wq": (E, E),
            p + "attn.wk": (E, E),
            p + "attn.wv": (E, E),
            p + "attn.wo": (E, E),
            p + "attn.bo": (E,),
            p + "ln2.gain": (E,),
            p + "ln2.bias": (E,),
            p + "ff.w1": (E, F),
            p + "ff.b1": (F,),
            p + "ff.w2": (F, E),
            p + "ff.b2": (E,),
        })
    shapes.update({
        "final_ln.gain": (E,),
        "final_ln.bias": (E,),
        "head.weight": (E, cfg.max_classes),
        "head.bias": (cfg.max_classes,),
    })
    return shapes


class PfnModel:
    """Configuration plus named float64 weight arrays."""

    def __init__(self, config: PfnConfig, weights: dict[str, np.ndarray]):
        expected = weight_shapes(config)
        if set(weights) != set(expected):
            missing = sorted(set(expected) - set(weights))
            extra = sorted(set(weights) - set(expected))
            raise ValueError(f"weight names mismatch: missing={missing} extra={extra}")
        self.config = config
        self.weights = {}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(weights[name], dtype=np.float64)
            if arr.shape != shape:
                raise ValueError(f"weight {name}: shape {arr.shape}, expected {shape}")
            self.weights[name] = arr

    @classmethod
    def init(cls, config: PfnConfig = PfnConfig(), seed: int = 0) -> "PfnModel":
        """Random weights with an exactly zero output head."""
        rng = np.random.default_rng(seed)
        weights = {}
        for name, shape in weight_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if name.startswith("head."):
                weights[name] = np.zeros(shape)
            elif leaf == "gain":
                weights[name] = np.ones(shape)
            elif len(shape) == 1:
                weights[name] = np.zeros(shape)
            elif name == "label_embed":
                weights[name] = rng.normal(0.0, 1.0, shape)
            else:
                weights[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        return cls(config, weights)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        # shares memory with self.weights
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.weights.items()}

    def copy(self) -> "PfnModel":
        return PfnModel(self.config, {k: v.copy() for k, v in self.weights.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())

    # -- checkpoints --------------------------------------------------------

    def to_document(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "config": asdict(self.config),
            "weights": {
                k: {"shape": list(v.shape), "values": v.reshape(-1).tolist()}
                for k, v in self.weights.items()
            },
        }

    @classmethod
    def from_document(cls, doc: dict) -> "PfnModel":
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
        config = PfnConfig(**doc["config"])
        weights = {
            k: np.array(w["values"], dtype=np.float64).reshape(w["shape"])
            for k, w in doc["weights"].items()
        }
        return cls(config, weights)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_document()))

    @classmethod
    def load(cls, path) -> "PfnModel":
        return cls.from_document(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# forward pass


def _check_inputs(model: PfnModel, n_context: int, d: int, num_classes: int, qd: Optional[int]):
    cfg = model.config
    if n_context < 1:
        raise ModelInputError("context is empty")
    if n_context > cfg.context_cap:
        raise ModelInputError(f"context has {n_context} rows, exceeding context_cap={cfg.context_cap}")
    if d > cfg.max_features:
        raise ModelInputError(f"{d} features exceed max_features={cfg.max_features}")
    if num_classes > cfg.max_classes:
        raise ModelInputError(f"{num_classes} classes exceed max_classes={cfg.max_classes}")
    if qd is not None and qd != d:
        raise ModelInputError(f"queries have {qd} features, context has {d}")


def _pad(x: Tensor, width: int) -> Tensor:
    n, d = x.shape
    if d == width:
        return x
    return ad.concat([x, Tensor(np.zeros((n, width - d)))], axis=1)


def _embed(w, x: Tensor, labels, cfg: PfnConfig, rowwise: bool) -> Tensor:
    h = ad.add(ad.matmul(_pad(x, cfg.max_features), w["feature_proj.weight"], rowwise=rowwise),
               w["feature_proj.bias"])
    if labels is not None:
        h = ad.add(h, ad.embed_lookup(w["label_embed"], labels))
    return h


def _attention(w, p: str, a_c: Tensor, a_q: Optional[Tensor], cfg: PfnConfig):
    dh = cfg.head_dim
    inv = 1.0 / math.sqrt(dh)
    qc = ad.matmul(a_c, w[p + "wq"])
    kc = ad.matmul(a_c, w[p + "wk"])
    vc = ad.matmul(a_c, w[p + "wv"])
    if a_q is not None:
        qq = ad.matmul(a_q, w[p + "wq"], rowwise=True)
        kq = ad.matmul(a_q, w[p + "wk"], rowwise=True)
        vq = ad.matmul(a_q, w[p + "wv"], rowwise=True)
    m = a_c.shape[0]
    ctx_heads, qry_heads = [], []
    for h in range(cfg.num_heads):
        lo, hi = h * dh, (h + 1) * dh
        qc_h, kc_h, vc_h = (ad.narrow(t, lo, hi) for t in (qc, kc, vc))
        kcT = ad.transpose(kc_h)
        scores = ad.scale(ad.matmul(qc_h, kcT), inv)
        ctx_heads.append(ad.matmul(ad.softmax(scores), vc_h))
        if a_q is None:
            continue
        qq_h, kq_h, vq_h = (ad.narrow(t, lo, hi) for t in (qq, kq, vq))
        to_ctx = ad.matmul(qq_h, kcT, rowwise=True)
        to_self = ad.reduce_sum(ad.mul(qq_h, kq_h), axis=-1, keepdims=True)
        probs = ad.softmax(ad.scale(ad.concat([to_ctx, to_self], axis=1), inv))
        out = ad.add(
            ad.matmul(ad.narrow(probs, 0, m), vc_h, rowwise=True),
            ad.mul(vq_h, ad.narrow(probs, m, m + 1)),
        )
        qry_heads.append(out)
    o_c = ad.add(ad.matmul(ad.concat(ctx_heads, axis=1), w[p + "wo"]), w[p + "bo"])
    o_q = None
    if a_q is not None:
        o_q = ad.add(ad.matmul(ad.concat(qry_heads, axis=1), w[p + "wo"], rowwise=True), w[p + "bo"])
    return o_c, o_q


def _feed_forward(w, p: str, x: Tensor, rowwise: bool) -> Tensor:
    hidden = ad.gelu(ad.add(ad.matmul(x, w[p + "w1"], rowwise=rowwise), w[p + "b1"]))
    return ad.add(ad.matmul(hidden, w[p + "w2"], rowwise=rowwise), w[p + "b2"])


def _encode(w, cfg: PfnConfig, context_x: Tensor, context_y, query_x: Optional[Tensor]):
    h_c = _embed(w, context_x, context_y, cfg, rowwise=False)
    h_q = _embed(w, query_x, None, cfg, rowwise=True) if query_x is not None else None
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        a_c = ad.layernorm(h_c, w[p + "ln1.gain"], w[p + "ln1.bias"])
        a_q = ad.layernorm(h_q, w[p + "ln1.gain"], w[p + "ln1.bias"]) if h_q is not None else None
        o_c, o_q = _attention(w, p + "attn.", a_c, a_q, cfg)
        h_c = ad.add(h_c, o_c)
        h_c = ad.add(h_c, _feed_forward(w, p + "ff.", ad.layernorm(h_c, w[p + "ln2.gain"], w[p + "ln2.bias"]), False))
        if h_q is not None:
            h_q = ad.add(h_q, o_q)
            f_q = ad.layernorm(h_q, w[p + "ln2.gain"], w[p + "ln2.bias"])
            h_q = ad.add(h_q, _feed_forward(w, p + "ff.", f_q, True))
    return h_c, h_q


def query_logits(
    model: PfnModel,
    context_x: Tensor,
    context_y,
    query_x: Tensor,
    num_classes: int,
    weights: Optional[dict[str, Tensor]] = None,
) -> Tensor:
    """Differentiable ``(q, num_classes)`` logits for ``query_x`` given the context.

    ``weights`` defaults to non-trainable views of the model weights; pass
    ``model.tensors(requires_grad=True)`` to train them.
    """
    cfg = model.config
    context_y = np.asarray(context_y, dtype=np.intp)
    _check_inputs(model, context_x.shape[0], context_x.shape[1], num_classes, query_x.shape[1])
    if context_y.shape != (context_x.shape[0],):
        raise ModelInputError(f"context labels shape {context_y.shape} != ({context_x.shape[0]},)")
    if context_y.size and (context_y.min() < 0 or context_y.max() >= num_classes):
        raise ModelInputError(f"context labels must lie in [0, {num_classes})")
    w = weights if weights is not None else model.tensors()
    _, h_q = _encode(w, cfg, context_x, context_y, query_x)
    h_q = ad.layernorm(h_q, w["final_ln.gain"], w["final_ln.bias"])
    logits = ad.add(ad.matmul(h_q, w["head.weight"], rowwise=True), w["head.bias"])
    return ad.narrow(logits, 0, num_classes, axis=1)


def encode_tokens(model: PfnModel, context: Dataset, queries: np.ndarray) -> np.ndarray:
    """Input token embeddings, context rows first: shape ``(n + q, embed_dim)``."""
    cfg = model.config
    queries = _as_queries(queries, context.d)
    _check_inputs(model, context.n, context.d, context.num_classes, queries.shape[1])
    w = model.tensors()
    h_c = _embed(w, Tensor(context.X), context.y, cfg, rowwise=False)
    if queries.shape[0] == 0:
        return h_c.values.copy()
    h_q = _embed(w, Tensor(queries), None, cfg, rowwise=True)
    return np.concatenate([h_c.values, h_q.values], axis=0)


def _as_queries(queries, d: int) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q.reshape(-1, d) if q.size else np.zeros((0, d))
    if q.ndim != 2:
        raise ModelInputError(f"queries must be 2-D, got shape {q.shape}")
    return q


def predict_proba(
    model: PfnModel,
    context: Dataset,
    queries: np.ndarray,
    chunk_size: int = 2048,
) -> np.ndarray:
    """Class probabilities ``(q, context.num_classes)`` for each query row."""
    queries = _as_queries(queries, context.d)
    C = context.num_classes
    _check_inputs(model, context.n, context.d, C, queries.shape[1])
    if not np.isfinite(queries).all():
        raise ModelInputError("queries contain non-finite values")
    if queries.shape[0] == 0:
        return np.zeros((0, C))
    cx = Tensor(context.X)
    w = model.tensors()
    out = []
    for start in range(0, queries.shape[0], chunk_size):
        logits = query_logits(model, cx, context.y, Tensor(queries[start : start + chunk_size]), C, w)
        out.append(ad.softmax(logits).values)
    return np.concatenate(out, axis=0)


def argmax_labels(proba: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the smallest class
    return np.argmax(np.asarray(proba), axis=1).astype(np.int64)


def predict_label(model: PfnModel, context: Dataset, queries: np.ndarray) -> np.ndarray:
    return argmax_labels(predict_proba(model, context, queries))
