"""Pre-norm transformer encoder, MLM head, cross-attention reconstruction, and task heads.

Graph-level builders (``*_node``) take a :class:`Graph` and return nodes so
losses can be backpropagated; the plain functions evaluate the same builders
on constants and return arrays.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .masking import IGNORE, Mode
from .tensorcore import Graph, Node, ParameterSet
from .textcorpus import NUM_SPECIAL, PAD

MASK_BIAS = -1e9


@dataclass
class ModelConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 2
    ffn: int = 128
    vocab_size: int = 8192
    max_len: int = 128
    init_std: float = 0.02

    def __post_init__(self):
        for f in ("layers", "hidden", "heads", "ffn", "vocab_size", "max_len"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be a positive integer")
        if self.hidden % self.heads:
            raise ValueError("hidden size must be divisible by the number of heads")
        if self.max_len < 2:
            raise ValueError("max_len must be >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name in d:
                kw[f.name] = float(d[f.name]) if f.type in ("float", float) else int(d[f.name])
        return cls(**kw)


def init_params(config: ModelConfig, rng: np.random.Generator) -> ParameterSet:
    """Normal(0, init_std) weights, zero biases, unit layer-norm gains."""
    d, f, V = config.hidden, config.ffn, config.vocab_size
    p = ParameterSet()

    def normal(*shape):
        return rng.normal(0.0, config.init_std, size=shape)

    p.add("tok_emb", normal(V, d))
    p.add("pos_emb", normal(config.max_len, d))
    for i in range(config.layers):
        pre = f"layer{i}."
        p.add(pre + "ln1.g", np.ones(d))
        p.add(pre + "ln1.b", np.zeros(d))
        for name in ("q", "k", "v", "o"):
            p.add(pre + f"attn.W{name}", normal(d, d))
            # no key bias: it shifts every score in a row equally
            if name != "k":
                p.add(pre + f"attn.b{name}", np.zeros(d))
        p.add(pre + "ln2.g", np.ones(d))
        p.add(pre + "ln2.b", np.zeros(d))
        p.add(pre + "ffn.W1", normal(d, f))
        p.add(pre + "ffn.b1", np.zeros(f))
        p.add(pre + "ffn.W2", normal(f, d))
        p.add(pre + "ffn.b2", np.zeros(d))
    p.add("ln_f.g", np.ones(d))
    p.add("ln_f.b", np.zeros(d))
    p.add("mlm.W", normal(d, V))
    return p


# ---------------------------------------------------------------------------
# encoder


def _layer_norm(g: Graph, x: Node, prefix: str) -> Node:
    return g.layer_norm(x) * g.param(prefix + ".g") + g.param(prefix + ".b")


def _attention_bias(batch: Sequence[Sequence[int]]) -> np.ndarray:
    seg = np.concatenate([np.full(len(s), k) for k, s in enumerate(batch)])
    ids = np.concatenate([np.asarray(s) for s in batch])
    allowed = (seg[:, None] == seg[None, :]) & (ids[None, :] != PAD)
    return np.where(allowed, 0.0, MASK_BIAS)


def encode_batch(g: Graph, batch: Sequence[Sequence[int]], config: ModelConfig) -> tuple[Node, list[int]]:
    """Encode several sequences as one stacked ``[sum(n), d]`` node.

    Attention is block-diagonal per sequence and ignores ``[PAD]`` keys.
    Returns the hidden-state node and each sequence's row offset.
    """
    for s in batch:
        if len(s) > config.max_len:
            raise ValueError(f"sequence length {len(s)} exceeds max length {config.max_len}")
        if len(s) == 0:
            raise ValueError("cannot encode an empty sequence")
    ids = np.concatenate([np.asarray(s, dtype=np.int64) for s in batch])
    positions = np.concatenate([np.arange(len(s)) for s in batch])
    offsets = list(np.cumsum([0] + [len(s) for s in batch[:-1]]))
    bias = g.constant(_attention_bias(batch))
    x = g.embedding_lookup(g.param("tok_emb"), ids) + g.embedding_lookup(g.param("pos_emb"), positions)
    d, h = config.hidden, config.heads
    dh = d // h
    inv_sqrt = 1.0 / math.sqrt(dh)
    for i in range(config.layers):
        pre = f"layer{i}."
        a = _layer_norm(g, x, pre + "ln1")
        q = a @ g.param(pre + "attn.Wq") + g.param(pre + "attn.bq")
        k = a @ g.param(pre + "attn.Wk")
        v = a @ g.param(pre + "attn.Wv") + g.param(pre + "attn.bv")
        heads = []
        for j in range(h):
            lo, hi = j * dh, (j + 1) * dh
            qh, kh, vh = g.slice_cols(q, lo, hi), g.slice_cols(k, lo, hi), g.slice_cols(v, lo, hi)
            scores = (qh @ kh.T) * inv_sqrt + bias
            heads.append(g.softmax(scores) @ vh)
        att = heads[0] if h == 1 else g.concat(heads, axis=1)
        x = x + (att @ g.param(pre + "attn.Wo") + g.param(pre + "attn.bo"))
        f = _layer_norm(g, x, pre + "ln2")
        f = g.relu(f @ g.param(pre + "ffn.W1") + g.param(pre + "ffn.b1"))
        x = x + (f @ g.param(pre + "ffn.W2") + g.param(pre + "ffn.b2"))
    return _layer_norm(g, x, "ln_f"), [int(o) for o in offsets]


def encode_sequence(ids: Sequence[int], params: ParameterSet, config: ModelConfig) -> np.ndarray:
    """Final hidden states, one row per input token."""
    g = Graph(params)
    hidden, _ = encode_batch(g, [list(ids)], config)
    return hidden.value


# ---------------------------------------------------------------------------
# masked language model


def mlm_logits_node(g: Graph, hidden: Node, rows: Sequence[int]) -> Node:
    return g.embedding_lookup(hidden, np.asarray(rows, dtype=np.int64)) @ g.param("mlm.W")


def mlm_logits(embeddings: np.ndarray, positions: Sequence[int], params: ParameterSet) -> np.ndarray:
    """Vocabulary distributions (softmax over logits) at ``positions``."""
    g = Graph(params)
    logits = mlm_logits_node(g, g.constant(embeddings), positions)
    return g.softmax(logits).value


def mlm_loss_node(g: Graph, hidden: Node, targets: Sequence[int]) -> tuple[Node, Node, np.ndarray]:
    """Mean NLL over positions whose target is not the ignore sentinel.

    ``targets`` is aligned with the stacked rows of ``hidden``.
    """
    t = np.asarray(targets, dtype=np.int64)
    rows = np.nonzero(t != IGNORE)[0]
    if rows.size == 0:
        raise ValueError("no masked positions; skip this step")
    logits = mlm_logits_node(g, hidden, rows)
    return g.cross_entropy_from_logits(logits, t[rows]), logits, t[rows]


def ahm_step_loss(distributions: np.ndarray, targets: Sequence[int], mode: Mode | str,
                  alpha: float | None = None) -> float:
    """Mean masked-token NLL of the selected mode.

    The alpha weighting between modes is realized by mode sampling, so
    ``alpha`` does not rescale the loss; it is accepted for tracing.
    """
    Mode(mode)
    targets = np.asarray(targets, dtype=np.int64)
    keep = targets != IGNORE
    if not keep.any():
        raise ValueError("no masked positions; skip this step")
    probs = np.asarray(distributions)[keep, targets[keep]]
    return float(-np.log(np.maximum(probs, 1e-300)).mean())


# ---------------------------------------------------------------------------
# neighbour product reconstruction


@dataclass
class CorrelationMatrices:
    A: np.ndarray  # row-normalized, [n_a, n_b]
    B: np.ndarray  # column-normalized, [n_a, n_b]


def cross_attention_node(g: Graph, w: Node, o: Node) -> tuple[Node, Node]:
    scores = w @ o.T
    a = g.softmax(scores)
    b = g.softmax(scores.T).T
    return a, b


def reconstruct_node(g: Graph, a: Node, b: Node, w: Node, o: Node) -> tuple[Node, Node]:
    return a @ o, b.T @ w


def pair_distance_node(g: Graph, w: Node, o: Node) -> Node:
    a, b = cross_attention_node(g, w, o)
    w_rec, o_rec = reconstruct_node(g, a, b, w, o)
    return g.squared_euclidean(w, w_rec) + g.squared_euclidean(o, o_rec)


def npr_loss_node(g: Graph, pos: Node, neg: Node, margin: float = 1.0) -> Node:
    return g.hinge((pos - neg) + g.constant(margin))


def cross_attention(W: np.ndarray, O: np.ndarray) -> CorrelationMatrices:
    if len(W) == 0 or len(O) == 0:
        raise ValueError("cross attention needs non-empty contents")
    g = Graph()
    a, b = cross_attention_node(g, g.constant(W), g.constant(O))
    return CorrelationMatrices(a.value, b.value)


def reconstruct(A: np.ndarray, B: np.ndarray, W: np.ndarray, O: np.ndarray):
    return A @ O, B.T @ W


def pair_distance(W: np.ndarray, O: np.ndarray, W_rec: np.ndarray | None = None,
                  O_rec: np.ndarray | None = None) -> float:
    if W_rec is None or O_rec is None:
        cm = cross_attention(W, O)
        W_rec, O_rec = reconstruct(cm.A, cm.B, W, O)
    return float(((W - W_rec) ** 2).sum() + ((O - O_rec) ** 2).sum())


def npr_loss(pos: float, neg: float, margin: float = 1.0) -> float:
    return max(0.0, margin + pos - neg)


def content_rows(ids: Sequence[int]) -> list[int]:
    """Rows of non-special tokens (the product's content embeddings)."""
    return [i for i, t in enumerate(ids) if t >= NUM_SPECIAL]


def content_embeddings_node(g: Graph, hidden: Node, offset: int, ids: Sequence[int]) -> Node:
    rows = [offset + i for i in content_rows(ids)]
    if not rows:
        rows = list(range(offset, offset + len(ids)))
    return g.embedding_lookup(hidden, rows)


def npr_triple_loss(g: Graph, a_ids, b_ids, neg_ids, config: ModelConfig):
    """Encode (a, b, b-) and return ``(loss, pos_distance, neg_distance)`` nodes."""
    hidden, offs = encode_batch(g, [a_ids, b_ids, neg_ids], config)
    w = content_embeddings_node(g, hidden, offs[0], a_ids)
    o = content_embeddings_node(g, hidden, offs[1], b_ids)
    o_neg = content_embeddings_node(g, hidden, offs[2], neg_ids)
    pos = pair_distance_node(g, w, o)
    neg = pair_distance_node(g, w, o_neg)
    return npr_loss_node(g, pos, neg), pos, neg


def content_embeddings(ids: Sequence[int], params: ParameterSet, config: ModelConfig) -> np.ndarray:
    hidden = encode_sequence(ids, params, config)
    rows = content_rows(ids) or list(range(len(ids)))
    return hidden[rows]


# ---------------------------------------------------------------------------
# fine-tuning heads


def init_head(params: ParameterSet, name: str, hidden: int, n_out: int):
    params.add(f"{name}.W", np.zeros((hidden, n_out)))
    params.add(f"{name}.b", np.zeros(n_out))


def cls_logits_node(g: Graph, hidden: Node, offsets: Sequence[int], head: str = "cls_head") -> Node:
    cls = g.embedding_lookup(hidden, list(offsets))
    return cls @ g.param(head + ".W") + g.param(head + ".b")


def token_logits_node(g: Graph, hidden: Node, head: str = "tok_head") -> Node:
    return hidden @ g.param(head + ".W") + g.param(head + ".b")


def cls_classify(embeddings: np.ndarray, params: ParameterSet, head: str = "cls_head") -> np.ndarray:
    """Class distribution from the first ([CLS]) row."""
    g = Graph(params)
    logits = cls_logits_node(g, g.constant(embeddings), [0], head)
    return g.softmax(logits).value[0]


def token_classify(embeddings: np.ndarray, params: ParameterSet, head: str = "tok_head") -> np.ndarray:
    g = Graph(params)
    return g.softmax(token_logits_node(g, g.constant(embeddings), head)).value
