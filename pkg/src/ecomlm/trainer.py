"""Optimization loop: AHM-only phase, joint AHM + NPR phase, evaluation, checkpoints."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt
from .assocgraph import AssociationGraph, sample_negative, sample_pair
from .encoder import (
    ModelConfig,
    cls_logits_node,
    encode_batch,
    init_head,
    init_params,
    mlm_loss_node,
    npr_triple_loss,
    token_logits_node,
)
from .fileio import DataError, write_csv
from .masking import (
    IGNORE,
    TRACE_HEADER,
    ControllerState,
    Mode,
    corrupt,
    maskable_positions,
    plan_phrase_mask,
    plan_word_mask,
    select_mode,
    trace_row,
    update_controller,
)
from .phrases import PhrasePool, PoolSpan, build_temp_pool
from .tensorcore import Graph, ParameterSet, global_grad_norm
from .textcorpus import Corpus, PosTagger, TokenSequence, Vocabulary, make_sequence

logger = logging.getLogger(__name__)

PHASE_AHM = "ahm_only"
PHASE_JOINT = "joint"

METRICS_HEADER = ["step", "phase", "mode", "loss_ahm", "loss_npr", "alpha", "eta_w", "eta_p", "lr", "mlm_acc"]


@dataclass
class TrainConfig:
    # data paths
    products: str = ""
    reviews: str = ""
    vocab: str = ""
    pool: str = ""
    graph: str = ""
    pos_lexicon: str = ""
    out: str = ""
    metrics: str = ""
    trace: str = ""
    # model
    layers: int = 2
    hidden: int = 64
    heads: int = 2
    ffn: int = 128
    max_len: int = 128
    init_std: float = 0.02
    # optimization
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0
    # masking
    masking: str = "ahm"
    mask_rate: float = 0.15
    alpha0: float = 0.9
    t1_iters: int = 100
    ema_decay: float = 0.9
    rng_seed: int = -1
    # schedule
    ahm_steps: int = 1000
    joint_steps: int = 1000
    npr_weight: float = 1.0
    npr_pairs: int = 1
    checkpoint_each_epoch: bool = True
    log_every: int = 50
    eval_seed: int = 1234

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if not self.lr > 0:
            raise DataError("lr must be > 0")
        if self.ahm_steps < 0 or self.joint_steps < 0:
            raise DataError("phase lengths must be >= 0")
        if self.masking not in ("ahm", "word", "phrase"):
            raise DataError("masking must be one of ahm, word, phrase")
        if self.npr_weight < 0:
            raise DataError("npr_weight must be >= 0")

    @property
    def masking_seed(self) -> int:
        return self.seed if self.rng_seed < 0 else self.rng_seed

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(self.layers, self.hidden, self.heads, self.ffn, vocab_size,
                           self.max_len, self.init_std)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_mapping(cls, values: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        """Build from string values; unknown keys raise :class:`DataError`."""
        kw = (base or cls()).to_dict()
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise DataError(f"unknown config key {key!r}")
            kw[key] = _coerce(key, raw, types[key])
        return cls(**kw)

    @classmethod
    def from_file(cls, path, overrides: dict | None = None) -> "TrainConfig":
        return cls.from_mapping({**read_config_file(path), **(overrides or {})})


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        if typ in ("bool", bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
    except ValueError:
        raise DataError(f"config key {key!r}: cannot parse {raw!r}") from None
    return raw


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in text.split("=", 1))
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# examples


@dataclass
class Example:
    seq: TokenSequence
    spans: list[PoolSpan]
    source: str  # "product" | "review"


def prepare_examples(corpus: Corpus, vocab: Vocabulary, pool: PhrasePool | None,
                     max_len: int = 128, tagger: PosTagger | None = None) -> list[Example]:
    """Encode documents and precompute each sequence's temporary phrase pool."""
    tagger = tagger or PosTagger()
    pool = pool if pool is not None else PhrasePool()
    out = []
    for doc in corpus:
        seq = make_sequence(doc.content_tokens(), vocab, max_len, tagger, doc.doc_id, doc.kind)
        if not maskable_positions(seq.ids):
            continue
        out.append(Example(seq, build_temp_pool(seq, pool), doc.kind))
    return out


def plan_for(example: Example, mode: Mode, rng: np.random.Generator, rate: float):
    if mode == Mode.WORD:
        return plan_word_mask(example.seq, rng, rate)
    return plan_phrase_mask(example.seq, example.spans, rng, rate)


def masked_batch(examples: Sequence[Example], mode: Mode, rng: np.random.Generator,
                 vocab_size: int, rate: float = 0.15):
    inputs, targets = [], []
    for ex in examples:
        plan = plan_for(ex, mode, rng, rate)
        ids, tgt = corrupt(ex.seq.ids, plan, rng, vocab_size)
        inputs.append(ids)
        targets.extend(tgt)
    return inputs, targets


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: ParameterSet, t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, clip_norm: float | None = 1.0) -> float:
    """Bias-corrected Adam update (step number ``t`` >= 1) after global-norm clipping.

    Returns the pre-clipping gradient norm.
    """
    for name, e in params.items():
        if not np.all(np.isfinite(e.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    norm = global_grad_norm(params)
    scale = 1.0
    if clip_norm is not None and clip_norm > 0 and norm > clip_norm:
        scale = clip_norm / norm
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for _, e in params.items():
        g = e.grad * scale if scale != 1.0 else e.grad
        e.m *= beta1
        e.m += (1.0 - beta1) * g
        e.v *= beta2
        e.v += (1.0 - beta2) * g * g
        e.value -= lr * (e.m / c1) / (np.sqrt(e.v / c2) + eps)
    return norm


# ---------------------------------------------------------------------------
# trainer


def _rng_state(rng):
    return rng.bit_generator.state


def _rng_from_state(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class Trainer:
    def __init__(self, config: TrainConfig, vocab: Vocabulary, params: ParameterSet | None = None):
        self.config = config
        self.vocab = vocab
        self.model_config = config.model_config(len(vocab))
        init_rng = np.random.default_rng(config.seed)
        self.params = params if params is not None else init_params(self.model_config, init_rng)
        fixed = None if config.masking == "ahm" else Mode(config.masking)
        self.controller = ControllerState(config.alpha0, config.t1_iters, config.ema_decay, fixed)
        self.data_rng = np.random.default_rng([config.seed, 1])
        self.mask_rng = np.random.default_rng([config.masking_seed, 2])
        self.npr_rng = np.random.default_rng([config.seed, 3])
        self.step = 0
        self.adam_t = 0
        self.phase = PHASE_AHM
        self.phase_step = 0
        self.epoch = 0
        self.order: list[int] = []
        self.cursor = 0
        self.metrics: list[list] = []
        self.trace: list[list] = []
        self.npr_sources: list[str] = []

    # data order

    def start_phase(self, phase: str, n_examples: int):
        self.phase = phase
        self.phase_step = 0
        self.epoch = 0
        self._new_epoch(n_examples)

    def _new_epoch(self, n):
        self.order = [int(i) for i in self.data_rng.permutation(n)]
        self.cursor = 0

    def next_batch(self, examples: Sequence[Example]) -> tuple[list[Example], bool]:
        if len(self.order) != len(examples):
            raise DataError("example set does not match the recorded data order")
        batch, wrapped = [], False
        while len(batch) < min(self.config.batch_size, len(examples)):
            if self.cursor >= len(self.order):
                self.epoch += 1
                wrapped = True
                self._new_epoch(len(examples))
            batch.append(examples[self.order[self.cursor]])
            self.cursor += 1
        return batch, wrapped

    # one optimization step

    def train_step(self, examples: Sequence[Example], graph: AssociationGraph | None = None,
                   product_index: dict[str, Example] | None = None) -> dict:
        cfg = self.config
        mode = select_mode(self.controller, self.mask_rng)
        alpha = self.controller.alpha
        batch, wrapped = self.next_batch(examples)
        inputs, targets = masked_batch(batch, mode, self.mask_rng, len(self.vocab), cfg.mask_rate)

        self.params.zero_grad()
        g = Graph(self.params)
        hidden, _ = encode_batch(g, inputs, self.model_config)
        loss, logits, tgt = mlm_loss_node(g, hidden, targets)
        g.backward(loss)
        loss_ahm = loss.item()
        acc = float((logits.value.argmax(axis=1) == tgt).mean())

        loss_npr = None
        if graph is not None:
            total = 0.0
            for _ in range(cfg.npr_pairs):
                a, b = sample_pair(graph, self.npr_rng)
                neg = sample_negative(graph, a, self.npr_rng)
                exs = [product_index[x] for x in (a, b, neg)]
                for ex in exs:
                    if ex.source != "product":
                        raise DataError(f"NPR sample {ex.seq.doc_id!r} is not from the product corpus")
                    self.npr_sources.append(ex.source)
                g2 = Graph(self.params)
                l_npr, _, _ = npr_triple_loss(g2, exs[0].seq.ids, exs[1].seq.ids, exs[2].seq.ids,
                                              self.model_config)
                if cfg.npr_weight > 0:
                    g2.backward(l_npr, seed=cfg.npr_weight / cfg.npr_pairs)
                total += l_npr.item()
            loss_npr = total / cfg.npr_pairs

        self.adam_t += 1
        adam_step(self.params, self.adam_t, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip_norm)
        update_controller(self.controller, mode, loss_ahm)
        self.step += 1
        self.phase_step += 1
        row = [self.step, self.phase, mode.value, repr(loss_ahm),
               "" if loss_npr is None else repr(loss_npr), repr(alpha),
               repr(self.controller.eta_w), repr(self.controller.eta_p), repr(cfg.lr), repr(acc)]
        self.metrics.append(row)
        tr = trace_row(self.controller, mode)
        tr[0] = self.step
        tr[-1] = repr(alpha)
        self.trace.append(tr)
        return {"step": self.step, "mode": mode, "alpha": alpha, "loss_ahm": loss_ahm,
                "loss_npr": loss_npr, "mlm_acc": acc, "epoch_end": wrapped}

    # phases

    def run(self, examples: Sequence[Example], steps: int, phase: str = PHASE_AHM,
            graph: AssociationGraph | None = None, product_index: dict | None = None,
            callback=None) -> "Trainer":
        """Train until ``steps`` steps of ``phase`` are done (continuing a resumed phase)."""
        if not examples:
            raise DataError("empty training corpus")
        if phase == PHASE_JOINT and (graph is None or graph.edge_count == 0):
            raise DataError("joint training needs a non-empty association graph")
        if self.phase != phase or not self.order:
            self.start_phase(phase, len(examples))
        while self.phase_step < steps:
            info = self.train_step(examples, graph, product_index)
            if callback is not None:
                callback(self, info)
            if self.config.log_every and self.step % self.config.log_every == 0:
                logger.info("step %d %s loss_ahm=%.4f alpha=%.3f", self.step, info["mode"].value,
                            info["loss_ahm"], info["alpha"])
                self.flush_logs()
            if info["epoch_end"] and self.config.checkpoint_each_epoch and self.config.out:
                self.save(self.config.out)
        self.flush_logs()
        if self.config.out:
            self.save(self.config.out)
        return self

    def flush_logs(self):
        if self.config.metrics:
            write_csv(self.config.metrics, METRICS_HEADER, self.metrics)
        if self.config.trace:
            write_csv(self.config.trace, TRACE_HEADER, self.trace)

    # checkpoints

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "adam_t": self.adam_t,
            "phase": self.phase,
            "phase_step": self.phase_step,
            "epoch": self.epoch,
            "cursor": self.cursor,
            "order": self.order,
            "controller": self.controller.to_dict(),
            "data_rng": _rng_state(self.data_rng),
            "mask_rng": _rng_state(self.mask_rng),
            "npr_rng": _rng_state(self.npr_rng),
        }

    def save(self, path):
        config = {**{f"model.{k}": v for k, v in self.model_config.to_dict().items()},
                  **{f"train.{k}": v for k, v in self.config.to_dict().items()}}
        ckpt.save_checkpoint(path, self.params, config, self.state_dict(),
                             {"vocab.txt": self.vocab.to_text()})

    @classmethod
    def load(cls, path, config: TrainConfig | None = None, reset_state: bool = False) -> "Trainer":
        """Restore a trainer; ``config`` overrides the saved training config."""
        params, saved, state = ckpt.load_checkpoint(path)
        vocab = Vocabulary.load(os.path.join(path, "vocab.txt"))
        if config is None:
            train_vals = {k[6:]: v for k, v in saved.items() if k.startswith("train.")}
            config = TrainConfig.from_mapping(train_vals)
        model = ModelConfig.from_dict({k[6:]: v for k, v in saved.items() if k.startswith("model.")})
        trainer = cls(config, vocab, params)
        trainer.model_config = model
        if not reset_state and state:
            trainer.step = state["step"]
            trainer.adam_t = state["adam_t"]
            trainer.phase = state["phase"]
            trainer.phase_step = state["phase_step"]
            trainer.epoch = state["epoch"]
            trainer.cursor = state["cursor"]
            trainer.order = list(state["order"])
            trainer.controller = ControllerState.from_dict(state["controller"])
            trainer.data_rng = _rng_from_state(state["data_rng"])
            trainer.mask_rng = _rng_from_state(state["mask_rng"])
            trainer.npr_rng = _rng_from_state(state["npr_rng"])
            if config.metrics and os.path.exists(config.metrics):
                trainer.metrics = _read_rows(config.metrics, trainer.step)
            if config.trace and os.path.exists(config.trace):
                trainer.trace = _read_rows(config.trace, trainer.step)
        return trainer


def _read_rows(path, max_step):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if r and int(r[0]) <= max_step]


# ---------------------------------------------------------------------------
# pipeline entry points


def load_resources(config: TrainConfig, vocab: Vocabulary | None = None):
    """Read the corpora, vocabulary, tagger and pool named in ``config``."""
    from .textcorpus import read_products, read_reviews

    if not config.products:
        raise DataError("config key 'products' is required")
    products = read_products(config.products)
    reviews = read_reviews(config.reviews) if config.reviews else Corpus([])
    if vocab is None:
        if not config.vocab:
            raise DataError("config key 'vocab' is required")
        vocab = Vocabulary.load(config.vocab)
    pool = PhrasePool.load(config.pool) if config.pool else PhrasePool()
    tagger = PosTagger.from_file(config.pos_lexicon) if config.pos_lexicon else PosTagger()
    return products, reviews, vocab, pool, tagger


def train_ahm(corpora: Sequence[Corpus], pool: PhrasePool, config: TrainConfig, vocab: Vocabulary,
              resume: str | None = None, tagger: PosTagger | None = None, callback=None) -> Trainer:
    """Phase one: AHM alone on every corpus (products and reviews)."""
    examples = []
    for corpus in corpora:
        examples.extend(prepare_examples(corpus, vocab, pool, config.max_len, tagger))
    if not examples:
        raise DataError("empty training corpus")
    trainer = Trainer.load(resume, config) if resume else Trainer(config, vocab)
    return trainer.run(examples, config.ahm_steps, PHASE_AHM, callback=callback)


def train_joint(products: Corpus, graph: AssociationGraph, config: TrainConfig,
                init: "str | Trainer", pool: PhrasePool, tagger: PosTagger | None = None,
                callback=None) -> Trainer:
    """Phase two: AHM on the product corpus plus NPR triples from the association graph."""
    if graph.edge_count == 0:
        raise DataError("association graph is empty")
    trainer = init if isinstance(init, Trainer) else Trainer.load(init, config)
    trainer.config = config
    examples = prepare_examples(products, trainer.vocab, pool, config.max_len, tagger)
    index = {ex.seq.doc_id: ex for ex in examples}
    missing = [n for n in graph.nodes if n not in index]
    if missing:
        raise DataError(f"{len(missing)} graph products have no usable content, e.g. {missing[0]!r}")
    return trainer.run(examples, config.joint_steps, PHASE_JOINT, graph, index, callback)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    loss: float
    accuracy: float
    tokens: int


def eval_mlm(params: ParameterSet, model_config: ModelConfig, examples: Sequence[Example],
             mode: Mode | str, seed: int = 1234, batch_size: int = 64, rate: float = 0.15) -> EvalResult:
    """Mean masked-token NLL and top-1 accuracy under a fixed planning seed."""
    mode = Mode(mode)
    rng = np.random.default_rng(seed)
    nll, correct, count = 0.0, 0, 0
    for start in range(0, len(examples), batch_size):
        batch = examples[start:start + batch_size]
        inputs, targets = masked_batch(batch, mode, rng, model_config.vocab_size, rate)
        g = Graph(params)
        hidden, _ = encode_batch(g, inputs, model_config)
        loss, logits, tgt = mlm_loss_node(g, hidden, targets)
        nll += loss.item() * len(tgt)
        correct += int((logits.value.argmax(axis=1) == tgt).sum())
        count += len(tgt)
    if count == 0:
        raise DataError("no maskable tokens in evaluation corpus")
    return EvalResult(nll / count, correct / count, count)


def compare_masking_schemes(train: Sequence[Example], heldout: Sequence[Example], config: TrainConfig,
                            vocab: Vocabulary, eval_every: int = 0,
                            schemes: Sequence[str] = ("word", "phrase", "ahm")) -> dict:
    """Train one model per masking scheme from the same config and seed.

    Returns ``{scheme: [(step, word_loss, phrase_loss, word_acc, phrase_acc), ...]}``;
    the last row is the final evaluation.
    """
    out = {}
    for scheme in schemes:
        cfg = TrainConfig.from_mapping({"masking": scheme, "out": "", "metrics": "", "trace": ""}, config)
        trainer = Trainer(cfg, vocab)
        rows = []

        def evaluate(tr):
            w = eval_mlm(tr.params, tr.model_config, heldout, Mode.WORD, cfg.eval_seed)
            p = eval_mlm(tr.params, tr.model_config, heldout, Mode.PHRASE, cfg.eval_seed)
            rows.append((tr.step, w.loss, p.loss, w.accuracy, p.accuracy))

        def cb(tr, info):
            if eval_every and tr.step % eval_every == 0 and tr.step < cfg.ahm_steps:
                evaluate(tr)

        trainer.run(train, cfg.ahm_steps, PHASE_AHM, callback=cb)
        evaluate(trainer)
        out[scheme] = rows
    return out


COMPARISON_HEADER = ["scheme", "step", "eval_loss_word", "eval_loss_phrase", "acc_word", "acc_phrase"]


def final_eval_loss(rows) -> float:
    """Hybrid evaluation loss: mean of the word- and phrase-mode losses at the last row."""
    _, lw, lp, _, _ = rows[-1]
    return 0.5 * (lw + lp)


# ---------------------------------------------------------------------------
# fine-tuning heads


def finetune_classify(params: ParameterSet, model_config: ModelConfig, data: Sequence[tuple[list[int], int]],
                      num_classes: int, steps: int = 200, lr: float = 1e-3, batch_size: int = 16,
                      seed: int = 0, head: str = "cls_head", clip_norm: float = 1.0) -> list[float]:
    """Train a [CLS] dense head (and the encoder) with cross entropy; returns per-step accuracy."""
    if head + ".W" not in params:
        init_head(params, head, model_config.hidden, num_classes)
    rng = np.random.default_rng(seed)
    history = []
    for t in range(1, steps + 1):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        batch = [data[i] for i in idx]
        params.zero_grad()
        g = Graph(params)
        hidden, offs = encode_batch(g, [ids for ids, _ in batch], model_config)
        logits = cls_logits_node(g, hidden, offs, head)
        labels = np.array([y for _, y in batch])
        g.backward(g.cross_entropy_from_logits(logits, labels))
        adam_step(params, t, lr, clip_norm=clip_norm)
        history.append(float((logits.value.argmax(axis=1) == labels).mean()))
    return history


def predict_classes(params, model_config, seqs, head="cls_head") -> np.ndarray:
    g = Graph(params)
    hidden, offs = encode_batch(g, seqs, model_config)
    return cls_logits_node(g, hidden, offs, head).value.argmax(axis=1)


def finetune_tokens(params: ParameterSet, model_config: ModelConfig,
                    data: Sequence[tuple[list[int], list[int]]], num_labels: int, steps: int = 200,
                    lr: float = 1e-3, batch_size: int = 16, seed: int = 0, head: str = "tok_head",
                    clip_norm: float = 1.0) -> list[float]:
    """Per-token dense head (BIO-style labelling); labels of IGNORE are skipped."""
    if head + ".W" not in params:
        init_head(params, head, model_config.hidden, num_labels)
    rng = np.random.default_rng(seed)
    history = []
    for t in range(1, steps + 1):
        idx = rng.choice(len(data), size=min(batch_size, len(data)), replace=False)
        batch = [data[i] for i in idx]
        labels = np.concatenate([np.asarray(y) for _, y in batch])
        keep = np.nonzero(labels != IGNORE)[0]
        params.zero_grad()
        g = Graph(params)
        hidden, _ = encode_batch(g, [ids for ids, _ in batch], model_config)
        logits = g.embedding_lookup(token_logits_node(g, hidden, head), keep)
        g.backward(g.cross_entropy_from_logits(logits, labels[keep]))
        adam_step(params, t, lr, clip_norm=clip_norm)
        history.append(float((logits.value.argmax(axis=1) == labels[keep]).mean()))
    return history
