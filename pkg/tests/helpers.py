"""Small shared fixtures for trainer, CLI and acceptance tests."""

from __future__ import annotations

from ecomlm.synthetic import make_phrase_pool, make_toy_corpus
from ecomlm.textcorpus import count_tokens, vocab_from_counts
from ecomlm.trainer import TrainConfig

TINY_MODEL = dict(layers=1, hidden=16, heads=2, ffn=32, max_len=48)


def tiny_setup(n_lines=60, seed=0, **overrides):
    products, reviews = make_toy_corpus(n_lines, seed=seed)
    vocab = vocab_from_counts(count_tokens([products, reviews]), 1, 512)
    pool = make_phrase_pool(seed)
    values = dict(TINY_MODEL, batch_size=4, lr=1e-3, ahm_steps=10, joint_steps=10,
                  t1_iters=3, log_every=0, seed=seed)
    values.update(overrides)
    return products, reviews, vocab, pool, TrainConfig.from_mapping(values)
