"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (also repeated in the terminal
summary) and asserts at the criterion's stated tolerance.
"""

import math
import time

import numpy as np
import pytest

import oracles
from ecomlm.encoder import (
    content_embeddings,
    cross_attention,
    encode_batch,
    init_params,
    mlm_loss_node,
    npr_loss_node,
    npr_triple_loss,
    pair_distance,
    pair_distance_node,
    reconstruct,
    ModelConfig,
)
from ecomlm.masking import (
    ACTION_KEEP,
    ACTION_MASK,
    ACTION_RANDOM,
    IGNORE,
    ControllerState,
    Mode,
    corrupt,
    mode_probability,
    phrase_probabilities,
    plan_phrase_mask,
    plan_word_mask,
    sample_phrase,
    select_mode,
    update_controller,
)
from ecomlm.phrases import PhrasePool, PoolSpan, match_phrases
from ecomlm.synthetic import make_clustered_catalog, make_phrase_pool, make_toy_corpus
from ecomlm.tensorcore import Graph, ParameterSet
from ecomlm.textcorpus import CLS, NUM_SPECIAL, SEP, SPECIAL_TOKENS, count_tokens, vocab_from_counts
from ecomlm.trainer import (
    TrainConfig,
    compare_masking_schemes,
    eval_mlm,
    final_eval_loss,
    prepare_examples,
    train_ahm,
    train_joint,
)
from opcases import DIFFERENTIABLE_KINDS, op_gradient_error

# ---- 1. controller arithmetic ---------------------------------------------------------------

W, P = "word", "phrase"
HAND_HISTORIES = [
    [(W, 10.0), (W, 6.0), (W, 5.0)],
    [(P, 8.0), (P, 5.0), (P, 6.0)],
    [(W, 4.0), (P, 4.0), (W, 3.0), (P, 3.0), (W, 2.0), (P, 2.0)],
    [(W, 3.0), (W, 3.0), (W, 3.0)],
    [(P, 1.0), (P, 2.0), (P, 3.0), (W, 5.0), (W, 1.0)],
    [(W, 9.0), (W, 8.0), (P, 9.0), (P, 7.0), (W, 7.5), (P, 6.0)],
    [(W, 2.0), (W, 1.5), (W, 1.25), (W, 1.125), (P, 2.0), (P, 1.0)],
    [(P, 5.0)] * 5,
    [(W, 5.0), (P, 5.0)] * 4,
    [(W, 1e-3), (W, 5e-4), (P, 1e-3), (P, 9e-4)],
    [(W, 100.0), (W, 50.0), (W, 49.0), (P, 100.0), (P, 10.0), (P, 9.0)],
    [(W, 6.0), (W, 5.0), (W, 4.0), (P, 6.0), (P, 5.5), (P, 5.0)],
    [(W, 6.0), (W, 5.0), (W, 4.8), (P, 6.0), (P, 5.0), (P, 4.0)],
    [(P, 3.0), (W, 3.0), (P, 2.0), (W, 2.9), (P, 1.0), (W, 2.85)],
    [(W, 7.0), (W, 7.5), (W, 6.0), (W, 6.5)],
    [(P, 2.0), (P, 1.0), (P, 0.5), (P, 0.25), (W, 2.0), (W, 1.9), (W, 1.8)],
    [(W, 1.0), (W, 0.9), (W, 0.81), (W, 0.729), (P, 1.0), (P, 0.5)],
    [(W, 4.0), (P, 4.0), (W, 4.0), (P, 3.0), (W, 4.0), (P, 3.0)],
    [(P, 10.0), (P, 9.0), (W, 10.0), (W, 9.0), (P, 8.0), (W, 8.0), (P, 7.5), (W, 7.0)],
    [(W, 0.5), (W, 0.4), (P, 0.5), (P, 0.45), (W, 0.35), (P, 0.3), (W, 0.34), (P, 0.2)],
    [(W, 3.0), (W, 2.0), (W, 1.5), (P, 3.0), (P, 2.5), (P, 2.0), (W, 1.4), (P, 1.9)],
    [(P, 12.0), (W, 11.0), (W, 11.0), (P, 12.0), (P, 11.0), (W, 10.0), (W, 10.5)],
]


def run_controller(history, alpha0, t1):
    state = ControllerState(alpha0=alpha0, t1=t1, ema_decay=0.0)
    rng = np.random.default_rng(0)
    alphas = []
    for mode, loss in history:
        select_mode(state, rng)
        alphas.append(state.alpha)
        update_controller(state, Mode(mode), loss)
    return alphas, {W: state.word.eta, P: state.phrase.eta}


def test_criterion_1_controller_arithmetic(verdict):
    start = time.perf_counter()
    worst, cases = 0.0, 0
    for history in HAND_HISTORIES:
        for t1 in (0, 2):
            got, got_eta = run_controller(history, 0.9, t1)
            want, want_eta = oracles.replay_controller(history, 0.9, t1)
            worst = max([worst, *(abs(a - b) for a, b in zip(got, want)),
                         *(abs(got_eta[m] - want_eta[m]) for m in (W, P))])
            cases += 1
    # fixed points named by the criterion
    for eta_w, eta_p, want in ((0.3, 0.3, math.tanh(1.0)), (0.2, 0.1, math.tanh(2.0))):
        worst = max(worst, abs(mode_probability(eta_w, eta_p) - oracles.alpha_from_etas(eta_w, eta_p)),
                    abs(mode_probability(eta_w, eta_p) - want))
    elapsed = time.perf_counter() - start
    ok = (len(HAND_HISTORIES) >= 20 and worst <= 1e-12 and elapsed < 1.0
          and round(mode_probability(0.3, 0.3), 6) == 0.761594
          and round(mode_probability(0.2, 0.1), 6) == 0.964028)
    verdict(1, "controller arithmetic", ok,
            f"{len(HAND_HISTORIES)} histories x 2 warmups, max |diff| {worst:.1e}, {elapsed:.2f}s")


# ---- 2. controller dynamics -----------------------------------------------------------------


def word_plateau_loss(k):
    """Word-mode loss after its k-th selection: converges within about 20 selections."""
    return 2.0 + 3.0 * math.exp(-k / 4.0)


def phrase_falling_loss(k):
    """Phrase-mode loss keeps falling at a steady rate."""
    return 6.0 - 0.02 * k


def test_criterion_2_controller_dynamics(verdict):
    start = time.perf_counter()
    runs, t1, post = 1000, 100, 50
    plateaued_picks, warmup_ok = 0, True
    for seed in range(runs):
        rng = np.random.default_rng(seed)
        state = ControllerState(alpha0=0.9, t1=t1)
        counts = {Mode.WORD: 0, Mode.PHRASE: 0}
        for t in range(1, t1 + post + 1):
            mode = select_mode(state, rng)
            if t <= t1 and state.alpha != 0.9:
                warmup_ok = False
            if t == t1 + post:
                plateaued_picks += mode == Mode.WORD
            counts[mode] += 1
            k = counts[mode]
            loss = word_plateau_loss(k) if mode == Mode.WORD else phrase_falling_loss(k)
            update_controller(state, mode, loss)
    p = plateaued_picks / runs
    elapsed = time.perf_counter() - start
    verdict(2, "controller dynamics", p < 0.1 and warmup_ok and elapsed < 5.0,
            f"P(plateaued mode) = {p:.3f} at t = T1 + {post} over {runs} runs, "
            f"alpha = alpha0 during warm-up: {warmup_ok}, {elapsed:.2f}s")


# ---- 3. masking statistics ------------------------------------------------------------------


def random_sequence(rng):
    n = int(rng.integers(7, 80))
    ids = [CLS] + [int(x) for x in rng.integers(NUM_SPECIAL, 200, n)] + [SEP]
    spans, pos = [], 1
    while pos < n:
        length = int(rng.integers(2, 5))
        if pos + length <= n + 1 and rng.random() < 0.3:
            spans.append(PoolSpan(pos, pos + length, float(rng.uniform(0.5, 1.0)), "domain"))
            pos += length
        else:
            pos += 1
    return ids, n, spans


def test_criterion_3_masking_statistics(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    fractions, actions = {"word": [], "phrase": []}, []
    for i in range(10000):
        ids, n, spans = random_sequence(rng)
        plan = plan_word_mask(ids, rng) if i % 2 == 0 else plan_phrase_mask(ids, spans, rng)
        fractions[plan.mode.value].append(len(plan) / n)
        corrupt(ids, plan, rng, vocab_size=200)
        actions.extend(plan.actions)
    means = {m: float(np.mean(v)) for m, v in fractions.items()}
    overall = float(np.mean(fractions["word"] + fractions["phrase"]))
    frac = np.bincount(actions, minlength=3) / len(actions)
    action_err = max(abs(frac[ACTION_MASK] - 0.8), abs(frac[ACTION_RANDOM] - 0.1),
                     abs(frac[ACTION_KEEP] - 0.1))

    scores = [0.5, 0.62, 0.75, 0.9, 1.0]
    spans = [PoolSpan(i, i + 1, s, "domain") for i, s in enumerate(scores)]
    draws = np.bincount([sample_phrase(spans, rng) for _ in range(40000)], minlength=len(scores))
    analytic = oracles.softmax_rows([scores])[0]
    sample_err = float(np.max(np.abs(draws / draws.sum() - analytic)))
    assert np.allclose(phrase_probabilities(scores), analytic, atol=1e-15)

    elapsed = time.perf_counter() - start
    ok = (all(0.13 <= m <= 0.17 for m in (*means.values(), overall)) and action_err <= 0.02
          and sample_err <= 0.01 and elapsed < 10.0)
    verdict(3, "masking statistics", ok,
            f"mask fraction {overall:.4f} (word {means['word']:.4f}, phrase {means['phrase']:.4f}), "
            f"80/10/10 max dev {action_err:.4f}, phrase sampling max dev {sample_err:.4f}, {elapsed:.1f}s")


# ---- 4. matcher oracle equivalence ----------------------------------------------------------


def test_criterion_4_matcher_oracle(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(77)
    alphabet = list("abcde")
    mismatches = 0
    for _ in range(10000):
        tokens = [alphabet[i] for i in rng.integers(0, len(alphabet), int(rng.integers(0, 21)))]
        pool, phrases = PhrasePool(), []
        for _ in range(int(rng.integers(0, 51))):
            p = [alphabet[i] for i in rng.integers(0, len(alphabet), int(rng.integers(2, 6)))]
            if p not in pool:
                pool.add(p, 0.5)
                phrases.append(p)
        if match_phrases(tokens, pool) != oracles.brute_force_leftmost_longest(tokens, phrases):
            mismatches += 1
    elapsed = time.perf_counter() - start
    verdict(4, "matcher oracle equivalence", mismatches == 0 and elapsed < 30.0,
            f"{mismatches} mismatches in 10000 instances, {elapsed:.1f}s")


# ---- 5. gradient correctness ----------------------------------------------------------------

GRAD_MODEL = ModelConfig(layers=1, hidden=8, heads=2, ffn=12, vocab_size=20, max_len=12)


def sampled_gradient_error(build, params, rng, per_param=3):
    """Taped gradient vs central differences on a random subset of each parameter."""
    params.zero_grad()
    g = Graph(params)
    g.backward(build(g))
    analytic, numeric = [], []
    for name, entry in params.items():
        flat = entry.value.reshape(-1)
        for i in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            cell = flat[i:i + 1]
            numeric.append(oracles.numeric_gradient(lambda: float(build(Graph(params)).value), cell)[0])
            analytic.append(entry.grad.reshape(-1)[i])
    return oracles.relative_error(np.array(analytic), np.array(numeric))


def perturbed_params(seed):
    rng = np.random.default_rng(seed)
    params = init_params(GRAD_MODEL, rng)
    for _, entry in params.items():
        entry.value[...] += rng.normal(0, 0.3, entry.value.shape)
    return params, rng


def mlm_gradient_error(seed):
    params, rng = perturbed_params(seed)
    n = int(rng.integers(3, 8))
    ids = [CLS] + [int(x) for x in rng.integers(NUM_SPECIAL, 20, n)] + [SEP]
    targets = [IGNORE] * len(ids)
    for pos in rng.choice(np.arange(1, n + 1), size=max(1, n // 3), replace=False):
        targets[pos] = int(rng.integers(NUM_SPECIAL, 20))

    def build(g):
        hidden, _ = encode_batch(g, [ids], GRAD_MODEL)
        return mlm_loss_node(g, hidden, targets)[0]

    return sampled_gradient_error(build, params, rng)


def npr_gradient_error(seed):
    rng = np.random.default_rng(seed)
    p = ParameterSet()
    shapes = {"w": (int(rng.integers(1, 5)), 4), "o": (int(rng.integers(1, 5)), 4),
              "n": (int(rng.integers(1, 5)), 4)}
    for name, shape in shapes.items():
        p.add(name, rng.uniform(-1, 1, shape))
    # scale the negative so the margin is active and the whole composition is exercised
    neg_scale = 0.05

    def build(g):
        pos = pair_distance_node(g, g.param("w"), g.param("o"))
        neg = pair_distance_node(g, g.param("w"), g.param("n"))
        return npr_loss_node(g, pos, g.scale(neg, neg_scale))

    p.zero_grad()
    g = Graph(p)
    g.backward(build(g))
    worst = 0.0
    for name in shapes:
        num = oracles.numeric_gradient(lambda: float(build(Graph(p)).value), p[name].value)
        worst = max(worst, oracles.relative_error(p[name].grad, num))
    return worst


def encoder_npr_gradient_error(seed):
    params, rng = perturbed_params(seed)
    seqs = [[CLS] + [int(x) for x in rng.integers(NUM_SPECIAL, 20, int(rng.integers(1, 5)))] + [SEP]
            for _ in range(3)]
    return sampled_gradient_error(lambda g: npr_triple_loss(g, *seqs, GRAD_MODEL)[0], params, rng, 2)


def test_criterion_5_gradient_correctness(verdict):
    start = time.perf_counter()
    seeds = range(100)
    worst = {kind: max(op_gradient_error(kind, s) for s in seeds) for kind in DIFFERENTIABLE_KINDS}
    worst["mlm_loss"] = max(mlm_gradient_error(s) for s in seeds)
    worst["npr_loss"] = max(npr_gradient_error(s) for s in seeds)
    worst["npr_through_encoder"] = max(encoder_npr_gradient_error(s) for s in seeds)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    verdict(5, "gradient correctness", worst[top] < 1e-4 and elapsed < 60.0,
            f"{len(worst)} checks x {len(seeds)} seeds, max rel error {worst[top]:.1e} ({top}), "
            f"{elapsed:.1f}s")


# ---- 6. attention invariants ----------------------------------------------------------------


def test_criterion_6_attention_invariants(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 16))
        w = rng.normal(size=(int(rng.integers(1, 12)), d)) * rng.uniform(0.1, 5)
        o = rng.normal(size=(int(rng.integers(1, 12)), d)) * rng.uniform(0.1, 5)
        m = cross_attention(w, o)
        worst = max(worst, np.max(np.abs(m.A.sum(axis=1) - 1)), np.max(np.abs(m.B.sum(axis=0) - 1)))
    w, o = np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])
    m = cross_attention(w, o)
    w_rec, o_rec = reconstruct(m.A, m.B, w, o)
    swap = bool(np.array_equal(w_rec, o) and np.array_equal(o_rec, w))
    dist = pair_distance(w, o)
    elapsed = time.perf_counter() - start
    verdict(6, "attention invariants", worst <= 1e-9 and swap and dist == 4.0 and elapsed < 5.0,
            f"max normalization error {worst:.1e} over 1000 pairs, "
            f"swap reconstruction exact: {swap}, distance {dist}, {elapsed:.2f}s")


# ---- 7. end-to-end masking-only toy run -----------------------------------------------------


@pytest.mark.slow
def test_criterion_7_ahm_toy_run(verdict):
    start = time.perf_counter()
    products, reviews = make_toy_corpus(1000, seed=0)
    held_products, held_reviews = make_toy_corpus(200, seed=99)
    vocab = vocab_from_counts(count_tokens([products, reviews]), 1, 512)
    pool = make_phrase_pool()
    config = TrainConfig(batch_size=16, lr=1e-3, ahm_steps=2000, t1_iters=200, log_every=0)
    trainer = train_ahm([products, reviews], pool, config, vocab)
    losses = [float(r[3]) for r in trainer.metrics]
    drop = 1 - np.mean(losses[-100:]) / np.mean(losses[:10])
    held = (prepare_examples(held_products, vocab, pool, config.max_len)
            + prepare_examples(held_reviews, vocab, pool, config.max_len))
    res = eval_mlm(trainer.params, trainer.model_config, held, Mode.WORD, seed=config.eval_seed)
    chance = 1 / len(vocab)
    elapsed = time.perf_counter() - start
    ok = len(vocab) <= 512 and drop >= 0.40 and res.accuracy > 5 * chance and elapsed < 600
    verdict(7, "masking-only toy run", ok,
            f"|V| = {len(vocab)}, loss drop {drop:.1%} over {len(losses)} steps, held-out accuracy "
            f"{res.accuracy:.3f} = {res.accuracy / chance:.0f}x chance, {elapsed:.0f}s")


# ---- 8. end-to-end neighbour reconstruction toy run -----------------------------------------


def shared_token_alignment(examples, embeddings, edges):
    """Fraction of shared-token rows whose alpha argmax lands on the same token."""
    hits = total = 0
    for a, b in edges:
        ta = [t for t in examples[a].seq.surface if t not in SPECIAL_TOKENS]
        tb = [t for t in examples[b].seq.surface if t not in SPECIAL_TOKENS]
        A = cross_attention(embeddings[a], embeddings[b]).A
        for i, tok in enumerate(ta):
            if tok in tb:
                total += 1
                hits += tb[int(A[i].argmax())] == tok
    return hits / total, total


@pytest.fixture(scope="module")
def npr_run():
    start = time.perf_counter()
    catalog = make_clustered_catalog(20, seed=0)
    vocab = vocab_from_counts(count_tokens([catalog.products]), 1, 512)
    pool = make_phrase_pool()
    config = TrainConfig(batch_size=8, lr=1e-3, ahm_steps=2000, joint_steps=1000, t1_iters=20,
                         log_every=0)
    trainer = train_ahm([catalog.products], pool, config, vocab)
    trainer = train_joint(catalog.products, catalog.graph, config, trainer, pool)
    return catalog, vocab, pool, config, trainer, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_8_npr_toy_run(verdict, npr_run):
    catalog, vocab, pool, config, trainer, elapsed = npr_run
    examples = {e.seq.doc_id: e for e in prepare_examples(catalog.products, vocab, pool, config.max_len)}
    emb = {k: content_embeddings(e.seq.ids, trainer.params, trainer.model_config)
           for k, e in examples.items()}
    pos = np.mean([pair_distance(emb[a], emb[b]) for a, b in catalog.graph.edges])
    ids = list(examples)
    neg = np.mean([pair_distance(emb[a], emb[b]) for a in ids for b in ids
                   if catalog.cluster[a] != catalog.cluster[b]])
    align, rows = shared_token_alignment(examples, emb, catalog.graph.edges)
    ok = pos < neg and align >= 0.70 and elapsed < 600
    verdict(8, "neighbour reconstruction toy run", ok,
            f"positive distance {pos:.3f} vs negative {neg:.3f}, shared-token alignment "
            f"{align:.1%} of {rows} rows (needs >= 70%), {elapsed:.0f}s")


@pytest.mark.slow
def test_triplet_loss_trends_to_zero_on_catalog(npr_run):
    trainer = npr_run[4]
    npr = [float(r[4]) for r in trainer.metrics if r[1] == "joint"]
    tail = float(np.mean(npr[-100:]))
    print(f"\ntriplet loss: first-100 mean {np.mean(npr[:100]):.3f}, final-100 mean {tail:.3f}")
    assert tail < 0.2


# ---- 9. masking-scheme comparison -----------------------------------------------------------


@pytest.mark.slow
def test_criterion_9_scheme_comparison(verdict):
    start = time.perf_counter()
    products, reviews = make_toy_corpus(1000, seed=0)
    held_products, held_reviews = make_toy_corpus(200, seed=99)
    vocab = vocab_from_counts(count_tokens([products, reviews]), 1, 512)
    pool = make_phrase_pool()
    config = TrainConfig(batch_size=16, lr=1e-3, ahm_steps=1000, t1_iters=100, log_every=0)
    train = (prepare_examples(products, vocab, pool, config.max_len)
             + prepare_examples(reviews, vocab, pool, config.max_len))
    held = (prepare_examples(held_products, vocab, pool, config.max_len)
            + prepare_examples(held_reviews, vocab, pool, config.max_len))
    curves = compare_masking_schemes(train, held, config, vocab, eval_every=250)
    final = {scheme: final_eval_loss(rows) for scheme, rows in curves.items()}
    elapsed = time.perf_counter() - start
    ok = final["ahm"] <= max(final["word"], final["phrase"]) and elapsed < 1800
    verdict(9, "masking-scheme comparison", ok,
            ", ".join(f"{k} {v:.4f}" for k, v in final.items()) + f", {elapsed:.0f}s")


# ---- 10. resume determinism -----------------------------------------------------------------


def test_criterion_10_resume_determinism(verdict, tmp_path):
    start = time.perf_counter()
    products, reviews = make_toy_corpus(200, seed=4)
    vocab = vocab_from_counts(count_tokens([products, reviews]), 1, 512)
    pool = make_phrase_pool()
    config = TrainConfig(layers=1, hidden=32, heads=2, ffn=64, batch_size=8, ahm_steps=100,
                         t1_iters=10, log_every=0, seed=9)
    full = train_ahm([products, reviews], pool, config, vocab)
    first = TrainConfig.from_mapping({"ahm_steps": 50, "out": str(tmp_path / "half")}, config)
    train_ahm([products, reviews], pool, first, vocab)
    resumed = train_ahm([products, reviews], pool, config, vocab, resume=str(tmp_path / "half"))
    worst = max(float(np.max(np.abs(full.params[n].value - resumed.params[n].value)))
                for n in full.params.names())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and resumed.step == 100 and elapsed < 60
    verdict(10, "resume determinism", ok,
            f"max |param diff| {worst:.1e} after 50 + 50 vs 100 steps, {elapsed:.1f}s")
