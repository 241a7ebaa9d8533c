"""Seeded toy e-commerce data: product/review corpora, a phrase pool, association graphs."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .assocgraph import AssociationGraph
from .phrases import PhrasePool
from .textcorpus import Corpus, Document, tokenize

CATEGORIES = {
    "electronics": dict(
        nouns="laptop tablet charger monitor keyboard speaker camera router headset adapter".split(),
        adjs="wireless portable digital compact fast slim bright powerful".split(),
        brands="voltix nexon aurion".split(),
        phrases=["memory card", "usb cable", "power bank", "screen protector", "hard disk drive",
                 "noise cancelling headphones", "bluetooth speaker"],
        uses="gaming travel office streaming".split(),
    ),
    "kitchen": dict(
        nouns="skillet kettle blender knife grater slicer chopper toaster spatula colander".split(),
        adjs="stainless nonstick sharp sturdy durable ceramic heavy sleek".split(),
        brands="cookwell chefora panly".split(),
        phrases=["cast iron", "cutting board", "mandoline slicer", "food processor",
                 "measuring cups", "dish rack", "vegetable peeler"],
        uses="cooking baking dinner meals".split(),
    ),
    "outdoor": dict(
        nouns="tent backpack lantern compass hammock stove cooler tarp boots jacket".split(),
        adjs="waterproof lightweight rugged insulated foldable breathable warm tough".split(),
        brands="trailon peakrest wildgear".split(),
        phrases=["sleeping bag", "fishing tackle", "trekking poles", "camp chair",
                 "water filter", "rain fly", "head lamp"],
        uses="camping hiking fishing climbing".split(),
    ),
    "toys": dict(
        nouns="puzzle robot doll blocks kite train plush drone figure car".split(),
        adjs="colorful educational fun cute safe interactive mini giant".split(),
        brands="playzo kidora toyvia".split(),
        phrases=["building blocks", "remote control", "action figure", "board game",
                 "stuffed animal", "beam saber", "augmented reality"],
        uses="kids toddlers parties learning".split(),
    ),
}

TITLE_TEMPLATES = [
    "{brand} {adj} {phrase} {noun}",
    "{adj} {noun} with {phrase}",
    "{brand} {noun} {phrase} for {use}",
    "{brand} {adj} {noun}",
]
DESC_TEMPLATES = [
    "this {adj} {noun} comes with a {phrase} and is great for {use} .",
    "the {phrase} makes this {noun} perfect for {use} .",
    "a {adj} {noun} from {brand} with {phrase} included .",
    "enjoy {use} with the {adj} {phrase} and a {noun2} .",
]
REVIEW_TEMPLATES = [
    "i bought this {noun} for {use} and the {phrase} works great .",
    "the {phrase} is {opinion} , my {noun} arrived fast .",
    "{opinion} {noun} , would buy the {phrase} again .",
    "not sure about the {noun} but the {phrase} is {opinion} .",
]
OPINIONS = "excellent awful amazing decent poor solid".split()


def _fill(template, cat, rng):
    profile = CATEGORIES[cat]
    pick = lambda xs: xs[int(rng.integers(len(xs)))]
    nouns = profile["nouns"]
    return template.format(
        brand=pick(profile["brands"]), adj=pick(profile["adjs"]), noun=pick(nouns), noun2=pick(nouns),
        phrase=pick(profile["phrases"]), use=pick(profile["uses"]), opinion=pick(OPINIONS),
    )


def make_products(n: int, seed: int = 0, categories=None, prefix: str = "p"):
    """Return ``(corpus, category_of_each_doc)``."""
    rng = np.random.default_rng(seed)
    cats = list(categories or CATEGORIES)
    docs, labels = [], []
    for i in range(n):
        cat = cats[int(rng.integers(len(cats)))]
        title = _fill(TITLE_TEMPLATES[int(rng.integers(len(TITLE_TEMPLATES)))], cat, rng)
        desc = _fill(DESC_TEMPLATES[int(rng.integers(len(DESC_TEMPLATES)))], cat, rng)
        docs.append(Document(f"{prefix}{i:05d}", "product", tokenize(title), tokenize(desc)))
        labels.append(cat)
    return Corpus(docs), labels


def make_reviews(n: int, product_ids, seed: int = 0, categories=None):
    rng = np.random.default_rng(seed + 7919)
    cats = list(categories or CATEGORIES)
    docs = []
    for i in range(n):
        cat = cats[int(rng.integers(len(cats)))]
        text = _fill(REVIEW_TEMPLATES[int(rng.integers(len(REVIEW_TEMPLATES)))], cat, rng)
        pid = product_ids[int(rng.integers(len(product_ids)))] if product_ids else ""
        docs.append(Document(f"r{i:05d}", "review", body=tokenize(text), product_id=pid))
    return Corpus(docs)


def make_phrase_pool(seed: int = 0) -> PhrasePool:
    """The generator's domain phrases, scored uniformly in [0.5, 1]."""
    rng = np.random.default_rng(seed + 104729)
    pool = PhrasePool()
    for profile in CATEGORIES.values():
        for ph in profile["phrases"]:
            pool.add(ph.split(), round(float(rng.uniform(0.5, 1.0)), 6))
    return pool


def make_toy_corpus(n_lines: int = 1000, seed: int = 0, review_fraction: float = 0.3):
    """Products plus reviews totalling ``n_lines`` documents."""
    n_rev = int(round(n_lines * review_fraction))
    products, _ = make_products(n_lines - n_rev, seed)
    reviews = make_reviews(n_rev, [d.doc_id for d in products], seed)
    return products, reviews


@dataclass
class Catalog:
    products: Corpus
    graph: AssociationGraph
    cluster: dict[str, int]


CLUSTER_CATEGORIES = ("kitchen", "outdoor")


def make_clustered_catalog(n_products: int = 20, seed: int = 0,
                           categories=CLUSTER_CATEGORIES) -> Catalog:
    """Products split evenly over ``categories``; every same-cluster pair is associated."""
    rng = np.random.default_rng(seed)
    docs, cluster = [], {}
    for i in range(n_products):
        c = i % len(categories)
        cat = categories[c]
        title = _fill(TITLE_TEMPLATES[int(rng.integers(len(TITLE_TEMPLATES)))], cat, rng)
        desc = _fill(DESC_TEMPLATES[int(rng.integers(len(DESC_TEMPLATES)))], cat, rng)
        pid = f"c{i:03d}"
        docs.append(Document(pid, "product", tokenize(title), tokenize(desc)))
        cluster[pid] = c
    ids = [d.doc_id for d in docs]
    edges = [(a, b) for k, a in enumerate(ids) for b in ids[k + 1:] if cluster[a] == cluster[b]]
    return Catalog(Corpus(docs), AssociationGraph.from_edges(edges, ids), cluster)


def write_products(corpus: Corpus, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus:
            fh.write(f"{d.doc_id}\t{' '.join(d.title)}\t{' '.join(d.description)}\n")


def write_reviews(corpus: Corpus, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for d in corpus:
            fh.write(f"{d.doc_id}\t{d.product_id or ''}\t{' '.join(d.body)}\n")
