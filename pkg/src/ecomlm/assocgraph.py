"""Undirected product association graph with pair and negative sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .fileio import DataError, atomic_open, open_text

REJECTION_ATTEMPTS = 100


@dataclass
class AssociationGraph:
    nodes: list[str] = field(default_factory=list)
    adj: dict[str, set[str]] = field(default_factory=dict)
    edges: list[tuple[str, str]] = field(default_factory=list)
    dropped: int = 0
    self_loops: int = 0

    @classmethod
    def from_edges(cls, pairs: Iterable[tuple[str, str]], products: Iterable[str] | None = None):
        known = None if products is None else list(dict.fromkeys(products))
        known_set = None if known is None else set(known)
        g = cls()
        seen = set()
        for a, b in pairs:
            if known_set is not None and (a not in known_set or b not in known_set):
                g.dropped += 1
                continue
            if a == b:
                g.self_loops += 1
                continue
            key = (a, b) if a < b else (b, a)
            if key in seen:
                continue
            seen.add(key)
            g.edges.append(key)
        nodes = known if known is not None else sorted({x for e in g.edges for x in e})
        g.nodes = list(nodes)
        g.adj = {n: set() for n in g.nodes}
        for a, b in g.edges:
            g.adj[a].add(b)
            g.adj[b].add(a)
        return g

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    def neighbors(self, node: str) -> set[str]:
        return self.adj.get(node, set())

    def stats(self) -> dict:
        return {"nodes": len(self.nodes), "edges": self.edge_count, "dropped": self.dropped}

    def save(self, path):
        with atomic_open(path) as fh:
            for a, b in self.edges:
                fh.write(f"{a}\t{b}\n")


def read_edges(path) -> list[tuple[str, str]]:
    pairs = []
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise DataError(f"{path}:{lineno}: malformed edge line (expected product_id<TAB>product_id)")
            pairs.append((parts[0].strip(), parts[1].strip()))
    return pairs


def load_graph(edge_path, product_ids: Iterable[str] | None = None) -> AssociationGraph:
    """Symmetrize and deduplicate; drop edges touching products outside ``product_ids``."""
    return AssociationGraph.from_edges(read_edges(edge_path), product_ids)


def sample_pair(graph: AssociationGraph, rng: np.random.Generator) -> tuple[str, str]:
    """Edge-uniform draw with random orientation."""
    if not graph.edges:
        raise ValueError("association graph has no edges")
    a, b = graph.edges[int(rng.integers(len(graph.edges)))]
    return (a, b) if rng.random() < 0.5 else (b, a)


def sample_negative(graph: AssociationGraph, node: str, rng: np.random.Generator) -> str:
    """Uniform over nodes that are neither ``node`` nor one of its neighbours."""
    excluded = graph.neighbors(node)
    n = len(graph.nodes)
    for _ in range(REJECTION_ATTEMPTS):
        cand = graph.nodes[int(rng.integers(n))]
        if cand != node and cand not in excluded:
            return cand
    pool = [x for x in graph.nodes if x != node and x not in excluded]
    if not pool:
        raise ValueError(f"no valid negative product exists for {node!r}")
    return pool[int(rng.integers(len(pool)))]
