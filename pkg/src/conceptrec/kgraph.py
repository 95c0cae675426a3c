"""Concept transition graph: construction from histories, edge-list IO, edge dropout.

The graph stands in for a curated prerequisite map. An edge a -> b is kept
when learners moved from a to b often enough in absolute count and as a
fraction of a's outgoing transitions; self-transitions never count.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class GraphError(ValueError):
    """Malformed graph file or inconsistent node set."""


@dataclass
class ConceptGraph:
    """Directed graph over integer concept ids.

    `nodes` is the full concept universe, including isolated concepts;
    `edges` is a sorted tuple of (src, dst) pairs. Adjacency lookups are
    built lazily and return sorted tuples so iteration order is stable.
    """

    nodes: frozenset[int]
    edges: tuple[tuple[int, int], ...]
    _succ: dict[int, tuple[int, ...]] = field(default=None, repr=False, compare=False)
    _pred: dict[int, tuple[int, ...]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.nodes = frozenset(int(n) for n in self.nodes)
        edges = sorted({(int(a), int(b)) for a, b in self.edges})
        for a, b in edges:
            if a not in self.nodes or b not in self.nodes:
                raise GraphError(f"edge ({a}, {b}) references a node outside the node set")
            if a == b:
                raise GraphError(f"self-edge on node {a}")
        self.edges = tuple(edges)

    def _build_adjacency(self):
        succ: dict[int, list[int]] = {n: [] for n in self.nodes}
        pred: dict[int, list[int]] = {n: [] for n in self.nodes}
        for a, b in self.edges:
            succ[a].append(b)
            pred[b].append(a)
        self._succ = {n: tuple(sorted(v)) for n, v in succ.items()}
        self._pred = {n: tuple(sorted(v)) for n, v in pred.items()}

    def successors(self, node) -> tuple[int, ...]:
        if self._succ is None:
            self._build_adjacency()
        return self._succ[node]

    def predecessors(self, node) -> tuple[int, ...]:
        if self._pred is None:
            self._build_adjacency()
        return self._pred[node]

    def neighbors(self, node) -> tuple[int, ...]:
        """Union of in- and out-neighbors, sorted, without duplicates."""
        return tuple(sorted(set(self.successors(node)) | set(self.predecessors(node))))

    def has_edge(self, a, b) -> bool:
        return b in self.successors(a)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return len(self.edges)


def build_transition_graph(seqs, num_concepts, min_count=2, min_ratio=0.05) -> ConceptGraph:
    """Estimate a concept graph from consecutive transitions in learner histories.

    count(a, b) = number of adjacent (a then b) pairs across all learners,
    a != b. Edge a -> b survives iff count(a, b) >= min_count and
    count(a, b) / sum_c count(a, c) >= min_ratio. The ratio denominator
    only includes non-self transitions.
    """
    if min_count < 0:
        raise ValueError(f"min_count must be >= 0, got {min_count}")
    if not 0.0 <= min_ratio <= 1.0:
        raise ValueError(f"min_ratio must be in [0, 1], got {min_ratio}")
    counts: Counter = Counter()
    for seq in seqs:
        concepts = seq.concepts() if hasattr(seq, "concepts") else list(seq)
        for a, b in zip(concepts, concepts[1:]):
            if a != b:
                counts[(a, b)] += 1
    totals: Counter = Counter()
    for (a, _), c in counts.items():
        totals[a] += c
    edges = [
        (a, b)
        for (a, b), c in counts.items()
        if c >= min_count and c / totals[a] >= min_ratio
    ]
    return ConceptGraph(nodes=frozenset(range(num_concepts)), edges=tuple(edges))


def planted_cluster_graph(num_concepts, num_clusters, out_degree=2) -> ConceptGraph:
    """Synthetic graph with block structure for embedding-geometry checks.

    Concepts are split into `num_clusters` contiguous blocks. Within a
    block each concept points at its next `out_degree` neighbors around a
    ring, so blocks are strongly connected internally; no edges cross
    blocks. Cluster of concept k = k * num_clusters // num_concepts.
    """
    if num_clusters < 1 or num_clusters > num_concepts:
        raise ValueError(f"need 1 <= num_clusters <= num_concepts, got {num_clusters}")
    blocks: dict[int, list[int]] = {}
    for k in range(num_concepts):
        blocks.setdefault(k * num_clusters // num_concepts, []).append(k)
    edges = []
    for members in blocks.values():
        n = len(members)
        if n < 2:
            continue
        for i, a in enumerate(members):
            for hop in range(1, min(out_degree, n - 1) + 1):
                edges.append((a, members[(i + hop) % n]))
    return ConceptGraph(nodes=frozenset(range(num_concepts)), edges=tuple(set(edges)))


def save_graph(graph, path, id_to_name) -> None:
    """Tab-separated `src<TAB>dst` concept names, one edge per line."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# {graph.num_nodes} nodes, {graph.num_edges} edges\n")
        for a, b in graph.edges:
            fh.write(f"{id_to_name[a]}\t{id_to_name[b]}\n")


def load_graph(path, name_to_id) -> ConceptGraph:
    """Read a tab-separated edge list; `#` starts a comment, blank lines skipped.

    Every endpoint must resolve through `name_to_id`; an unknown concept
    name is an error rather than a silently added node.
    """
    edges = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise GraphError(f"{path} line {lineno}: expected 'src<TAB>dst', got {line!r}")
            a, b = parts[0].strip(), parts[1].strip()
            for name in (a, b):
                if name not in name_to_id:
                    raise GraphError(f"{path} line {lineno}: unknown concept name {name!r}")
            if a == b:
                # prerequisite relations are irreflexive; drop rather than die
                logger.warning("%s line %d: self-edge on %r skipped", path, lineno, a)
                continue
            edges.append((name_to_id[a], name_to_id[b]))
    return ConceptGraph(nodes=frozenset(name_to_id.values()), edges=tuple(edges))


def edge_dropout_view(graph, gamma, rng) -> ConceptGraph:
    """Random subgraph keeping exactly round((1 - gamma) * |E|) edges.

    Edges are sampled without replacement with numpy's Generator; the node
    set is untouched, so isolated nodes simply aggregate nothing downstream.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    if not isinstance(rng, np.random.Generator):
        raise TypeError("rng must be a numpy.random.Generator")
    m = graph.num_edges
    keep = int(round((1.0 - gamma) * m))
    if m == 0 or keep == m:
        return ConceptGraph(nodes=graph.nodes, edges=graph.edges)
    idx = rng.choice(m, size=keep, replace=False)
    kept = tuple(graph.edges[i] for i in sorted(idx.tolist()))
    return ConceptGraph(nodes=graph.nodes, edges=kept)
