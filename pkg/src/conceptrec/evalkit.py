"""Evaluation: ranking metrics, graph-consistency scores, clustering quality.

Everything here is pure numpy over plain data (ranks, id sequences,
matrices), so oracle tests can feed hand-built inputs without touching any
model.
"""

from __future__ import annotations

import math

import numpy as np


def hit_rate(ranks, k) -> float:
    """Fraction of 1-based ranks at or above cutoff k."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("no ranks given")
    return sum(1 for r in ranks if r <= k) / len(ranks)


def ndcg(ranks, k) -> float:
    """Mean single-relevant NDCG@k: 1/log2(1+rank) inside the cutoff, else 0.

    With one relevant item the ideal DCG is 1, so no normalization term
    appears.
    """
    ranks = list(ranks)
    if not ranks:
        raise ValueError("no ranks given")
    return sum(1.0 / math.log2(1 + r) for r in ranks if r <= k) / len(ranks)


def mrr(ranks) -> float:
    """Mean reciprocal rank, no cutoff."""
    ranks = list(ranks)
    if not ranks:
        raise ValueError("no ranks given")
    return sum(1.0 / r for r in ranks) / len(ranks)


def ranking_metrics(ranks, hr_k=1, ndcg_k=5) -> dict:
    return {
        f"HR@{hr_k}": hit_rate(ranks, hr_k),
        f"NDCG@{ndcg_k}": ndcg(ranks, ndcg_k),
        "MRR": mrr(ranks),
    }


def consistency_ratio(pairs, graph) -> float:
    """Fraction of (a, b) pairs adjacent in the graph, direction ignored.

    A pair with a == b counts as inconsistent (the graph never has
    self-edges). Empty input is an error: the caller decides what a vacuous
    ratio means.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no pairs given")
    good = sum(1 for a, b in pairs if a != b and (graph.has_edge(a, b) or graph.has_edge(b, a)))
    return good / len(pairs)


def learner_consistency_score(concepts, graph) -> float:
    """Fraction of a history's consecutive moves that follow a graph edge.

    Directed: the move a then b counts only when the edge a -> b exists.
    Every consecutive pair counts toward the denominator, repeats included;
    a repeat (a, a) can never be an edge, so it scores as inconsistent.
    """
    concepts = list(concepts)
    if len(concepts) < 2:
        raise ValueError(f"need a history of length >= 2, got {len(concepts)}")
    moves = list(zip(concepts, concepts[1:]))
    return sum(1 for a, b in moves if graph.has_edge(a, b)) / len(moves)


def adherent_learners(histories, graph, threshold=0.5) -> set:
    """Learners whose own history follows graph order more often than not."""
    out = set()
    for learner, concepts in histories.items():
        if learner_consistency_score(concepts, graph) > threshold:
            out.add(learner)
    return out


def kmeans(points, k, seed, max_iter=100):
    """Lloyd's algorithm with farthest-point seeding.

    The first center is a uniform draw from the seeded generator; each
    further center is the point farthest from its nearest chosen center
    (ties to the lowest index). Assignment ties also go to the lowest
    center index. An empty cluster keeps its previous centroid. Returns
    (labels, centroids).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"need 1 <= k <= {n} clusters, got {k}")
    rng = np.random.default_rng(seed)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[int(rng.integers(n))]
    dist = np.linalg.norm(points - centers[0], axis=1)
    for i in range(1, k):
        centers[i] = points[int(np.argmax(dist))]
        dist = np.minimum(dist, np.linalg.norm(points - centers[i], axis=1))
    labels = np.full(n, -1)
    for _ in range(max_iter):
        gaps = np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2)
        new_labels = np.argmin(gaps, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for i in range(k):
            members = points[labels == i]
            if len(members):
                centers[i] = members.mean(axis=0)
    return labels, centers


def davies_bouldin(points, labels, centers) -> float:
    """Mean over clusters of the worst (S_i + S_j) / M_ij ratio.

    S is the mean distance of a cluster's members to its centroid and M is
    the distance between centroids; lower is better. Coincident centroids
    make the ratio infinite rather than being skipped.
    """
    points = np.asarray(points, dtype=np.float64)
    k = centers.shape[0]
    if k < 2:
        raise ValueError(f"need >= 2 clusters for the index, got {k}")
    spread = np.zeros(k)
    for i in range(k):
        members = points[labels == i]
        if len(members):
            spread[i] = np.linalg.norm(members - centers[i], axis=1).mean()
    worst = np.zeros(k)
    for i in range(k):
        ratios = []
        for j in range(k):
            if i == j:
                continue
            gap = float(np.linalg.norm(centers[i] - centers[j]))
            ratios.append((spread[i] + spread[j]) / gap if gap > 0 else float("inf"))
        worst[i] = max(ratios)
    return float(worst.mean())


def clustering_index(points, k, seed) -> float:
    """K-means then the Davies-Bouldin index of the result."""
    labels, centers = kmeans(points, k, seed)
    return davies_bouldin(points, labels, centers)


def embedding_report(raw, adapted, k, seed) -> dict:
    """Cluster both embedding tables with the same seed and compare indices."""
    if raw.shape[0] != adapted.shape[0]:
        raise ValueError(
            f"tables disagree on row count: {raw.shape[0]} vs {adapted.shape[0]}"
        )
    return {
        "DBI_raw": clustering_index(raw, k, seed),
        "DBI_adapted": clustering_index(adapted, k, seed),
    }
