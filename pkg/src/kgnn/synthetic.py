"""Synthetic graph families for tests and sanity experiments."""

from __future__ import annotations

import numpy as np

from .graph import Graph, GraphDataset


def triangle_with_tail(tail: int) -> Graph:
    edges = [(0, 1), (1, 2), (0, 2)]
    prev = 0
    for i in range(tail):
        node = 3 + i
        edges.append((prev, node))
        prev = node
    return Graph(3 + tail, edges)


def star(leaves: int) -> Graph:
    return Graph(leaves + 1, [(0, i) for i in range(1, leaves + 1)])


def triangles_vs_stars(n: int = 100, seed: int = 0) -> GraphDataset:
    """Class 0: a triangle with a 1-4 node tail. Class 1: a star with 3-6 leaves.

    Graph sizes overlap between the classes, so the families are told apart
    by structure (visible after one WL iteration), not by node count.
    """
    rng = np.random.default_rng(seed)
    graphs, labels = [], []
    for i in range(n):
        if i % 2 == 0:
            graphs.append(triangle_with_tail(int(rng.integers(1, 5))))
            labels.append(0)
        else:
            graphs.append(star(int(rng.integers(3, 7))))
            labels.append(1)
    order = rng.permutation(n)
    return GraphDataset(
        "triangles-vs-stars",
        [graphs[i] for i in order],
        [labels[i] for i in order],
        2,
    )


def random_graph(rng: np.random.Generator, max_nodes: int = 8, edge_prob: float = 0.4, num_labels: int = 0) -> Graph:
    """Erdos-Renyi graph with 1..max_nodes nodes and optional random discrete labels."""
    n = int(rng.integers(1, max_nodes + 1))
    edges = [(u, v) for u in range(n) for v in range(u + 1, n) if rng.random() < edge_prob]
    labels = None
    feats = None
    if num_labels:
        labels = [int(x) for x in rng.integers(0, num_labels, size=n)]
        feats = np.eye(num_labels)[labels] if n else np.zeros((0, num_labels))
    return Graph(n, edges, node_labels=labels, node_features=feats)


def random_dataset(n: int, num_classes: int, seed: int = 0, max_nodes: int = 10, num_labels: int = 3) -> GraphDataset:
    """Random graphs with random class labels; every class is guaranteed at least once."""
    rng = np.random.default_rng(seed)
    graphs = [random_graph(rng, max_nodes, 0.3, num_labels) for _ in range(n)]
    labels = [i % num_classes for i in range(n)]
    return GraphDataset(f"random-{n}", graphs, labels, num_classes)
