"""Immutable graph and dataset types, plus the TRAIN/VAL/TEST splitter."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class GraphError(ValueError):
    """A graph or dataset violates one of its structural invariants."""


class StratificationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected graph with optional discrete node labels and dense node features.

    Edges are canonicalised to sorted ``(min, max)`` pairs. When ``node_features``
    is omitted every node gets a single all-ones feature.
    """

    node_count: int
    edges: tuple
    node_labels: Optional[tuple] = None
    node_features: np.ndarray = field(default=None, repr=False)

    def __init__(self, node_count, edges=(), node_labels=None, node_features=None):
        n = int(node_count)
        canon = sorted({(min(int(u), int(v)), max(int(u), int(v))) for u, v in edges})
        if node_features is None:
            feats = np.ones((n, 1), dtype=np.float64)
        else:
            feats = np.array(node_features, dtype=np.float64, copy=True)
            if feats.ndim == 1:
                feats = feats.reshape(n, -1) if n else feats.reshape(0, 1)
        feats.setflags(write=False)
        object.__setattr__(self, "node_count", n)
        object.__setattr__(self, "edges", tuple(canon))
        object.__setattr__(self, "node_labels", None if node_labels is None else tuple(node_labels))
        object.__setattr__(self, "node_features", feats)

        problem = validate_graph(self, _raw_edges=edges)
        if problem is not None:
            raise GraphError(problem)

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=np.int64)
        for u, v in self.edges:
            deg[u] += 1
            deg[v] += 1
        return deg

    def neighbors(self) -> list:
        adj = [[] for _ in range(self.node_count)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return adj

    def directed_edge_index(self) -> tuple:
        """Both directions of every edge as ``(src, dst)`` integer arrays."""
        if not self.edges:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty
        e = np.asarray(self.edges, dtype=np.int64)
        return np.concatenate([e[:, 0], e[:, 1]]), np.concatenate([e[:, 1], e[:, 0]])

    def permute(self, perm: Sequence[int]) -> "Graph":
        """Relabel node ``i`` as ``perm[i]``."""
        perm = np.asarray(perm, dtype=np.int64)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        labels = None
        if self.node_labels is not None:
            labels = [self.node_labels[j] for j in inv]
        return Graph(
            self.node_count,
            [(perm[u], perm[v]) for u, v in self.edges],
            node_labels=labels,
            node_features=self.node_features[inv],
        )


def validate_graph(g: Graph, _raw_edges=None) -> Optional[str]:
    """Return a description of the first broken invariant, or None if ``g`` is fine."""
    n = g.node_count
    if n < 0:
        return "negative node count"
    raw = g.edges if _raw_edges is None else list(_raw_edges)
    seen = set()
    for u, v in raw:
        u, v = int(u), int(v)
        if u < 0 or v < 0 or u >= n or v >= n:
            return f"endpoint out of range: edge ({u}, {v}) with node_count {n}"
        if u == v:
            return f"self-loop at node {u}"
        key = (min(u, v), max(u, v))
        if key in seen:
            return f"duplicate edge {key}"
        seen.add(key)
    if g.node_labels is not None and len(g.node_labels) != n:
        return f"node_labels has length {len(g.node_labels)}, expected {n}"
    if g.node_features.shape[0] != n:
        return f"node_features has {g.node_features.shape[0]} rows, expected {n}"
    if not np.all(np.isfinite(g.node_features)):
        return "node_features contains non-finite values"
    return None


@dataclass(frozen=True)
class GraphDataset:
    name: str
    graphs: tuple
    labels: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        if len(self.graphs) != len(self.labels):
            raise GraphError(f"{len(self.graphs)} graphs but {len(self.labels)} labels")
        present = set(self.labels)
        if any(y < 0 or y >= self.num_classes for y in present):
            raise GraphError(f"label outside [0, {self.num_classes})")
        missing = set(range(self.num_classes)) - present
        if self.graphs and missing:
            raise GraphError(f"classes {sorted(missing)} have no graphs")

    def __len__(self) -> int:
        return len(self.graphs)

    def subset(self, indices) -> list:
        return [self.graphs[i] for i in indices]

    def labels_of(self, indices) -> np.ndarray:
        return np.asarray([self.labels[i] for i in indices], dtype=np.int64)


@dataclass(frozen=True)
class SplitSpec:
    seed: int
    labeled_fraction: float
    train_labeled: tuple
    train_unlabeled: tuple
    val: tuple
    test: tuple

    def __post_init__(self):
        for name in ("train_labeled", "train_unlabeled", "val", "test"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        parts = [self.train_labeled, self.train_unlabeled, self.val, self.test]
        union = set()
        for p in parts:
            if len(set(p)) != len(p) or union & set(p):
                raise GraphError("split partitions overlap")
            union |= set(p)
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise GraphError(f"labeled_fraction {self.labeled_fraction} not in (0, 1]")

    @property
    def train(self) -> tuple:
        return self.train_labeled + self.train_unlabeled

    def covers(self, n: int) -> bool:
        return sorted(self.train + self.val + self.test) == list(range(n))


def _largest_remainder(counts: np.ndarray, total: int) -> np.ndarray:
    """Apportion ``total`` items across classes proportionally to ``counts``."""
    if total == 0 or counts.sum() == 0:
        return np.zeros_like(counts)
    exact = counts * (total / counts.sum())
    alloc = np.floor(exact).astype(np.int64)
    rem = total - alloc.sum()
    # ties go to the lower class index
    order = sorted(range(len(counts)), key=lambda c: (-(exact[c] - alloc[c]), c))
    for c in order[:rem]:
        alloc[c] += 1
    return np.minimum(alloc, counts)


def make_split(dataset: GraphDataset, seed: int, labeled_fraction: float) -> SplitSpec:
    """7:1:2 TRAIN/VAL/TEST split, then ``labeled_fraction`` of TRAIN is labeled.

    TEST gets ``0.2 n`` and VAL ``0.1 n``, each rounded half-up; TRAIN takes the
    rest. Every partition is drawn class-stratified with largest-remainder
    rounding. For PROTEINS (n = 1113) this gives 223 / 111 / 779.
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError(f"labeled_fraction must be in (0, 1], got {labeled_fraction}")
    rng = np.random.default_rng(seed)
    labels = np.asarray(dataset.labels)
    C = dataset.num_classes
    by_class = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(C)]
    counts = np.array([len(m) for m in by_class], dtype=np.int64)

    n_test = int(np.floor(0.2 * n + 0.5))
    n_val = int(np.floor(0.1 * n + 0.5))
    n_train = n - n_test - n_val
    n_lab = int(np.floor(labeled_fraction * n_train + 0.5))
    if n_lab == 0:
        raise StratificationError(f"labeled_fraction {labeled_fraction} leaves no labeled graphs")

    test_take = _largest_remainder(counts, n_test)
    test, by_class = _split_classes(by_class, test_take)
    counts = counts - test_take
    val_take = _largest_remainder(counts, n_val)
    val, by_class = _split_classes(by_class, val_take)
    counts = counts - val_take
    lab_take = _largest_remainder(counts, n_lab)
    if n_lab >= C and np.any(lab_take == 0):
        # guarantee one labeled graph per class whenever the budget allows
        for c in np.flatnonzero(lab_take == 0):
            if counts[c] == 0:
                raise StratificationError(f"class {c} has no graphs left in TRAIN")
            donor = int(np.argmax(lab_take))
            lab_take[donor] -= 1
            lab_take[c] += 1
    labeled, rest = _split_classes(by_class, lab_take)
    unlabeled = [i for members in rest for i in members]
    if len(labeled) != n_lab:
        raise StratificationError("could not fill the labeled partition at the requested size")

    return SplitSpec(
        seed=int(seed),
        labeled_fraction=float(labeled_fraction),
        train_labeled=sorted(labeled),
        train_unlabeled=sorted(unlabeled),
        val=sorted(val),
        test=sorted(test),
    )


def _split_classes(by_class, take):
    picked = []
    remaining = []
    for members, k in zip(by_class, take):
        picked.extend(members[:k])
        remaining.append(members[k:])
    return picked, remaining
