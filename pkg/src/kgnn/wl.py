"""Weisfeiler-Lehman subtree features and the kernel they induce.

Each node starts from its dataset label (or its degree when the graph has no
labels). At every iteration a node's label becomes the compressed pair
``(own label, sorted neighbour labels)``. A graph's feature vector counts how
often every (iteration, label) pair occurs, and the kernel between two graphs
is the inner product of their count vectors.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import Graph

DEFAULT_ITERATIONS = 3

_vocab_ids = itertools.count()


class VocabularyMismatch(ValueError):
    pass


@dataclass
class WLVocabulary:
    """Relabeling dictionary shared by every graph that is compared.

    ``compress[h]`` maps a label signature at iteration ``h`` to a compressed
    integer label; ``index`` maps ``(h, compressed label)`` to a column of the
    feature space. Column indices are handed out contiguously from 0.
    """

    compress: list = field(default_factory=list)
    index: dict = field(default_factory=dict)
    frozen: bool = False
    uid: int = field(default_factory=lambda: next(_vocab_ids))

    @property
    def next_index(self) -> int:
        return len(self.index)

    def __len__(self) -> int:
        return len(self.index)

    def freeze(self) -> "WLVocabulary":
        self.frozen = True
        return self

    def _table(self, h: int) -> dict:
        while len(self.compress) <= h:
            self.compress.append({})
        return self.compress[h]

    def lookup(self, h: int, signature, grow: bool) -> Optional[int]:
        table = self._table(h)
        label = table.get(signature)
        if label is None:
            if not grow:
                return None
            label = len(table)
            table[signature] = label
            self.index[(h, label)] = len(self.index)
        return label

    def column(self, h: int, label: int) -> int:
        return self.index[(h, label)]


@dataclass(frozen=True)
class WLFeatureVector:
    counts: dict
    vocab_uid: int
    node_count: int

    def __getitem__(self, idx: int) -> int:
        return self.counts.get(idx, 0)

    def __eq__(self, other) -> bool:
        if not isinstance(other, WLFeatureVector):
            return NotImplemented
        return self.vocab_uid == other.vocab_uid and self.counts == other.counts

    def squared_norm(self) -> int:
        return sum(c * c for c in self.counts.values())

    def total(self) -> int:
        return sum(self.counts.values())


def initial_labels(g: Graph) -> list:
    if g.node_labels is not None:
        return list(g.node_labels)
    return [int(d) for d in g.degrees()]


def wl_label_sequence(g: Graph, H: int, vocab: WLVocabulary, frozen: bool = False) -> list:
    """Per-iteration node labels ``[labels_0, ..., labels_H]``.

    Known signatures get their vocabulary label (>= 0). In frozen mode an
    unseen signature gets a negative graph-local label, so it still refines
    the node partition but never maps to a feature column.
    """
    if H < 0:
        raise ValueError(f"iteration count must be >= 0, got {H}")
    grow = not (frozen or vocab.frozen)
    adj = g.neighbors()
    local: dict = {}

    def compress(h, signature):
        label = vocab.lookup(h, signature, grow)
        if label is None:
            key = (h, signature)
            if key not in local:
                local[key] = -1 - len(local)
            label = local[key]
        return label

    current = [compress(0, ("init", s)) for s in initial_labels(g)]
    seq = [current]
    for h in range(1, H + 1):
        prev = seq[-1]
        current = [compress(h, (prev[v], tuple(sorted(prev[u] for u in adj[v])))) for v in range(g.node_count)]
        seq.append(current)
    return seq


def wl_features(g: Graph, H: int, vocab: WLVocabulary, frozen: bool = False) -> WLFeatureVector:
    counts: dict = {}
    for h, labels in enumerate(wl_label_sequence(g, H, vocab, frozen)):
        for label in labels:
            if label < 0:
                continue
            col = vocab.column(h, label)
            counts[col] = counts.get(col, 0) + 1
    return WLFeatureVector(counts=counts, vocab_uid=vocab.uid, node_count=g.node_count)


def kernel_value(f1: WLFeatureVector, f2: WLFeatureVector) -> int:
    if f1.vocab_uid != f2.vocab_uid:
        raise VocabularyMismatch("feature vectors were built against different vocabularies")
    if len(f1.counts) > len(f2.counts):
        f1, f2 = f2, f1
    return sum(c * f2.counts.get(i, 0) for i, c in f1.counts.items())


def feature_matrix(vectors: Sequence[WLFeatureVector], dim: int, scale_by_nodes: bool = False) -> sp.csr_matrix:
    """Stack count vectors into a sparse ``len(vectors) x dim`` matrix."""
    rows, cols, vals = [], [], []
    for r, f in enumerate(vectors):
        s = 1.0 / f.node_count if scale_by_nodes and f.node_count else 1.0
        for c, v in f.counts.items():
            if c < dim:
                rows.append(r)
                cols.append(c)
                vals.append(v * s)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(vectors), dim), dtype=np.float64)


@dataclass
class KernelMatrix:
    values: np.ndarray
    graph_ids: list
    normalized: bool = False

    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.values, self.values.T))

    def min_max_eigenvalues(self) -> tuple:
        w = np.linalg.eigvalsh(np.asarray(self.values, dtype=np.float64))
        return float(w[0]), float(w[-1])

    def is_psd(self, rel_tol: float = 1e-8) -> bool:
        lo, hi = self.min_max_eigenvalues()
        return lo >= -rel_tol * max(hi, 0.0)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["graph_id"] + [str(i) for i in self.graph_ids])
            for gid, row in zip(self.graph_ids, self.values):
                w.writerow([str(gid)] + [repr(float(v)) if self.normalized else str(int(v)) for v in row])


def kernel_matrix(
    graphs: Sequence[Graph],
    H: int = DEFAULT_ITERATIONS,
    normalize: bool = False,
    graph_ids: Optional[Iterable] = None,
) -> tuple:
    if not graphs:
        raise ValueError("kernel_matrix needs at least one graph")
    vocab = WLVocabulary()
    feats = [wl_features(g, H, vocab) for g in graphs]
    X = feature_matrix(feats, len(vocab)).astype(np.int64)
    K = (X @ X.T).toarray()
    ids = list(graph_ids) if graph_ids is not None else list(range(len(graphs)))
    if not normalize:
        return KernelMatrix(K, ids, normalized=False), vocab
    d = np.diag(K).astype(np.float64)
    norm = np.sqrt(np.outer(d, d))
    with np.errstate(divide="ignore", invalid="ignore"):
        Kn = np.where(norm > 0, K / np.where(norm > 0, norm, 1.0), 0.0)
    np.fill_diagonal(Kn, 1.0)
    # exact symmetry regardless of floating-point division order
    Kn = np.triu(Kn) + np.triu(Kn, 1).T
    return KernelMatrix(Kn, ids, normalized=True), vocab
