"""Kernel memory network: multi-hop attention over WL feature vectors of labeled graphs.

Memories and queries are both WL count vectors. With ``K`` hops there are
``K + 1`` memory embeddings ``A[0..K]`` (adjacent weight tying: the output
embedding of hop ``k`` is the input embedding of hop ``k + 1``) and a query
embedding ``B``::

    q_1 = B x
    p_k = softmax_i(q_k . A[k-1] z_i)
    o_k = sum_i p_k[i] A[k] z_i
    q_{k+1} = q_k + o_k

The last readout ``o_K`` goes through an MLP head.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .gnn import mlp_head, predict_from_probs
from .wl import WLFeatureVector, feature_matrix


@dataclass
class MemoryBank:
    features: sp.csr_matrix
    labels: np.ndarray
    graph_ids: tuple
    vocab_uid: Optional[int] = None

    def __post_init__(self):
        self.features = sp.csr_matrix(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.graph_ids = tuple(self.graph_ids)
        if self.features.shape[0] != len(self.labels):
            raise ValueError(f"bank has {self.features.shape[0]} rows but {len(self.labels)} labels")
        if len(self.graph_ids) != len(self.labels):
            raise ValueError("bank graph_ids and labels differ in length")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @classmethod
    def from_vectors(
        cls,
        vectors: Sequence[WLFeatureVector],
        labels,
        graph_ids,
        dim: int,
        scale_by_nodes: bool = True,
    ) -> "MemoryBank":
        uid = vectors[0].vocab_uid if vectors else None
        return cls(feature_matrix(vectors, dim, scale_by_nodes), labels, graph_ids, uid)


@dataclass
class MemNetModel:
    embeddings: list  # A[0..K], each F x h
    query_embedding: ad.Tensor  # B, F x h
    head: dict
    hops: int
    num_classes: int
    dropout: float = 0.0
    params: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.query_embedding.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.query_embedding.shape[1]


def init_memnet(
    rng: np.random.Generator,
    input_dim: int,
    hidden_dim: int,
    num_classes: int,
    hops: int = 3,
    dropout: float = 0.0,
) -> MemNetModel:
    """Draw order: ``A[0..K]``, then ``B``, then head ``w1``, ``w2``."""
    if hops < 1:
        raise ValueError("memory network needs at least one hop")
    params = {}
    embeddings = [ad.glorot_uniform(rng, input_dim, hidden_dim, f"mem.A{k}") for k in range(hops + 1)]
    B = ad.glorot_uniform(rng, input_dim, hidden_dim, "mem.B")
    head = {
        "w1": ad.glorot_uniform(rng, hidden_dim, hidden_dim, "memhead.w1"),
        "b1": ad.zeros_param(hidden_dim, "memhead.b1"),
        "w2": ad.glorot_uniform(rng, hidden_dim, num_classes, "memhead.w2"),
        "b2": ad.zeros_param(num_classes, "memhead.b2"),
    }
    for t in embeddings + [B] + list(head.values()):
        params[t.name] = t
    return MemNetModel(embeddings, B, head, hops, num_classes, dropout, params)


def memnet_readout(model: MemNetModel, bank: MemoryBank, queries, return_attention: bool = False):
    """Final readout ``o_K`` for each query row (and optionally every hop's attention)."""
    if len(bank) == 0:
        raise ValueError("memory bank is empty")
    queries = sp.csr_matrix(queries)
    if queries.shape[1] != model.input_dim or bank.dim != model.input_dim:
        raise ad.ShapeError(
            f"feature dimension mismatch: queries {queries.shape[1]}, bank {bank.dim}, model {model.input_dim}"
        )
    mem = [ad.sparse_matmul(bank.features, A) for A in model.embeddings]
    q = ad.sparse_matmul(queries, model.query_embedding)
    attention = []
    o = None
    for k in range(model.hops):
        p = ad.row_softmax(ad.matmul(q, ad.transpose(mem[k])))
        attention.append(p.value)
        o = ad.matmul(p, mem[k + 1])
        q = ad.add(q, o)
    return (o, attention) if return_attention else o


def memnet_logits(model: MemNetModel, bank: MemoryBank, queries, train: bool = False, rng=None) -> ad.Tensor:
    return mlp_head(model.head, memnet_readout(model, bank, queries), model.dropout, train, rng)


def memnet_forward(model: MemNetModel, bank: MemoryBank, queries, train: bool = False, rng=None) -> ad.Tensor:
    return ad.row_softmax(memnet_logits(model, bank, queries, train, rng))


def memnet_loss_supervised(model, bank, queries, labels, train: bool = False, rng=None) -> ad.Tensor:
    return ad.cross_entropy(memnet_logits(model, bank, queries, train, rng), labels)


def memnet_predict_proba(model: MemNetModel, bank: MemoryBank, queries, batch_size: int = 256) -> np.ndarray:
    queries = sp.csr_matrix(queries)
    n = queries.shape[0]
    if n == 0:
        return np.zeros((0, model.num_classes))
    rows = [memnet_forward(model, bank, queries[i : i + batch_size]).value for i in range(0, n, batch_size)]
    return np.concatenate(rows, axis=0)


def memnet_predict(model: MemNetModel, bank: MemoryBank, queries, batch_size: int = 256) -> tuple:
    return predict_from_probs(memnet_predict_proba(model, bank, queries, batch_size))
