"""GIN graph classifier: stacked sum-aggregation layers, sum readout, MLP head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .graph import Graph


@dataclass(frozen=True)
class GraphBatch:
    """Disjoint union of a list of graphs, addressed through segment ids."""

    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    node_graph: np.ndarray
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return self.features.shape[0]

    @classmethod
    def from_graphs(cls, graphs: Sequence[Graph]) -> "GraphBatch":
        if not graphs:
            raise ValueError("empty batch")
        dims = {g.feature_dim for g in graphs}
        if len(dims) != 1:
            raise ad.ShapeError(f"graphs in a batch disagree on feature dimension: {sorted(dims)}")
        offsets = np.cumsum([0] + [g.node_count for g in graphs])
        srcs, dsts = [], []
        for off, g in zip(offsets, graphs):
            s, d = g.directed_edge_index()
            srcs.append(s + off)
            dsts.append(d + off)
        return cls(
            features=np.concatenate([g.node_features for g in graphs], axis=0),
            src=np.concatenate(srcs),
            dst=np.concatenate(dsts),
            node_graph=np.repeat(np.arange(len(graphs)), [g.node_count for g in graphs]),
            num_graphs=len(graphs),
        )


@dataclass
class GinLayer:
    """``h' = BN(relu(MLP((1 + eps) h + sum of neighbour h)))`` with a 2-layer ReLU MLP."""

    w1: ad.Tensor
    b1: ad.Tensor
    w2: ad.Tensor
    b2: ad.Tensor
    gamma: ad.Tensor
    beta: ad.Tensor
    bn: ad.BatchNormStats
    epsilon: float = 0.0

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]


@dataclass
class GnnModel:
    layers: list
    head: dict
    hidden_dim: int
    num_classes: int
    dropout: float = 0.5
    layer_dropout: float = 0.0
    params: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    def buffers(self) -> dict:
        out = {}
        for l, layer in enumerate(self.layers):
            out[f"gin{l}.bn.mean"] = layer.bn.mean
            out[f"gin{l}.bn.var"] = layer.bn.var
        return out

    def load_buffers(self, values: dict) -> None:
        for l, layer in enumerate(self.layers):
            layer.bn.mean = np.array(values[f"gin{l}.bn.mean"])
            layer.bn.var = np.array(values[f"gin{l}.bn.var"])


def init_gnn(
    rng: np.random.Generator,
    input_dim: int,
    hidden_dim: int,
    num_classes: int,
    num_layers: int = 3,
    dropout: float = 0.5,
    layer_dropout: float = 0.0,
) -> GnnModel:
    """Draw order: for each layer ``w1`` then ``w2``; then head ``w1``, ``w2``."""
    params = {}
    layers = []
    d = input_dim
    for l in range(num_layers):
        layer = GinLayer(
            w1=ad.glorot_uniform(rng, d, hidden_dim, f"gin{l}.w1"),
            b1=ad.zeros_param(hidden_dim, f"gin{l}.b1"),
            w2=ad.glorot_uniform(rng, hidden_dim, hidden_dim, f"gin{l}.w2"),
            b2=ad.zeros_param(hidden_dim, f"gin{l}.b2"),
            gamma=ad.parameter(np.ones(hidden_dim), f"gin{l}.gamma"),
            beta=ad.zeros_param(hidden_dim, f"gin{l}.beta"),
            bn=ad.BatchNormStats.create(hidden_dim),
        )
        for t in (layer.w1, layer.b1, layer.w2, layer.b2, layer.gamma, layer.beta):
            params[t.name] = t
        layers.append(layer)
        d = hidden_dim
    head = {
        "w1": ad.glorot_uniform(rng, hidden_dim, hidden_dim, "head.w1"),
        "b1": ad.zeros_param(hidden_dim, "head.b1"),
        "w2": ad.glorot_uniform(rng, hidden_dim, num_classes, "head.w2"),
        "b2": ad.zeros_param(num_classes, "head.b2"),
    }
    for t in head.values():
        params[t.name] = t
    return GnnModel(layers, head, hidden_dim, num_classes, dropout, layer_dropout, params)


def _as_batch(graphs) -> GraphBatch:
    return graphs if isinstance(graphs, GraphBatch) else GraphBatch.from_graphs(list(graphs))


def gnn_embed(model: GnnModel, graphs, train: bool = False, rng=None, _dropout: bool = True) -> ad.Tensor:
    """Sum-pooled final-layer node representations, one row per graph."""
    batch = _as_batch(graphs)
    if batch.features.shape[1] != model.input_dim:
        raise ad.ShapeError(
            f"node features have dimension {batch.features.shape[1]}, model expects {model.input_dim}"
        )
    h = ad.Tensor(batch.features)
    for layer in model.layers:
        messages = ad.segment_sum(ad.gather_rows(h, batch.src), batch.dst, batch.num_nodes)
        agg = ad.add(ad.scale(h, 1.0 + layer.epsilon) if layer.epsilon else h, messages)
        z = ad.relu(ad.add(ad.matmul(agg, layer.w1), layer.b1))
        h = ad.relu(ad.add(ad.matmul(z, layer.w2), layer.b2))
        h = ad.batch_norm(h, layer.gamma, layer.beta, layer.bn, train)
        if _dropout:
            h = ad.dropout(h, model.layer_dropout, train, rng)
    return ad.segment_sum(h, batch.node_graph, batch.num_graphs)


def recalibrate_batch_norm(model: GnnModel, graphs) -> None:
    """Set every layer's running statistics to the exact node statistics over ``graphs``.

    With few batches per epoch an exponential average lags far behind the
    weights, and inference-mode outputs drift away from training-mode ones.
    After this pass the two agree on ``graphs`` (dropout aside).
    """
    batch = _as_batch(graphs)
    momenta = [layer.bn.momentum for layer in model.layers]
    for layer in model.layers:
        layer.bn.momentum = 1.0
    try:
        gnn_embed(model, batch, train=True, rng=None, _dropout=False)
    finally:
        for layer, m in zip(model.layers, momenta):
            layer.bn.momentum = m
    n = batch.num_nodes
    if n > 1:
        # training-mode normalisation divides by the biased variance
        for layer in model.layers:
            layer.bn.var = layer.bn.var * (n - 1) / n


def mlp_head(head: dict, x: ad.Tensor, rate: float, train: bool, rng) -> ad.Tensor:
    x = ad.dropout(x, rate, train, rng)
    z = ad.relu(ad.add(ad.matmul(x, head["w1"]), head["b1"]))
    return ad.add(ad.matmul(z, head["w2"]), head["b2"])


def gnn_logits(model: GnnModel, graphs, train: bool = False, rng=None) -> ad.Tensor:
    return mlp_head(model.head, gnn_embed(model, graphs, train, rng), model.dropout, train, rng)


def gnn_forward(model: GnnModel, graphs, train: bool = False, rng=None) -> ad.Tensor:
    """Class probabilities, one row per graph."""
    return ad.row_softmax(gnn_logits(model, graphs, train, rng))


def gnn_loss_supervised(model: GnnModel, graphs, labels, train: bool = False, rng=None) -> ad.Tensor:
    return ad.cross_entropy(gnn_logits(model, graphs, train, rng), labels)


def predict_from_probs(probs: np.ndarray) -> tuple:
    """Argmax label (ties -> lowest class index) and its probability."""
    labels = np.argmax(probs, axis=1)
    return labels, probs[np.arange(len(labels)), labels]


def gnn_predict_proba(model: GnnModel, graphs: Sequence[Graph], batch_size: int = 256) -> np.ndarray:
    graphs = list(graphs)
    if not graphs:
        return np.zeros((0, model.num_classes))
    rows = [
        gnn_forward(model, graphs[i : i + batch_size], train=False).value
        for i in range(0, len(graphs), batch_size)
    ]
    return np.concatenate(rows, axis=0)


def gnn_predict(model: GnnModel, graphs: Sequence[Graph], batch_size: int = 256) -> tuple:
    return predict_from_probs(gnn_predict_proba(model, graphs, batch_size))
