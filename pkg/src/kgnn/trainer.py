"""Alternating training of the GIN classifier and the kernel memory network.

Each round has two phases. The E phase trains the memory network on the
labeled set plus the GIN's most confident pseudo-labels; the M phase trains
the GIN on the labeled set plus the memory network's most confident
pseudo-labels. After the round, unlabeled graphs that both networks rank in
their top-k *and* agree on move permanently into the labeled set.

The teacher's annotations are computed once at the start of a phase and held
fixed for all of that phase's epochs.

RNG draw order per run: ``SeedSequence(seed).spawn(4)`` gives independent
streams for GIN init, memory-network init, minibatch shuffling and dropout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .gnn import GnnModel, GraphBatch, gnn_embed, gnn_logits, gnn_predict_proba, init_gnn, mlp_head, predict_from_probs, recalibrate_batch_norm
from .graph import GraphDataset, SplitSpec
from .memnet import MemNetModel, MemoryBank, init_memnet, memnet_logits, memnet_predict_proba, memnet_readout
from .wl import WLVocabulary, feature_matrix, wl_features

log = logging.getLogger(__name__)

SOURCE_P = "p"
SOURCE_Q = "q"


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs_per_phase: int = 20
    max_rounds: int = 10
    top_k: Optional[int] = None  # None -> top_k_fraction of the current pool
    top_k_fraction: float = 0.1
    min_new_fraction: float = 0.01
    hidden_dim: int = 32
    gnn_layers: int = 3
    wl_iterations: int = 3
    hops: int = 3
    learning_rate: float = 0.01
    weight_decay: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dropout: float = 0.5
    gnn_layer_dropout: float = 0.0
    memnet_dropout: float = 0.0
    scale_wl_by_nodes: bool = True
    pseudo_in_bank: bool = False
    soft_targets: bool = False
    class_balanced: bool = True
    precise_bn: bool = True
    reset_optimizer: bool = True
    select_by_val: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_size", "hidden_dim", "gnn_layers", "hops"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("epochs_per_phase", "max_rounds", "wl_iterations"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.top_k is not None and self.top_k < 0:
            raise ValueError("top_k must be non-negative")
        if not 0.0 <= self.top_k_fraction <= 1.0:
            raise ValueError("top_k_fraction must be in [0, 1]")
        for name in ("dropout", "gnn_layer_dropout", "memnet_dropout"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")

    def k_for(self, pool_size: int) -> int:
        if self.top_k is not None:
            return min(self.top_k, pool_size)
        return min(pool_size, int(math.ceil(self.top_k_fraction * pool_size)))

    def min_new(self, original_pool: int) -> int:
        return max(1, int(self.min_new_fraction * original_pool))

    def select(self, predictions: PseudoLabelBatch, k: int, num_classes: int) -> PseudoLabelBatch:
        if self.class_balanced:
            return select_topk_balanced(predictions, k, num_classes)
        return select_topk(predictions, k)

    def adam(self) -> ad.AdamState:
        return ad.AdamState(self.learning_rate, self.weight_decay, self.beta1, self.beta2, self.epsilon)


# -- pseudo-label bookkeeping ---------------------------------------------------


@dataclass(frozen=True)
class PseudoLabel:
    index: int
    label: int
    confidence: float
    source: str


@dataclass(frozen=True)
class PseudoLabelBatch:
    """Annotations of unlabeled graphs, highest confidence first (ties: lower index)."""

    entries: tuple = ()

    def __post_init__(self):
        ordered = tuple(sorted(self.entries, key=lambda e: (-e.confidence, e.index)))
        for e in ordered:
            if not 0.0 < e.confidence <= 1.0:
                raise ValueError(f"confidence {e.confidence} outside (0, 1]")
        object.__setattr__(self, "entries", ordered)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def indices(self) -> list:
        return [e.index for e in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    @classmethod
    def from_probs(cls, indices: Sequence[int], probs: np.ndarray, source: str) -> "PseudoLabelBatch":
        labels, conf = predict_from_probs(probs) if len(indices) else (np.zeros(0, int), np.zeros(0))
        return cls(tuple(PseudoLabel(int(i), int(y), float(c), source) for i, y, c in zip(indices, labels, conf)))


def select_topk(predictions: PseudoLabelBatch, k: int) -> PseudoLabelBatch:
    if k < 0:
        raise ValueError("k must be non-negative")
    return PseudoLabelBatch(predictions.entries[:k])


def select_topk_balanced(predictions: PseudoLabelBatch, k: int, num_classes: int) -> PseudoLabelBatch:
    """At most ``ceil(k / C)`` entries per predicted class, each class ranked by confidence.

    Slots a class cannot fill stay empty, so a confident majority class never
    crowds out the others.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    quota = math.ceil(k / num_classes) if k else 0
    taken: dict = {}
    chosen = []
    for e in predictions.entries:
        if taken.get(e.label, 0) < quota:
            taken[e.label] = taken.get(e.label, 0) + 1
            chosen.append(e)
    return PseudoLabelBatch(tuple(chosen))


@dataclass
class AugmentedLabeledSet:
    """Original labeled graphs plus graphs whose pseudo-labels both networks agreed on."""

    original: dict  # index -> true label
    consistent: dict = field(default_factory=dict)  # index -> agreed label

    def add(self, delta: dict) -> None:
        for idx, label in delta.items():
            if idx in self.original:
                raise ValueError(f"graph {idx} already carries a true label")
            if idx in self.consistent:
                raise ValueError(f"graph {idx} was already added")
            self.consistent[idx] = label

    @property
    def indices(self) -> list:
        return list(self.original) + list(self.consistent)

    @property
    def labels(self) -> np.ndarray:
        return np.array(list(self.original.values()) + list(self.consistent.values()), dtype=np.int64)

    def __len__(self) -> int:
        return len(self.original) + len(self.consistent)


def intersect_consistent(from_p: PseudoLabelBatch, from_q: PseudoLabelBatch) -> dict:
    """Graphs selected by both networks with the same label, in p's ranking order."""
    q_labels = {e.index: e.label for e in from_q}
    return {e.index: e.label for e in from_p if q_labels.get(e.index) == e.label}


# -- data preparation -----------------------------------------------------------


@dataclass
class PreparedData:
    """Dataset plus everything derived from it once per run (WL features, memory bank)."""

    dataset: GraphDataset
    split: SplitSpec
    labels: np.ndarray
    vocab: WLVocabulary
    wl: sp.csr_matrix  # one row per dataset graph
    bank: MemoryBank

    @property
    def graphs(self):
        return self.dataset.graphs

    @property
    def feature_dim(self) -> int:
        return self.wl.shape[1]

    @property
    def node_feature_dim(self) -> int:
        return self.dataset.graphs[0].feature_dim

    def batch(self, idx) -> GraphBatch:
        return GraphBatch.from_graphs([self.dataset.graphs[i] for i in idx])

    def queries(self, idx) -> sp.csr_matrix:
        return self.wl[np.asarray(idx, dtype=np.int64)]


def prepare_data(dataset: GraphDataset, split: SplitSpec, config: TrainConfig) -> PreparedData:
    """WL vocabulary grows over TRAIN (labeled and unlabeled), then is frozen for VAL/TEST."""
    if not split.covers(len(dataset)):
        raise ValueError("split does not cover the dataset")
    vocab = WLVocabulary()
    H = config.wl_iterations
    vectors = {}
    for i in split.train:
        vectors[i] = wl_features(dataset.graphs[i], H, vocab)
    vocab.freeze()
    for i in split.val + split.test:
        vectors[i] = wl_features(dataset.graphs[i], H, vocab, frozen=True)
    dim = len(vocab)
    ordered = [vectors[i] for i in range(len(dataset))]
    wl = feature_matrix(ordered, dim, config.scale_wl_by_nodes)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    lab = list(split.train_labeled)
    bank = MemoryBank(wl[lab], labels[lab], lab, vocab.uid)
    return PreparedData(dataset, split, labels, vocab, wl, bank)


# -- generic minibatch training -------------------------------------------------


def model_state(model) -> dict:
    """Parameter values plus non-trainable buffers (batch-norm statistics)."""
    values = ad.snapshot(model.params)
    if hasattr(model, "buffers"):
        values.update({k: np.array(v) for k, v in model.buffers().items()})
    return values


def load_model_state(model, values: dict) -> None:
    ad.restore(model.params, {k: values[k] for k in model.params})
    if hasattr(model, "load_buffers"):
        model.load_buffers(values)


@dataclass
class BestTracker:
    """Keeps the model state with the best validation accuracy seen so far (ties -> later)."""

    model: object
    evaluate: Callable[[], float]
    enabled: bool = True
    best_acc: float = -1.0
    best_values: Optional[dict] = None
    history: list = field(default_factory=list)

    def update(self) -> float:
        acc = self.evaluate()
        self.history.append(acc)
        if self.enabled and acc >= self.best_acc:
            self.best_acc = acc
            self.best_values = model_state(self.model)
        return acc

    def restore_best(self) -> None:
        if self.enabled and self.best_values is not None:
            load_model_state(self.model, self.best_values)


@dataclass
class RunStreams:
    init_p: np.random.Generator
    init_q: np.random.Generator
    shuffle: np.random.Generator
    dropout: np.random.Generator
    # per-network Adam state carried across phases when reset_optimizer is off
    optim: dict = field(default_factory=dict)

    @classmethod
    def from_seed(cls, seed: int) -> "RunStreams":
        return cls(*(np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)))


def phase_optimizer(config: "TrainConfig", streams: RunStreams, network: str) -> ad.AdamState:
    if config.reset_optimizer:
        return config.adam()
    return streams.optim.setdefault(network, config.adam())


def run_phase(
    params: dict,
    loss_fn: Callable,
    idx: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig,
    streams: RunStreams,
    state: Optional[ad.AdamState] = None,
    tracker: Optional[BestTracker] = None,
    after_epoch: Optional[Callable] = None,
) -> list:
    """``epochs_per_phase`` epochs of Adam over ``idx``; returns the mean loss of every epoch.

    ``loss_fn(batch_indices, batch_targets, rng)`` must build the loss on the active tape.
    ``after_epoch(idx)`` runs before the tracker looks at the epoch.
    """
    idx = np.asarray(idx, dtype=np.int64)
    targets = np.asarray(targets)
    state = state if state is not None else config.adam()
    names = list(params)
    tensors = [params[n] for n in names]
    epoch_losses = []
    for _ in range(config.epochs_per_phase):
        if idx.size == 0:
            break
        order = streams.shuffle.permutation(idx.size)
        total = 0.0
        for start in range(0, idx.size, config.batch_size):
            sel = order[start : start + config.batch_size]
            with ad.Tape() as tape:
                loss = loss_fn(idx[sel], targets[sel], streams.dropout)
            grads = tape.backward(loss, tensors)
            ad.adam_step(params, dict(zip(names, grads)), state)
            total += loss.item() * sel.size
        epoch_losses.append(total / idx.size)
        if after_epoch is not None:
            after_epoch(idx)
        if tracker is not None:
            tracker.update()
    return epoch_losses


def accuracy(pred: np.ndarray, truth: np.ndarray) -> float:
    return float(np.mean(pred == truth)) if len(truth) else 0.0


# -- per-network losses and predictions -----------------------------------------


def bn_refresh(model: GnnModel, data: PreparedData, config: TrainConfig) -> Optional[Callable]:
    if not config.precise_bn:
        return None

    def refresh(idx):
        recalibrate_batch_norm(model, data.batch(idx))

    return refresh


def gnn_batch_loss(model: GnnModel, data: PreparedData) -> Callable:
    def loss_fn(bidx, btargets, rng):
        return ad.cross_entropy(gnn_logits(model, data.batch(bidx), train=True, rng=rng), btargets)

    return loss_fn


def memnet_batch_loss(model: MemNetModel, data: PreparedData, bank: MemoryBank) -> Callable:
    def loss_fn(bidx, btargets, rng):
        return ad.cross_entropy(memnet_logits(model, bank, data.queries(bidx), train=True, rng=rng), btargets)

    return loss_fn


def gnn_proba(model: GnnModel, data: PreparedData, idx) -> np.ndarray:
    return gnn_predict_proba(model, [data.graphs[i] for i in idx])


def memnet_proba(model: MemNetModel, data: PreparedData, idx, bank: Optional[MemoryBank] = None) -> np.ndarray:
    return memnet_predict_proba(model, bank if bank is not None else data.bank, data.queries(idx))


def _val_tracker(model, proba_fn, data: PreparedData, config: TrainConfig) -> BestTracker:
    val = list(data.split.val)
    truth = data.labels[val]

    def evaluate():
        if not val:
            return 0.0
        return accuracy(np.argmax(proba_fn(val), axis=1), truth)

    return BestTracker(model, evaluate, enabled=config.select_by_val and bool(val))


def _rows_for(pool: list, probs: np.ndarray, top: PseudoLabelBatch) -> np.ndarray:
    pos = {i: r for r, i in enumerate(pool)}
    return probs[[pos[i] for i in top.indices]]


def _compose(base_idx, base_labels, extra: Optional[PseudoLabelBatch], extra_probs, C, soft: bool):
    """Training indices and targets: labeled set plus optional pseudo-labeled extras."""
    idx = list(base_idx)
    hard = list(base_labels)
    if extra is not None and len(extra):
        idx += extra.indices
        hard += list(extra.labels)
    if not soft:
        return np.asarray(idx, dtype=np.int64), np.asarray(hard, dtype=np.int64)
    targets = np.zeros((len(idx), C))
    targets[np.arange(len(base_idx)), np.asarray(base_labels, dtype=np.int64)] = 1.0
    if extra is not None and len(extra):
        targets[len(base_idx) :] = extra_probs
    return np.asarray(idx, dtype=np.int64), targets


# -- the four building blocks of the loop ----------------------------------------


def init_theta(config: TrainConfig, data: PreparedData, streams: RunStreams, tracker_on: bool = True):
    """GIN trained on the labeled set for ``epochs_per_phase`` epochs."""
    lab = list(data.split.train_labeled)
    _check_classes(data.labels[lab], data.dataset.num_classes)
    model = init_gnn(
        streams.init_p,
        data.node_feature_dim,
        config.hidden_dim,
        data.dataset.num_classes,
        config.gnn_layers,
        config.dropout,
        config.gnn_layer_dropout,
    )
    tracker = _val_tracker(model, lambda idx: gnn_proba(model, data, idx), data, config) if tracker_on else None
    losses = run_phase(
        model.params,
        gnn_batch_loss(model, data),
        lab,
        data.labels[lab],
        config,
        streams,
        state=phase_optimizer(config, streams, "p"),
        tracker=tracker,
        after_epoch=bn_refresh(model, data, config),
    )
    return model, losses, tracker


def init_phi(config: TrainConfig, data: PreparedData, streams: RunStreams, tracker_on: bool = True):
    """Memory network trained on the labeled set only."""
    lab = list(data.split.train_labeled)
    _check_classes(data.labels[lab], data.dataset.num_classes)
    model = init_memnet(
        streams.init_q, data.feature_dim, config.hidden_dim, data.dataset.num_classes, config.hops, config.memnet_dropout
    )
    tracker = _val_tracker(model, lambda idx: memnet_proba(model, data, idx), data, config) if tracker_on else None
    losses = run_phase(
        model.params,
        memnet_batch_loss(model, data, data.bank),
        lab,
        data.labels[lab],
        config,
        streams,
        state=phase_optimizer(config, streams, "q"),
        tracker=tracker,
    )
    return model, losses, tracker


def _check_classes(labels: np.ndarray, C: int) -> None:
    if labels.size == 0:
        raise ValueError("labeled set is empty")
    missing = set(range(C)) - set(labels.tolist())
    if missing:
        raise ValueError(f"classes {sorted(missing)} are absent from the labeled set")


def e_step(
    p: GnnModel,
    q: MemNetModel,
    bank: MemoryBank,
    labeled: AugmentedLabeledSet,
    unlabeled: Sequence[int],
    config: TrainConfig,
    data: PreparedData,
    streams: RunStreams,
    tracker: Optional[BestTracker] = None,
):
    """Train ``q`` on labeled graphs plus ``p``'s top-k pseudo-labels. ``p`` is only read."""
    unlabeled = list(unlabeled)
    k = config.k_for(len(unlabeled))
    probs = gnn_proba(p, data, unlabeled) if unlabeled and k else np.zeros((0, data.dataset.num_classes))
    annotated = PseudoLabelBatch.from_probs(unlabeled[: len(probs)], probs, SOURCE_P)
    top = config.select(annotated, k, data.dataset.num_classes)
    extra_probs = _rows_for(unlabeled, probs, top) if config.soft_targets and len(top) else None
    idx, targets = _compose(labeled.indices, labeled.labels, top, extra_probs, data.dataset.num_classes, config.soft_targets)
    losses = run_phase(
        q.params,
        memnet_batch_loss(q, data, bank),
        idx,
        targets,
        config,
        streams,
        state=phase_optimizer(config, streams, "q"),
        tracker=tracker,
    )
    return q, losses, top


def m_step(
    p: GnnModel,
    q: MemNetModel,
    bank: MemoryBank,
    labeled: AugmentedLabeledSet,
    unlabeled: Sequence[int],
    config: TrainConfig,
    data: PreparedData,
    streams: RunStreams,
    tracker: Optional[BestTracker] = None,
):
    """Train ``p`` on labeled graphs plus ``q``'s top-k pseudo-labels. ``q`` is only read."""
    unlabeled = list(unlabeled)
    k = config.k_for(len(unlabeled))
    probs = memnet_proba(q, data, unlabeled, bank) if unlabeled and k else np.zeros((0, data.dataset.num_classes))
    annotated = PseudoLabelBatch.from_probs(unlabeled[: len(probs)], probs, SOURCE_Q)
    top = config.select(annotated, k, data.dataset.num_classes)
    extra_probs = _rows_for(unlabeled, probs, top) if config.soft_targets and len(top) else None
    idx, targets = _compose(labeled.indices, labeled.labels, top, extra_probs, data.dataset.num_classes, config.soft_targets)
    losses = run_phase(
        p.params,
        gnn_batch_loss(p, data),
        idx,
        targets,
        config,
        streams,
        state=phase_optimizer(config, streams, "p"),
        tracker=tracker,
        after_epoch=bn_refresh(p, data, config),
    )
    return p, losses, top


# -- trace ----------------------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    p_loss: float
    q_loss: float
    labeled: int
    unlabeled: int
    augmented: int
    added: int
    val_acc_p: Optional[float]
    val_acc_q: Optional[float]
    added_correct: Optional[int] = None
    labeled_pool: tuple = field(default=(), repr=False)
    unlabeled_pool: tuple = field(default=(), repr=False)
    augmented_pool: tuple = field(default=(), repr=False)

    def to_line(self) -> str:
        def fmt(v):
            return "nan" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(v)

        return (
            f"round={self.round} p_loss={fmt(self.p_loss)} q_loss={fmt(self.q_loss)} "
            f"labeled={self.labeled} unlabeled={self.unlabeled} augmented={self.augmented} "
            f"added={self.added} added_correct={fmt(self.added_correct)} val_acc_p={fmt(self.val_acc_p)} val_acc_q={fmt(self.val_acc_q)}"
        )


@dataclass
class TrainResult:
    method: str
    gnn: Optional[GnnModel]
    memnet: Optional[MemNetModel]
    trace: list
    data: PreparedData
    ensemble: Optional["EnsembleModel"] = None
    primary: str = "gnn"

    def proba(self, idx) -> np.ndarray:
        if self.primary == "gnn":
            return gnn_proba(self.gnn, self.data, idx)
        if self.primary == "memnet":
            return memnet_proba(self.memnet, self.data, idx)
        return ensemble_proba(self.ensemble, self.data, idx)

    def accuracy(self, idx, network: Optional[str] = None) -> float:
        idx = list(idx)
        truth = self.data.labels[idx]
        if network == "gnn":
            probs = gnn_proba(self.gnn, self.data, idx)
        elif network == "memnet":
            probs = memnet_proba(self.memnet, self.data, idx)
        else:
            probs = self.proba(idx)
        return accuracy(np.argmax(probs, axis=1), truth)

    def test_accuracy(self, network: Optional[str] = None) -> float:
        return self.accuracy(self.data.split.test, network)

    def trace_lines(self) -> list:
        return [r.to_line() for r in self.trace]


def _nan_last(losses: list) -> float:
    return float(losses[-1]) if losses else float("nan")


def _last(tracker: Optional[BestTracker]) -> Optional[float]:
    return tracker.history[-1] if tracker is not None and tracker.history else None


def _record(r, p_losses, q_losses, labeled_orig, unlabeled, augmented, added, tp, tq) -> RoundRecord:
    return RoundRecord(
        round=r,
        p_loss=_nan_last(p_losses),
        q_loss=_nan_last(q_losses),
        labeled=len(labeled_orig),
        unlabeled=len(unlabeled),
        augmented=len(augmented),
        added=added,
        val_acc_p=_last(tp),
        val_acc_q=_last(tq),
        labeled_pool=tuple(labeled_orig),
        unlabeled_pool=tuple(unlabeled),
        augmented_pool=tuple(augmented),
    )


# -- the loop -------------------------------------------------------------------


def em_loop(
    dataset: GraphDataset,
    split: SplitSpec,
    config: TrainConfig,
    data: Optional[PreparedData] = None,
    consistency_check: bool = True,
) -> TrainResult:
    """Alternate E and M phases until the pool is exhausted, growth stalls or ``max_rounds``.

    With ``consistency_check=False`` (the KGNN-Sep ablation) each network's
    top-k annotations go straight into the *other* network's training set
    without the agreement filter.
    """
    data = data or prepare_data(dataset, split, config)
    streams = RunStreams.from_seed(config.seed)
    p, p_losses, tp = init_theta(config, data, streams)
    q, q_losses, tq = init_phi(config, data, streams)

    original = {int(i): int(data.labels[i]) for i in split.train_labeled}
    labeled = AugmentedLabeledSet(dict(original))
    # separate per-network sets for the no-intersection variant
    for_p = AugmentedLabeledSet(dict(original))
    for_q = AugmentedLabeledSet(dict(original))
    unlabeled = list(split.train_unlabeled)
    n0 = len(unlabeled)
    min_new = config.min_new(n0)
    augmented: list = []
    trace = [_record(0, p_losses, q_losses, original, unlabeled, augmented, 0, tp, tq)]

    for r in range(1, config.max_rounds + 1):
        bank = data.bank
        if config.pseudo_in_bank and labeled.consistent:
            aug = list(labeled.consistent)
            bank = MemoryBank(
                sp.vstack([data.bank.features, data.wl[aug]]).tocsr(),
                np.concatenate([data.bank.labels, list(labeled.consistent.values())]),
                data.bank.graph_ids + tuple(aug),
                data.vocab.uid,
            )
        q_train = labeled if consistency_check else for_q
        p_train = labeled if consistency_check else for_p
        q, q_losses, top_p = e_step(p, q, bank, q_train, unlabeled, config, data, streams, tq)
        p, p_losses, top_q = m_step(p, q, bank, p_train, unlabeled, config, data, streams, tp)

        k = config.k_for(len(unlabeled))
        if unlabeled and k:
            C = data.dataset.num_classes
            sel_p = config.select(PseudoLabelBatch.from_probs(unlabeled, gnn_proba(p, data, unlabeled), SOURCE_P), k, C)
            sel_q = config.select(
                PseudoLabelBatch.from_probs(unlabeled, memnet_proba(q, data, unlabeled, bank), SOURCE_Q), k, C
            )
        else:
            sel_p = sel_q = PseudoLabelBatch()

        if consistency_check:
            delta = intersect_consistent(sel_p, sel_q)
            labeled.add(delta)
            moved = list(delta)
            correct = sum(int(data.labels[i] == y) for i, y in delta.items())
        else:
            to_q = {e.index: e.label for e in sel_p}
            to_p = {e.index: e.label for e in sel_q}
            for_q.add(to_q)
            for_p.add(to_p)
            moved = sorted(set(to_q) | set(to_p))
            correct = sum(
                int(all(d[i] == data.labels[i] for d in (to_q, to_p) if i in d)) for i in moved
            )
        moved_set = set(moved)
        unlabeled = [i for i in unlabeled if i not in moved_set]
        augmented.extend(moved)
        trace.append(_record(r, p_losses, q_losses, original, unlabeled, augmented, len(moved), tp, tq))
        trace[-1].added_correct = correct
        log.info(trace[-1].to_line())
        if not unlabeled or len(moved) < min_new:
            break

    tp.restore_best()
    tq.restore_best()
    method = "kgnn" if consistency_check else "kgnn-sep"
    return TrainResult(method, p, q, trace, data)


def train_kgnn(dataset, split, config, data=None) -> TrainResult:
    return em_loop(dataset, split, config, data, consistency_check=True)


def train_kgnn_sep(dataset, split, config, data=None) -> TrainResult:
    return em_loop(dataset, split, config, data, consistency_check=False)


def train_gnn_sup(dataset, split, config, data=None) -> TrainResult:
    data = data or prepare_data(dataset, split, config)
    streams = RunStreams.from_seed(config.seed)
    p, losses, tp = init_theta(config, data, streams)
    original = list(split.train_labeled)
    trace = [_record(0, losses, [], original, list(split.train_unlabeled), [], 0, tp, None)]
    tp.restore_best()
    return TrainResult("gnn-sup", p, None, trace, data)


def train_memnn_sup(dataset, split, config, data=None) -> TrainResult:
    data = data or prepare_data(dataset, split, config)
    streams = RunStreams.from_seed(config.seed)
    q, losses, tq = init_phi(config, data, streams)
    original = list(split.train_labeled)
    trace = [_record(0, [], losses, original, list(split.train_unlabeled), [], 0, None, tq)]
    tq.restore_best()
    return TrainResult("memnn-sup", None, q, trace, data, primary="memnet")


def _self_training(
    config: TrainConfig,
    data: PreparedData,
    params: dict,
    loss_fn: Callable,
    proba_fn: Callable,
    tracker: BestTracker,
    init_losses: list,
    streams: RunStreams,
    slot: str,
    after_epoch: Optional[Callable] = None,
) -> list:
    """Generic self-training: a network's own top-k predictions join its training set."""
    split = data.split
    original = {int(i): int(data.labels[i]) for i in split.train_labeled}
    labeled = AugmentedLabeledSet(dict(original))
    unlabeled = list(split.train_unlabeled)
    min_new = config.min_new(len(unlabeled))
    augmented: list = []

    def rec(r, losses, added):
        p_losses, q_losses = (losses, []) if slot == "p" else ([], losses)
        tp, tq = (tracker, None) if slot == "p" else (None, tracker)
        return _record(r, p_losses, q_losses, original, unlabeled, augmented, added, tp, tq)

    trace = [rec(0, init_losses, 0)]
    for r in range(1, config.max_rounds + 1):
        k = config.k_for(len(unlabeled))
        if unlabeled and k:
            top = config.select(PseudoLabelBatch.from_probs(unlabeled, proba_fn(unlabeled), slot), k, data.dataset.num_classes)
        else:
            top = PseudoLabelBatch()
        labeled.add({e.index: e.label for e in top})
        moved = set(top.indices)
        unlabeled = [i for i in unlabeled if i not in moved]
        augmented.extend(top.indices)
        losses = run_phase(
            params,
            loss_fn,
            labeled.indices,
            labeled.labels,
            config,
            streams,
            state=phase_optimizer(config, streams, slot),
            tracker=tracker,
            after_epoch=after_epoch,
        )
        trace.append(rec(r, losses, len(moved)))
        trace[-1].added_correct = sum(int(data.labels[e.index] == e.label) for e in top)
        if not unlabeled or len(moved) < min_new:
            break
    tracker.restore_best()
    return trace


def train_gnn_self(dataset, split, config, data=None) -> TrainResult:
    data = data or prepare_data(dataset, split, config)
    streams = RunStreams.from_seed(config.seed)
    p, losses, tp = init_theta(config, data, streams)
    trace = _self_training(
        config,
        data,
        p.params,
        gnn_batch_loss(p, data),
        lambda idx: gnn_proba(p, data, idx),
        tp,
        losses,
        streams,
        "p",
        bn_refresh(p, data, config),
    )
    return TrainResult("gnn-self", p, None, trace, data)


# -- ensemble ablation ------------------------------------------------------------


@dataclass
class EnsembleModel:
    """GIN readout and memory readout concatenated in front of one shared head."""

    gnn: GnnModel
    memnet: MemNetModel
    head: dict
    dropout: float
    params: dict

    @property
    def head_input_dim(self) -> int:
        return self.head["w1"].shape[0]

    def buffers(self) -> dict:
        return self.gnn.buffers()

    def load_buffers(self, values: dict) -> None:
        self.gnn.load_buffers(values)


def init_ensemble(config: TrainConfig, data: PreparedData, streams: RunStreams) -> EnsembleModel:
    C = data.dataset.num_classes
    g = init_gnn(streams.init_p, data.node_feature_dim, config.hidden_dim, C, config.gnn_layers, config.dropout)
    m = init_memnet(streams.init_q, data.feature_dim, config.hidden_dim, C, config.hops, config.memnet_dropout)
    width = g.hidden_dim + m.hidden_dim
    head = {
        "w1": ad.glorot_uniform(streams.init_p, width, config.hidden_dim, "ens.w1"),
        "b1": ad.zeros_param(config.hidden_dim, "ens.b1"),
        "w2": ad.glorot_uniform(streams.init_p, config.hidden_dim, C, "ens.w2"),
        "b2": ad.zeros_param(C, "ens.b2"),
    }
    params = {}
    # per-network heads are unused by the ensemble and therefore not trained
    for name, t in g.params.items():
        if not name.startswith("head."):
            params[name] = t
    for name, t in m.params.items():
        if not name.startswith("memhead."):
            params[name] = t
    params.update({t.name: t for t in head.values()})
    return EnsembleModel(g, m, head, config.dropout, params)


def ensemble_logits(model: EnsembleModel, data: PreparedData, idx, bank=None, train=False, rng=None) -> ad.Tensor:
    bank = bank if bank is not None else data.bank
    h = gnn_embed(model.gnn, data.batch(idx), train, rng)
    o = memnet_readout(model.memnet, bank, data.queries(idx))
    return mlp_head(model.head, ad.concat([h, o], axis=1), model.dropout, train, rng)


def ensemble_proba(model: EnsembleModel, data: PreparedData, idx, batch_size: int = 256) -> np.ndarray:
    idx = list(idx)
    if not idx:
        return np.zeros((0, data.dataset.num_classes))
    return np.concatenate(
        [ad.row_softmax(ensemble_logits(model, data, idx[i : i + batch_size])).value for i in range(0, len(idx), batch_size)]
    )


def train_ensemble_self(dataset, split, config, data=None) -> TrainResult:
    data = data or prepare_data(dataset, split, config)
    streams = RunStreams.from_seed(config.seed)
    model = init_ensemble(config, data, streams)
    _check_classes(data.labels[list(split.train_labeled)], dataset.num_classes)

    def loss_fn(bidx, btargets, rng):
        return ad.cross_entropy(ensemble_logits(model, data, bidx, train=True, rng=rng), btargets)

    proba = lambda idx: ensemble_proba(model, data, idx)
    tracker = _val_tracker(model, proba, data, config)
    lab = list(split.train_labeled)
    refresh = bn_refresh(model.gnn, data, config)
    losses = run_phase(
        model.params,
        loss_fn,
        lab,
        data.labels[lab],
        config,
        streams,
        state=phase_optimizer(config, streams, "p"),
        tracker=tracker,
        after_epoch=refresh,
    )
    trace = _self_training(config, data, model.params, loss_fn, proba, tracker, losses, streams, "p", refresh)
    return TrainResult("ensemble-self", model.gnn, model.memnet, trace, data, ensemble=model, primary="ensemble")


METHODS = {
    "kgnn": train_kgnn,
    "kgnn-sep": train_kgnn_sep,
    "gnn-sup": train_gnn_sup,
    "memnn-sup": train_memnn_sup,
    "gnn-self": train_gnn_self,
    "ensemble-self": train_ensemble_self,
}


def train_method(method: str, dataset: GraphDataset, split: SplitSpec, config: TrainConfig, data=None) -> TrainResult:
    try:
        fn = METHODS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}") from None
    return fn(dataset, split, config, data)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
