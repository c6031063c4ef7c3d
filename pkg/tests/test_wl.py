import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgnn.graph import Graph
from kgnn.synthetic import random_graph
from kgnn.wl import (
    VocabularyMismatch,
    WLVocabulary,
    feature_matrix,
    kernel_matrix,
    kernel_value,
    wl_features,
    wl_label_sequence,
)
from oracles import brute_force_kernel


def test_hand_trace_path_vs_star(path3, star3):
    # degrees: P3 -> [1, 2, 1], star -> [3, 1, 1, 1]; only label 1 is shared at h = 0
    vocab = WLVocabulary()
    a = wl_features(path3, 3, vocab)
    b = wl_features(star3, 3, vocab)
    assert kernel_value(a, b) == 2 * 3
    assert kernel_value(a, a) == 4 * 5
    assert kernel_value(b, b) == 4 * 10


def test_label_sequence_refines(path3):
    seq = wl_label_sequence(path3, 2, WLVocabulary())
    assert seq[1][0] == seq[1][2] != seq[1][1]
    assert len(seq) == 3


def test_vocabulary_columns_are_contiguous(small_graphs):
    vocab = WLVocabulary()
    feats = [wl_features(g, 3, vocab) for g in small_graphs]
    cols = sorted({c for f in feats for c in f.counts})
    assert cols == list(range(len(vocab)))
    # every node contributes one count per iteration
    for g, f in zip(small_graphs, feats):
        assert f.total() == 4 * g.node_count


def test_frozen_vocabulary_does_not_grow(path3, star3):
    vocab = WLVocabulary()
    wl_features(path3, 2, vocab)
    size = len(vocab)
    vocab.freeze()
    f = wl_features(star3, 2, vocab)
    assert len(vocab) == size
    # star shares only the degree-1 label with P3
    assert f.total() == 3


def test_frozen_unseen_labels_still_refine():
    # two unseen labels at h = 0 must not merge into one signature at h = 1
    vocab = WLVocabulary()
    wl_features(Graph(2, [(0, 1)]), 1, vocab)
    vocab.freeze()
    seq = wl_label_sequence(Graph(3, [(0, 1), (1, 2)], node_labels=[7, 8, 7]), 1, vocab)
    assert seq[0][0] < 0 and seq[0][1] < 0 and seq[0][0] != seq[0][1]


def test_mismatched_vocabularies_rejected(path3):
    with pytest.raises(VocabularyMismatch):
        kernel_value(wl_features(path3, 1, WLVocabulary()), wl_features(path3, 1, WLVocabulary()))


def test_feature_matrix_scaling(path3):
    vocab = WLVocabulary()
    f = wl_features(path3, 1, vocab)
    X = feature_matrix([f], len(vocab), scale_by_nodes=True).toarray()
    assert X.sum() == pytest.approx(2.0)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), H=st.integers(0, 4), labels=st.integers(0, 3))
def test_kernel_matches_brute_force(seed, H, labels):
    r = np.random.default_rng(seed)
    g1 = random_graph(r, 8, 0.4, labels)
    g2 = random_graph(r, 8, 0.4, labels)
    vocab = WLVocabulary()
    k = kernel_value(wl_features(g1, H, vocab), wl_features(g2, H, vocab))
    assert k == brute_force_kernel(g1, g2, H)


def test_single_graph_matrix(path3):
    K, _ = kernel_matrix([path3], H=1)
    assert K.values.tolist() == [[10]]
    Kn, _ = kernel_matrix([path3], H=1, normalize=True)
    assert Kn.values.tolist() == [[1.0]]


def test_normalized_matrix_properties(small_graphs):
    Kn, _ = kernel_matrix(small_graphs + [Graph(0)], H=3, normalize=True)
    assert Kn.is_symmetric()
    assert np.all(np.diag(Kn.values) == 1.0)
    off = Kn.values[~np.eye(len(Kn.values), dtype=bool)]
    assert off.min() >= 0.0 and off.max() <= 1.0 + 1e-12
    # the empty graph has zero norm
    assert np.all(Kn.values[-1, :-1] == 0.0)


def test_gram_matrix_psd(small_graphs):
    K, _ = kernel_matrix(small_graphs, H=3)
    assert K.is_symmetric()
    assert K.is_psd()
    assert np.issubdtype(K.values.dtype, np.integer)


def test_kernel_csv(tmp_path, path3, star3):
    K, _ = kernel_matrix([path3, star3], H=3, graph_ids=["a", "b"])
    K.to_csv(tmp_path / "k.csv")
    rows = list(csv.reader(open(tmp_path / "k.csv")))
    assert rows == [["graph_id", "a", "b"], ["a", "20", "6"], ["b", "6", "40"]]
