import numpy as np
import pytest
import scipy.sparse as sp

from kgnn import autodiff as ad
from kgnn.memnet import (
    MemoryBank,
    init_memnet,
    memnet_forward,
    memnet_loss_supervised,
    memnet_predict,
    memnet_readout,
)
from oracles import finite_difference_check


def _bank(rows, labels=None):
    X = sp.csr_matrix(np.asarray(rows, dtype=float))
    labels = labels if labels is not None else list(range(X.shape[0]))
    return MemoryBank(X, [y % 2 for y in labels], list(range(X.shape[0])))


def _model(F=4, h=6, C=2, hops=3, seed=0):
    return init_memnet(np.random.default_rng(seed), F, h, C, hops)


def test_bank_checks_lengths():
    with pytest.raises(ValueError):
        MemoryBank(sp.csr_matrix(np.ones((2, 3))), [0], [0, 1])


def test_single_memory_gets_all_attention(rng):
    m = _model()
    bank = _bank([[1, 0, 2, 0]])
    q = sp.csr_matrix(rng.random((3, 4)))
    _, att = memnet_readout(m, bank, q, return_attention=True)
    assert len(att) == 3
    for p in att:
        assert np.all(p == 1.0)


def test_attention_prefers_matching_memory():
    # identity embeddings and two orthogonal memories: scores are plain dot products
    F = 3
    m = _model(F=F, h=F, hops=1)
    for A in m.embeddings:
        A.value[...] = 2.0 * np.eye(F)
    m.query_embedding.value[...] = 2.0 * np.eye(F)
    bank = _bank([[1, 0, 0], [0, 1, 0]])
    _, att = memnet_readout(m, bank, sp.csr_matrix([[1.0, 0, 0]]), return_attention=True)
    # logits: q = 2 e1, memories 2 e1 and 2 e2 -> scores 4 and 0
    expected = np.exp([4.0, 0.0]) / np.exp([4.0, 0.0]).sum()
    np.testing.assert_allclose(att[0][0], expected, atol=1e-12)


def test_duplicate_memories_share_attention(rng):
    m = _model()
    row = [1, 2, 0, 1]
    bank = _bank([row, [0, 1, 1, 0], row])
    _, att = memnet_readout(m, bank, sp.csr_matrix(rng.random((2, 4))), return_attention=True)
    for p in att:
        np.testing.assert_allclose(p[:, 0], p[:, 2], atol=1e-15)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_memory_order_does_not_matter(rng):
    m = _model()
    rows = rng.random((5, 4))
    perm = rng.permutation(5)
    q = sp.csr_matrix(rng.random((3, 4)))
    a = memnet_forward(m, _bank(rows), q).value
    b = memnet_forward(m, _bank(rows[perm], list(perm)), q).value
    assert np.max(np.abs(a - b)) < 1e-9


def test_errors():
    m = _model()
    with pytest.raises(ValueError):
        memnet_readout(m, _bank(np.zeros((0, 4))), sp.csr_matrix(np.ones((1, 4))))
    with pytest.raises(ad.ShapeError):
        memnet_readout(m, _bank(np.ones((2, 4))), sp.csr_matrix(np.ones((1, 3))))
    with pytest.raises(ValueError):
        init_memnet(np.random.default_rng(0), 4, 4, 2, hops=0)


def test_weight_tying_layout():
    m = _model(hops=3)
    assert len(m.embeddings) == 4
    assert {A.shape for A in m.embeddings} == {(4, 6)}


def test_uniform_head_loss_is_log_c(rng):
    m = _model(C=3)
    for t in m.head.values():
        t.value[...] = 0.0
    loss = memnet_loss_supervised(m, _bank(rng.random((3, 4))), sp.csr_matrix(rng.random((2, 4))), [0, 2])
    assert loss.item() == pytest.approx(np.log(3))


def test_batch_loss_and_prediction_match_singles(rng):
    m = _model()
    bank = _bank(rng.random((4, 4)))
    Q = sp.csr_matrix(rng.random((4, 4)))
    y = [0, 1, 1, 0]
    batch = memnet_loss_supervised(m, bank, Q, y).item()
    singles = [memnet_loss_supervised(m, bank, Q[i], [y[i]]).item() for i in range(4)]
    assert batch == pytest.approx(np.mean(singles), abs=1e-12)
    labels, conf = memnet_predict(m, bank, Q, batch_size=3)
    for i in range(4):
        li, ci = memnet_predict(m, bank, Q[i])
        assert li[0] == labels[i] and ci[0] == pytest.approx(conf[i], abs=1e-12)


def test_fits_single_label_task(rng):
    m = _model()
    bank = _bank(rng.random((4, 4)), [0, 0, 0, 0])
    Q = sp.csr_matrix(rng.random((8, 4)))
    y = np.zeros(8, dtype=int)
    state = ad.AdamState(learning_rate=0.05, weight_decay=0.0)
    names = list(m.params)
    for _ in range(200):
        with ad.Tape() as tape:
            loss = memnet_loss_supervised(m, bank, Q, y)
        ad.adam_step(m.params, dict(zip(names, tape.backward(loss, [m.params[n] for n in names]))), state)
    assert memnet_loss_supervised(m, bank, Q, y).item() < 1e-3


def test_gradients_through_all_hops():
    r = np.random.default_rng(5)
    m = _model(F=6, h=5, C=3, hops=3, seed=2)
    bank = _bank(r.random((4, 6)))
    Q = sp.csr_matrix(r.random((2, 6)))
    y = np.array([2, 0])
    checks = finite_difference_check(lambda: memnet_loss_supervised(m, bank, Q, y), m.params, r, total=100)
    assert max(c[-1] for c in checks) < 1e-4
    assert {c[0] for c in checks} >= {"mem.A0", "mem.A3", "mem.B"}
