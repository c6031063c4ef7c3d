import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from kgnn import autodiff as ad
from oracles import finite_difference_check


def _fd(loss_fn, params, rng, total=60):
    return max(r[-1] for r in finite_difference_check(loss_fn, params, rng, total=total))


def test_cross_entropy_hand_values():
    # 3 x 4 logits, mean over rows of logsumexp(row) - row[target]
    logits = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0], [-1.0, 0.5, 2.0, -3.0]])
    targets = np.array([3, 1, 0])
    expected = np.mean(
        [
            np.log(np.exp(1) + np.exp(2) + np.exp(3) + np.exp(4)) - 4.0,
            np.log(4.0),
            np.log(np.exp(-1) + np.exp(0.5) + np.exp(2) + np.exp(-3)) + 1.0,
        ]
    )
    assert ad.cross_entropy(logits, targets).item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_soft_equals_hard_for_one_hot():
    logits = np.random.default_rng(0).normal(size=(5, 3))
    y = np.array([0, 2, 1, 1, 0])
    hard = ad.cross_entropy(logits, y).item()
    soft = ad.cross_entropy(logits, np.eye(3)[y]).item()
    assert hard == pytest.approx(soft, abs=1e-14)


def test_cross_entropy_is_stable_for_large_logits():
    loss = ad.cross_entropy(np.array([[1000.0, 0.0]]), np.array([1])).item()
    assert loss == pytest.approx(1000.0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    p = ad.row_softmax(ad.Tensor(x)).value
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-12)
    assert np.all(p >= 0)


def test_adam_two_steps_by_hand():
    lr, wd, b1, b2, eps = 0.01, 5e-4, 0.9, 0.999, 1e-8
    w = ad.parameter(np.array([0.5, -1.0]), "w")
    state = ad.AdamState(lr, wd, b1, b2, eps)
    g1, g2 = np.array([0.2, -0.4]), np.array([-0.1, 0.3])

    x = np.array([0.5, -1.0])
    m = np.zeros(2)
    v = np.zeros(2)
    for t, g in enumerate((g1, g2), start=1):
        gg = g + wd * x
        m = b1 * m + (1 - b1) * gg
        v = b2 * v + (1 - b2) * gg**2
        x = x - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        ad.adam_step({"w": w}, {"w": g}, state)
        np.testing.assert_allclose(w.value, x, rtol=0, atol=1e-15)
    assert state.step == 2


def test_adam_zero_gradient_no_decay_keeps_params():
    w = ad.parameter(np.array([1.0, 2.0]), "w")
    state = ad.AdamState(weight_decay=0.0)
    ad.adam_step({"w": w}, {"w": np.zeros(2)}, state)
    assert w.value.tolist() == [1.0, 2.0]


def test_dropout_statistics():
    rng = np.random.default_rng(0)
    n, rate = 100_000, 0.5
    out = ad.dropout(ad.Tensor(np.ones(n)), rate, True, rng).value
    kept = np.count_nonzero(out)
    sigma = np.sqrt(n * rate * (1 - rate))
    assert abs(kept - n * (1 - rate)) < 3 * sigma
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 3 * 2 * np.sqrt(rate * (1 - rate) / n)


def test_dropout_is_identity_at_eval():
    x = ad.Tensor(np.arange(5.0))
    assert ad.dropout(x, 0.5, False, None) is x


def test_unreached_parameter_gets_zero_gradient():
    a = ad.parameter(np.ones((2, 2)), "a")
    b = ad.parameter(np.ones((2, 2)), "b")
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.mul(a, a))
    ga, gb = tape.backward(loss, [a, b])
    assert np.all(ga == 2.0)
    assert np.all(gb == 0.0)


def test_backward_needs_scalar():
    a = ad.parameter(np.ones(3))
    with ad.Tape() as tape:
        y = ad.scale(a, 2.0)
    with pytest.raises(ad.ShapeError):
        tape.backward(y, [a])


def test_non_finite_rejected():
    with pytest.raises(ad.NonFiniteError):
        ad.Tensor([1.0, np.nan])


def test_matmul_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_shared_input_accumulates():
    x = ad.parameter(np.array([[1.0, 2.0]]))
    with ad.Tape() as tape:
        loss = ad.reduce_sum(ad.add(ad.mul(x, x), x))
    (g,) = tape.backward(loss, [x])
    np.testing.assert_allclose(g, 2 * x.value + 1)


def test_primitive_gradients(rng):
    a = ad.parameter(rng.normal(size=(5, 3)), "a")
    w = ad.parameter(rng.normal(size=(3, 4)), "w")
    b = ad.parameter(rng.normal(size=4), "b")
    s = sp.random(6, 5, density=0.5, random_state=1, format="csr")
    seg = np.array([0, 1, 1, 2, 0, 2])
    idx = np.array([4, 0, 0, 2, 3, 1])
    y = np.array([0, 3, 1, 2, 2, 1])

    def loss():
        h = ad.relu(ad.add(ad.matmul(a, w), b))
        g = ad.gather_rows(h, idx)
        z = ad.add(g, ad.sparse_matmul(s, ad.matmul(a, w)))
        pooled = ad.segment_sum(ad.row_softmax(z), seg, 3)
        t = ad.concat([pooled, ad.matmul(pooled, ad.transpose(pooled))], axis=1)
        return ad.add(ad.cross_entropy(z, y), ad.scale(ad.reduce_sum(ad.mul(t, t)), 0.1))

    assert _fd(loss, {"a": a, "w": w, "b": b}, rng) < 1e-6


def test_log_and_log_softmax_gradients(rng):
    x = ad.parameter(rng.normal(size=(3, 4)), "x")

    def loss():
        return ad.reduce_sum(ad.add(ad.log_softmax(x), ad.log(ad.row_softmax(x))))

    assert _fd(loss, {"x": x}, rng, total=12) < 1e-6


def test_batch_norm_gradients(rng):
    x = ad.parameter(rng.normal(size=(7, 3)), "x")
    gamma = ad.parameter(rng.normal(size=3), "gamma")
    beta = ad.parameter(rng.normal(size=3), "beta")
    stats = ad.BatchNormStats.create(3)
    y = rng.integers(0, 3, size=7)

    def loss():
        return ad.cross_entropy(ad.batch_norm(x, gamma, beta, stats, train=True), y)

    assert _fd(loss, {"x": x, "gamma": gamma, "beta": beta}, rng) < 1e-6


def test_batch_norm_train_output_is_standardized(rng):
    x = rng.normal(3.0, 2.0, size=(50, 4))
    stats = ad.BatchNormStats.create(4, momentum=1.0)
    out = ad.batch_norm(ad.Tensor(x), np.ones(4), np.zeros(4), stats, train=True).value
    np.testing.assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=0), 1.0, atol=1e-5)
    np.testing.assert_allclose(stats.var, x.var(axis=0, ddof=1))


def test_params_round_trip(tmp_path, rng):
    params = {"w": ad.parameter(rng.normal(size=(3, 2)), "w"), "b": ad.parameter(rng.normal(size=2), "b")}
    ad.save_params(params, tmp_path / "a.npz")
    ad.save_params(params, tmp_path / "b.npz")
    assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()
    loaded = ad.load_params(tmp_path / "a.npz")
    for k in params:
        assert np.array_equal(loaded[k], params[k].value)


def test_restore_checks_shapes():
    params = {"w": ad.parameter(np.zeros((2, 2)), "w")}
    with pytest.raises(ad.ShapeError):
        ad.restore(params, {"w": np.zeros(3)})
