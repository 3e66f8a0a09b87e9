import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fingat import autodiff as ad
from fingat.autodiff import GradTape, Tensor, backward, check_gradients, finite_diff_check


def leaf(data):
    return Tensor(data, requires_grad=True)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


# --- tensor basics --------------------------------------------------------

def test_tensor_rejects_empty_and_nonfinite():
    with pytest.raises(ad.ShapeError):
        Tensor(np.zeros((0, 3)))
    with pytest.raises(ad.NumericError):
        Tensor([1.0, np.nan])
    with pytest.raises(ad.NumericError):
        Tensor([np.inf])


def test_tensor_is_float64_row_major():
    t = Tensor([[1, 2], [3, 4]])
    assert t.data.dtype == np.float64
    assert t.data.flags["C_CONTIGUOUS"]
    assert t.size == 4 and t.shape == (2, 2)


# --- matmul ---------------------------------------------------------------

def test_matmul_identity_and_scalar():
    M = np.arange(9.0).reshape(3, 3)
    assert np.array_equal((Tensor(np.eye(3)) @ Tensor(M)).data, M)
    assert (Tensor([[2.0]]) @ Tensor([[3.0]])).data.tolist() == [[6.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    out = (Tensor(a) @ Tensor(b)).data
    np.testing.assert_allclose(out, triple_loop(a, b), rtol=0, atol=1e-13)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))


def test_matmul_backward_rule():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    with GradTape() as tape:
        loss = ad.tsum((a @ b) * g)
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_matmul_identity_associativity_bitwise():
    rng = np.random.default_rng(1)
    A, B = rng.standard_normal((3, 4)), rng.standard_normal((4, 5))
    I = Tensor(np.eye(4))
    left = ((Tensor(A) @ I) @ Tensor(B)).data
    right = (Tensor(A) @ (I @ Tensor(B))).data
    direct = (Tensor(A) @ Tensor(B)).data
    assert np.array_equal(left, direct) and np.array_equal(right, direct)


# --- element-wise maps ----------------------------------------------------

def test_elementwise_examples():
    assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert ad.leaky_relu(Tensor([-1.0]), 0.2).data.tolist() == [-0.2]
    assert ad.sigmoid(Tensor([0.0])).data.tolist() == [0.5]
    assert ad.elementwise_map(Tensor([-1.0]), "leaky_relu").data.tolist() == [-0.2]


def test_log_domain_error():
    with pytest.raises(ad.DomainError):
        ad.log(Tensor([1.0, 0.0]))
    with pytest.raises(ad.DomainError):
        ad.elementwise_map(Tensor([-2.0]), "log")


def test_sigmoid_is_stable_at_extremes():
    y = ad.sigmoid(Tensor([-800.0, 800.0])).data
    assert y[0] >= 0.0 and y[1] == 1.0
    assert np.isfinite(y).all()


@pytest.mark.parametrize("f", ["tanh", "sigmoid", "exp", "relu", "leaky_relu"])
def test_elementwise_gradients(f):
    rng = np.random.default_rng(7)
    x = leaf(rng.standard_normal(6))
    w = rng.standard_normal(6)
    assert finite_diff_check(lambda t: ad.tsum(ad.elementwise_map(t, f) * w), x) < 1e-4


def test_sigmoid_sum_error_tiny():
    x = leaf(np.linspace(-2, 2, 7))
    assert finite_diff_check(lambda t: ad.tsum(ad.sigmoid(t)), x) < 1e-6


def test_log_gradient():
    x = leaf(np.array([0.5, 1.0, 3.0]))
    assert finite_diff_check(lambda t: ad.tsum(ad.log(t)), x) < 1e-4


# --- softmax --------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax(Tensor([2.0, 2.0, 2.0])).data, [1 / 3] * 3, atol=1e-15)
    np.testing.assert_allclose(ad.softmax(Tensor([0.0, math.log(2)])).data, [1 / 3, 2 / 3], atol=1e-15)
    assert ad.softmax(Tensor([1000.0, 1000.0])).data.tolist() == [0.5, 0.5]


def test_softmax_empty_is_shape_error():
    with pytest.raises(ad.ShapeError):
        ad.softmax(Tensor._wrap(np.zeros(0), False))


vectors = arrays(np.float64, st.integers(1, 12),
                 elements=st.floats(-50, 50, allow_nan=False, allow_infinity=False))


@given(vectors, st.randoms(use_true_random=False))
@settings(max_examples=200, deadline=None)
def test_softmax_sums_to_one_and_is_permutation_equivariant(x, rnd):
    y = ad.softmax(Tensor(x)).data
    assert abs(y.sum() - 1.0) <= 1e-12
    assert (y >= 0).all()
    perm = list(range(len(x)))
    rnd.shuffle(perm)
    np.testing.assert_allclose(ad.softmax(Tensor(x[perm])).data, y[perm], rtol=0, atol=1e-15)


def test_softmax_gradient():
    x = leaf(np.array([0.3, -1.2, 2.0, 0.1]))
    w = np.array([1.0, -2.0, 0.5, 3.0])
    assert finite_diff_check(lambda t: ad.tsum(ad.softmax(t) * w), x) < 1e-4


# --- concat ---------------------------------------------------------------

def test_concat_examples_and_errors():
    assert ad.concat([Tensor([1.0, 2.0]), Tensor([3.0])]).data.tolist() == [1.0, 2.0, 3.0]
    single = Tensor([4.0, 5.0])
    assert ad.concat([single]).data.tolist() == [4.0, 5.0]
    with pytest.raises(ad.ShapeError):
        ad.concat([Tensor(np.ones((2, 2))), Tensor(np.ones((3, 3)))], axis=0)


def test_concat_gradient_splits():
    rng = np.random.default_rng(2)
    xs = [leaf(rng.standard_normal((2, k))) for k in (1, 3, 2)]
    w = rng.standard_normal((2, 6))
    res = check_gradients(lambda: ad.tsum(ad.concat(xs, axis=1) * w), xs)
    assert res.passed and res.n_checked == 12


# --- element-wise max -----------------------------------------------------

def test_reduce_max_examples():
    out = ad.reduce_max_elementwise([Tensor([1.0, 4.0]), Tensor([3.0, 2.0])])
    assert out.data.tolist() == [3.0, 4.0]
    v = Tensor([1.0, 2.0])
    assert ad.reduce_max_elementwise([v]).data.tolist() == [1.0, 2.0]
    with pytest.raises(ad.DomainError):
        ad.reduce_max_elementwise([])


def test_reduce_max_matches_scan_oracle():
    rng = np.random.default_rng(11)
    vs = [rng.standard_normal(8) for _ in range(10)]
    expected = []
    for k in range(8):
        best = vs[0][k]
        for v in vs[1:]:
            if v[k] > best:
                best = v[k]
        expected.append(best)
    assert ad.reduce_max_elementwise([Tensor(v) for v in vs]).data.tolist() == expected


def test_reduce_max_tie_goes_to_first():
    a, b = leaf([1.0, 2.0]), leaf([1.0, 0.0])
    with GradTape() as tape:
        loss = ad.tsum(ad.reduce_max_elementwise([a, b]))
    tape.backward(loss)
    assert a.grad.tolist() == [1.0, 1.0]
    assert b.grad.tolist() == [0.0, 0.0]


# --- backward -------------------------------------------------------------

def test_backward_sum_gives_ones():
    x = leaf(np.random.default_rng(0).standard_normal((3, 2)))
    with GradTape():
        loss = ad.tsum(x)
    backward(loss)
    assert np.array_equal(x.grad, np.ones((3, 2)))


def test_backward_square():
    x = leaf([3.0])
    with GradTape():
        loss = ad.tsum(x * x)
    loss.backward()
    assert x.grad.tolist() == [6.0]


def test_backward_shared_subexpression_accumulates():
    x = leaf([1.5])
    with GradTape():
        loss = ad.tsum(x + x)
    backward(loss)
    assert x.grad.tolist() == [2.0]


def test_backward_nonscalar_is_shape_error():
    x = leaf([1.0, 2.0])
    with GradTape():
        y = x * 2.0
    with pytest.raises(ad.ShapeError):
        backward(y)


def test_repeated_backward_accumulates_on_leaves():
    x = leaf([2.0])
    with GradTape() as tape:
        loss = ad.tsum(x * x)
    tape.backward(loss)
    tape.backward(loss)
    assert x.grad.tolist() == [8.0]


def test_backward_visits_in_reverse_recording_order():
    x = leaf([0.5])
    visited = []
    with GradTape() as tape:
        y = ad.tanh(x)
        z = y * 3.0
        loss = ad.tsum(z)
    ops = [n.op for n in tape.nodes]
    for node in reversed(tape.nodes):
        fn = node.backward
        node.backward = (lambda f, op: lambda g: (visited.append(op), f(g))[1])(fn, node.op)
    tape.backward(loss)
    assert visited == list(reversed(ops))


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with GradTape() as tape:
        with ad.no_grad():
            ad.tanh(x)
    assert len(tape) == 0


def test_composite_gru_gat_graph_passes_gradcheck():
    from fingat.layers import GatParams, GruParams, complete_graph, gat_forward, gru_forward
    rng = np.random.default_rng(5)
    gru = GruParams.init(rng, 3, 4)
    gat = GatParams.init(rng, 4, 4)
    seq = [Tensor(rng.standard_normal((5, 3))) for _ in range(3)]
    w = rng.standard_normal((5, 4))

    def loss():
        _, h = gru_forward(gru, seq)
        out, _ = gat_forward(gat, complete_graph(5), h)
        return ad.tsum(out * w)

    params = [t for _, t in gru.named()] + [t for _, t in gat.named()]
    assert check_gradients(loss, params).passed


def test_finite_diff_check_on_sum_is_exact():
    x = leaf(np.random.default_rng(9).standard_normal(5))
    assert finite_diff_check(lambda t: ad.tsum(t), x) < 1e-10


def test_finite_diff_check_detects_wrong_rule(monkeypatch):
    fwd, _ = ad.ACTIVATIONS["tanh"]
    monkeypatch.setitem(ad.ACTIVATIONS, "tanh", (fwd, lambda x, y: 1.0 - y))
    x = leaf(np.array([0.3, -0.7]))
    assert finite_diff_check(lambda t: ad.tsum(ad.tanh(t)), x) > 1e-2


# --- property: every differentiable op on random shapes -----------------

OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / (ad.exp(b) + 1.0),
    "tanh": lambda a, b: ad.tanh(a) * b,
    "sigmoid": lambda a, b: ad.sigmoid(a) + b,
    "softplus": lambda a, b: ad.softplus(a) * b,
    "softmax_rows": lambda a, b: ad.softmax(a, axis=-1) * b,
    "transpose": lambda a, b: ad.transpose(a) @ b,
    "index": lambda a, b: ad.index(a, (slice(None), 0)) * ad.index(b, (slice(None), 0)),
    "concat": lambda a, b: ad.concat([a, b], axis=1),
    "stack": lambda a, b: ad.stack([a, b], axis=0),
}


@given(st.sampled_from(sorted(OPS)), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
@settings(max_examples=60, deadline=None)
def test_op_gradients_on_random_shapes(op, m, n, seed):
    rng = np.random.default_rng(seed)
    a = leaf(rng.standard_normal((m, n)))
    b = leaf(rng.standard_normal((m, n) if op != "transpose" else (m, n)))
    f = OPS[op]
    with ad.no_grad():
        w = rng.standard_normal(f(a, b).shape)
    res = check_gradients(lambda: ad.tsum(f(a, b) * w), [a, b])
    assert res.max_rel_error < 1e-4, (op, res.worst)


def test_segment_ops_match_dense_equivalents():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((7, 3))
    seg = np.array([2, 0, 0, 1, 2, 2, 1])
    np.testing.assert_allclose(ad.segment_sum(Tensor(x), seg, 3).data,
                               np.stack([x[seg == s].sum(0) for s in range(3)]))
    np.testing.assert_array_equal(ad.segment_max(Tensor(x), seg, 3).data,
                                  np.stack([x[seg == s].max(0) for s in range(3)]))
    sm = ad.segment_softmax(Tensor(x[:, 0]), seg, 3).data
    for s in range(3):
        e = np.exp(x[seg == s, 0] - x[seg == s, 0].max())
        np.testing.assert_allclose(sm[seg == s], e / e.sum())
