import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from chacal import numcore as nc
from chacal.numcore import Tensor

from .oracles import gauss_jordan_inverse, triple_loop_matmul


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# -- matmul ---------------------------------------------------------------------
def test_matmul_identity():
    out = nc.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_row_col():
    assert nc.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    got = nc.matmul(t64(a), t64(b)).data
    want = triple_loop_matmul(a, b)
    assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-6


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nc.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_batch_broadcast():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3, 4, 5))
    b = rng.normal(size=(5, 2))
    np.testing.assert_allclose(nc.matmul(t64(a), t64(b)).data, a @ b)


# -- softmax ---------------------------------------------------------------------
def test_softmax_symmetric():
    np.testing.assert_allclose(nc.softmax_rows(Tensor([0.0, 0.0]), np.zeros(2)).data, [0.5, 0.5])


def test_softmax_single_support_is_one_hot():
    out = nc.softmax_rows(Tensor([5.0, 1.0]), np.array([0.0, nc.MASK_VALUE]))
    assert out.data.tolist() == [1.0, 0.0]


def test_softmax_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    want = np.array([math.exp(v) for v in x]) / sum(math.exp(v) for v in x)
    np.testing.assert_allclose(nc.softmax_rows(t64(x)).data, want, atol=1e-7)


def test_softmax_all_masked_row_rejected():
    with pytest.raises(ValueError, match="masked"):
        nc.softmax_rows(Tensor([[1.0, 2.0]]), np.full((1, 2), nc.MASK_VALUE))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 8)),
              elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_rows_are_distributions(x):
    p = nc.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


# -- triangular solve --------------------------------------------------------------
def test_solve_identity():
    c = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(nc.solve_lower_triangular(t64(np.eye(3)), t64(c)).data, c)


def test_solve_hand_substitution():
    y = nc.solve_lower_triangular(t64([[1, 0], [-1, 1]]), t64([[2], [0]])).data
    assert y.tolist() == [[2.0], [2.0]]


def _unit_lower(rng, n, scale=0.3):
    return np.tril(rng.uniform(-scale, scale, (n, n)), -1) + np.eye(n)


def test_solve_matches_gauss_jordan_inverse():
    rng = np.random.default_rng(2)
    b = _unit_lower(rng, 8)
    c = rng.normal(size=(8, 3))
    want = gauss_jordan_inverse(b) @ c
    got = nc.solve_lower_triangular(t64(b), t64(c)).data
    assert np.max(np.abs(got - want)) / np.max(np.abs(want)) < 1e-5


def test_solve_ignores_upper_triangle():
    rng = np.random.default_rng(3)
    b = _unit_lower(rng, 5)
    c = rng.normal(size=(5, 2))
    junk = b + np.triu(rng.normal(size=(5, 5)), 1)
    np.testing.assert_array_equal(nc.solve_lower_triangular(t64(junk), t64(c)).data,
                                  nc.solve_lower_triangular(t64(b), t64(c)).data)


def test_solve_singular_reports_row():
    b = np.eye(4)
    b[2, 2] = 0.0
    with pytest.raises(nc.SingularMatrixError) as err:
        nc.solve_lower_triangular(t64(b), t64(np.ones((4, 1))))
    assert err.value.row == 2


@pytest.mark.parametrize("n", [1, 2, 7, 16, 33, 64])
def test_solver_residual_single_precision(n):
    rng = np.random.default_rng(n)
    b = _unit_lower(rng, n, scale=1.0 / n).astype(np.float32)
    c = rng.normal(size=(n, 5)).astype(np.float32)
    y = nc.solve_lower_triangular(Tensor(b), Tensor(c)).data
    assert y.dtype == np.float32
    assert np.max(np.abs(b.astype(np.float64) @ y - c)) < 1e-5


# -- layer norm -------------------------------------------------------------------------
def test_layer_norm_constant_row():
    out = nc.layer_norm(Tensor([[3.0, 3.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_array_equal(out.data, 0.0)


def test_layer_norm_already_normalised():
    out = nc.layer_norm(t64([1.0, -1.0]), t64(np.ones(2)), t64(np.zeros(2))).data
    np.testing.assert_allclose(out, [1.0, -1.0], atol=1e-5)


def test_layer_norm_direct_formula():
    rng = np.random.default_rng(4)
    x, g, b = rng.normal(size=7), rng.normal(size=7), rng.normal(size=7)
    mu = sum(x) / 7
    var = sum((v - mu) ** 2 for v in x) / 7
    want = [(v - mu) / math.sqrt(var + 1e-5) * gi + bi for v, gi, bi in zip(x, g, b)]
    np.testing.assert_allclose(nc.layer_norm(t64(x), t64(g), t64(b)).data, want, atol=1e-6)


# -- cross entropy ------------------------------------------------------------------------
def test_cross_entropy_confident_correct():
    logits = np.full((2, 5), -50.0)
    logits[0, 3] = logits[1, 1] = 50.0
    assert nc.cross_entropy(t64(logits), [3, 1]).item() < 1e-12


def test_cross_entropy_uniform():
    assert nc.cross_entropy(t64(np.zeros((4, 128))), [0, 5, 9, 127]).item() == pytest.approx(math.log(128))


def test_cross_entropy_logsumexp_oracle():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(6, 9)) * 3
    y = rng.integers(0, 9, size=6)
    mask = np.array([1, 0, 1, 1, 0, 1], bool)
    want = np.mean([math.log(sum(math.exp(v) for v in logits[i])) - logits[i, y[i]] for i in range(6) if mask[i]])
    assert nc.cross_entropy(t64(logits), y, mask).item() == pytest.approx(want, rel=1e-6)


def test_cross_entropy_gradient_only_on_unmasked_rows():
    x = t64(np.random.default_rng(6).normal(size=(3, 4)), grad=True)
    nc.cross_entropy(x, [0, 1, 2], [True, False, True]).backward()
    assert np.all(x.grad[1] == 0) and np.any(x.grad[0] != 0)


def test_cross_entropy_errors():
    with pytest.raises(ValueError, match="masked"):
        nc.cross_entropy(t64(np.zeros((2, 3))), [0, 1], [False, False])
    with pytest.raises(ValueError, match="out of range"):
        nc.cross_entropy(t64(np.zeros((2, 3))), [0, 3])


# -- finite differences and tape gradients ------------------------------------------------
def test_finite_difference_square():
    g = nc.finite_difference_gradient(lambda x: (x * x).sum(), t64([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)


def _check(f, x, tol=1e-5):
    tape = nc.tape_gradient(f, x)
    fd = nc.finite_difference_gradient(f, t64(x))
    assert nc.relative_error(tape, fd) < tol, (tape, fd)


RNG = np.random.default_rng(7)
A44 = RNG.normal(size=(4, 4))
B43 = RNG.normal(size=(4, 3))
W = RNG.normal(size=(4, 3))
L44 = np.tril(RNG.uniform(-0.3, 0.3, (4, 4)), -1) + np.eye(4)


@pytest.mark.parametrize(
    "name,f,x",
    [
        ("matmul-left", lambda x: nc.matmul(x, t64(B43)).sum(), A44),
        ("matmul-right", lambda x: (nc.matmul(t64(A44), x) * t64(B43)).sum(), B43),
        ("solve-b", lambda x: (nc.solve_lower_triangular(x, t64(B43)) * t64(W)).sum(),
         np.tril(RNG.uniform(-0.3, 0.3, (4, 4)), -1) + np.eye(4) * 1.5),
        ("solve-c", lambda x: (nc.solve_lower_triangular(t64(L44), x) * t64(W)).sum(), B43),
        ("add-broadcast", lambda x: ((x + t64(B43[0])) * t64(W)).sum(), B43),
        ("sub", lambda x: ((t64(W) - x) * x).sum(), B43),
        ("mul", lambda x: (x * x * t64(W)).sum(), B43),
        ("div", lambda x: (t64(W) / (x * x + 1.0)).sum(), B43),
        ("exp-log", lambda x: nc.log(nc.exp(x) + 1.0).sum(), B43),
        ("gelu", lambda x: (nc.gelu(x) * t64(W)).sum(), B43 * 2),
        ("softmax", lambda x: (nc.softmax_rows(x, np.triu(np.full((4, 4), nc.MASK_VALUE), 1)) * t64(A44)).sum(), A44),
        ("layer_norm-x", lambda x: (nc.layer_norm(x, t64(W[0]), t64(W[1])) * t64(W)).sum(), B43),
        ("layer_norm-gain", lambda x: (nc.layer_norm(t64(B43), x, t64(W[1])) * t64(W)).sum(), W[0]),
        ("cross_entropy", lambda x: nc.cross_entropy(x, [0, 2, 1, 1], [1, 1, 0, 1]), B43),
        ("log_softmax", lambda x: (nc.log_softmax(x) * t64(B43)).sum(), B43),
        ("embedding", lambda x: (nc.embedding(x, [0, 3, 0, 2]) * t64(B43)).sum(), B43),
        ("linear", lambda x: (nc.linear(t64(A44), x, t64(W[0])) * t64(B43)).sum(), B43),
        ("transpose", lambda x: (x.T @ t64(A44)).sum(), B43),
        ("reshape-permute", lambda x: (nc.permute(x.reshape(2, 2, 3), (2, 0, 1)) * t64(np.arange(12.0).reshape(3, 2, 2))).sum(), B43),
        ("concat-split", lambda x: (nc.concat(nc.split(x, 3, axis=-1)[::-1], axis=-1) * t64(B43)).sum(), B43),
        ("getitem", lambda x: (x[1:3] * x[:2]).sum(), B43),
        ("mean", lambda x: (x.mean(axis=0) * t64(W[0])).sum(), B43),
    ],
)
def test_tape_matches_finite_differences(name, f, x):
    _check(f, x)


def test_solve_gradient_random_8x8():
    rng = np.random.default_rng(8)
    b = _unit_lower(rng, 8)
    c = rng.normal(size=(8, 8))
    w = rng.normal(size=(8, 8))
    _check(lambda x: (nc.solve_lower_triangular(x, t64(c)) * t64(w)).sum(), b)
    _check(lambda x: (nc.solve_lower_triangular(t64(b), x) * t64(w)).sum(), c)


def test_solve_gradient_is_lower_triangular():
    b = t64(_unit_lower(np.random.default_rng(9), 5), grad=True)
    nc.solve_lower_triangular(b, t64(np.ones((5, 2)))).sum().backward()
    assert np.all(np.triu(b.grad, 1) == 0)


def test_gradient_accumulates_over_reuse():
    x = t64([1.0, 2.0, 3.0], grad=True)
    (x * 2.0 + x * x).sum().backward()
    np.testing.assert_allclose(x.grad, [4.0, 6.0, 8.0])


def test_tape_runs_in_reverse_creation_order():
    x = t64([1.0], grad=True)
    y = x * 2.0
    z = y + x
    tape = nc._collect_tape(z)
    assert [t._id for t in tape] == sorted((t._id for t in tape), reverse=True)
    assert tape[0] is z and tape[-1] is x


def test_no_grad_builds_no_tape():
    x = Tensor([1.0], requires_grad=True)
    with nc.no_grad():
        y = x * 3.0
    assert y.node is None and not y.requires_grad


def test_default_precision_is_single_and_switchable():
    assert Tensor([1.0]).dtype == np.float32
    with nc.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64


def test_deterministic_forward():
    rng1, rng2 = np.random.default_rng(3), np.random.default_rng(3)
    a = nc.gelu(Tensor(rng1.normal(size=(8, 8))) @ Tensor(rng1.normal(size=(8, 8)))).data
    b = nc.gelu(Tensor(rng2.normal(size=(8, 8))) @ Tensor(rng2.normal(size=(8, 8)))).data
    assert a.tobytes() == b.tobytes()
