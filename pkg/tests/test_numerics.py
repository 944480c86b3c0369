import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvst.errors import InvalidInput, NumericalFailure
from cvst.numerics import ParamStore, SeededRng, Tensor, concat, grad_check, no_grad, softmax, svd_complex
from cvst.numerics.autodiff import grad_enabled


# -- svd -----------------------------------------------------------------------


def test_svd_identity():
    U, sv, V = svd_complex(np.eye(2))
    np.testing.assert_allclose(sv, [1.0, 1.0])


def test_svd_diag_is_permutation_free():
    U, sv, V = svd_complex(np.diag([3.0, 1.0]))
    np.testing.assert_allclose(sv, [3.0, 1.0])
    # identity up to a per-column phase
    np.testing.assert_allclose(np.abs(U), np.eye(2), atol=1e-12)
    np.testing.assert_allclose(np.abs(V), np.eye(2), atol=1e-12)


def _svd_errors(A):
    U, sv, V = svd_complex(A)
    rec = np.linalg.norm(U @ np.diag(sv) @ V.conj().T - A) / max(np.linalg.norm(A), 1e-30)
    k = sv.size
    uni = max(np.abs(U.conj().T @ U - np.eye(k)).max(), np.abs(V.conj().T @ V - np.eye(k)).max())
    return rec, uni, sv


def test_svd_random_8x8_reconstruction():
    A = SeededRng(11).complex_normal((8, 8))
    rec, uni, sv = _svd_errors(A)
    assert rec < 1e-8 and uni < 1e-8
    # oracle: LAPACK singular values
    np.testing.assert_allclose(sv, np.linalg.svd(A, compute_uv=False), rtol=1e-10)


@settings(max_examples=60, deadline=None)
@given(rows=st.integers(1, 16), cols=st.integers(1, 16), seed=st.integers(0, 2**32))
def test_svd_property_reconstruction_unitarity_order(rows, cols, seed):
    A = SeededRng(seed).complex_normal((rows, cols))
    rec, uni, sv = _svd_errors(A)
    assert rec < 1e-8
    assert uni < 1e-8
    assert np.all(np.diff(sv) <= 1e-12) and np.all(sv >= 0)


def test_svd_rank_deficient_still_unitary():
    a = SeededRng(3).complex_normal((6, 1))
    A = a @ a.conj().T  # rank one
    rec, uni, sv = _svd_errors(A)
    assert rec < 1e-8 and uni < 1e-8
    assert np.all(sv[1:] < 1e-10)


@pytest.mark.parametrize("bad", [np.array([[np.nan, 1.0]]), np.zeros((33, 2)), np.zeros((0, 0))])
def test_svd_rejects_bad_input(bad):
    with pytest.raises(InvalidInput):
        svd_complex(bad)


# -- rng -------------------------------------------------------------------------


def test_rng_replay_is_byte_identical():
    a = SeededRng(5, 9).normal(size=100)
    b = SeededRng(5, 9).normal(size=100)
    assert a.tobytes() == b.tobytes()


def test_rng_spawn_is_independent_of_parent_consumption():
    parent = SeededRng(1)
    first = parent.spawn("noise", 3).uniform(size=4)
    parent.normal(size=1000)
    assert np.array_equal(first, parent.spawn("noise", 3).uniform(size=4))
    assert not np.array_equal(first, parent.spawn("noise", 4).uniform(size=4))


def test_complex_normal_variance():
    z = SeededRng(2).complex_normal(100_000, variance=2.0)
    assert abs(np.mean(np.abs(z) ** 2) - 2.0) < 0.04
    assert abs(np.var(z.real) - np.var(z.imag)) < 0.04


# -- autodiff / grad_check -----------------------------------------------------


def test_grad_check_square():
    ps = ParamStore()
    x = ps.add("x", 3.0)
    err = grad_check(lambda _p: x * x, ps)
    assert err < 1e-8
    np.testing.assert_allclose(ps.grad("x"), 6.0)


def test_grad_check_constant_loss():
    ps = ParamStore()
    ps.add("w", np.ones(3))
    assert grad_check(lambda _p: Tensor(2.0), ps) == 0.0
    np.testing.assert_array_equal(ps.grad("w"), np.zeros(3))


def test_grad_check_micro_linear_mse():
    rng = SeededRng(4)
    ps = ParamStore()
    w = ps.add("w", rng.normal(0, 1, (10, 20)))
    b = ps.add("b", rng.normal(0, 1, 20))
    x, y = Tensor(rng.normal(0, 1, (16, 10))), rng.normal(0, 1, (16, 20))
    assert ps.size() <= 500
    assert grad_check(lambda _p: ((x @ w + b - y) ** 2).mean(), ps) < 1e-4


def test_grad_check_rejects_nonfinite_loss_and_bad_step():
    ps = ParamStore()
    ps.add("x", 1.0)
    with pytest.raises(NumericalFailure):
        grad_check(lambda _p: Tensor(float("nan")), ps)
    with pytest.raises(InvalidInput):
        grad_check(lambda _p: Tensor(1.0), ps, h=1e-1)


def test_primitives_against_central_differences():
    rng = SeededRng(8)
    ps = ParamStore()
    a = ps.add("a", rng.uniform(0.5, 2.0, (3, 4)))
    b = ps.add("b", rng.normal(0, 1, (4,)))

    def loss(_p):
        u = (a.log() + a.exp() * 0.1 + a.sqrt()).tanh() / (a + 1.0)
        v = concat([u, (u * b).abs()], axis=0).clamp(-0.9, 0.9)
        return softmax(v, axis=1).max(axis=1).sum() + (v @ b.reshape(4, 1)).mean() + v[1:, :2].sum() ** 2

    assert grad_check(loss, ps) < 1e-6


def test_param_gradient_shapes_match_and_zero_grad():
    ps = ParamStore()
    w = ps.add("w", np.ones((2, 3)))
    (w * 2.0).sum().backward()
    assert ps.grad("w").shape == (2, 3)
    ps.zero_grad()
    assert np.all(ps.grad("w") == 0)


def test_broadcast_gradient_unbroadcasts():
    ps = ParamStore()
    b = ps.add("b", np.zeros(3))
    x = Tensor(np.ones((5, 3)))
    (x + b).sum().backward()
    np.testing.assert_allclose(ps.grad("b"), [5.0, 5.0, 5.0])


def test_no_grad_builds_no_graph_and_restores():
    ps = ParamStore()
    w = ps.add("w", 1.0)
    with no_grad():
        assert not grad_enabled()
        y = w * 3.0
    assert grad_enabled()
    assert not y.requires_grad


def test_duplicate_parameter_rejected():
    ps = ParamStore()
    ps.add("w", 1.0)
    with pytest.raises(KeyError):
        ps.add("w", 2.0)


def test_load_state_checks_shapes():
    ps = ParamStore()
    ps.add("w", np.zeros(2))
    with pytest.raises(InvalidInput):
        ps.load_state({"w": np.zeros(3)})
    ps.load_state({"w": np.array([1.0, 2.0])})
    assert math.isclose(ps["w"].data.sum(), 3.0)
