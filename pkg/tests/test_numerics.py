import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from agcrn import numerics as nm
from agcrn.numerics import Parameter, Tensor


def central_diff(f, x, h=1e-6):
    """Independent oracle: numeric Jacobian-vector of a scalar function."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(nm.matmul(np.eye(2), x).data, x)

    def test_dot(self):
        assert nm.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(nm.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nm.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_backward_matches_finite_differences(self, rng):
        a0, b0 = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        w = rng.standard_normal((3, 2))
        a, b = Parameter(a0, "a"), Parameter(b0, "b")
        nm.sum_all(nm.matmul(a, b) * w).backward()
        ga = central_diff(lambda x: np.sum((x @ b0) * w), a0)
        gb = central_diff(lambda x: np.sum((a0 @ x) * w), b0)
        assert rel_err(a.grad, ga) <= 1e-6
        assert rel_err(b.grad, gb) <= 1e-6

    def test_batched_broadcast_backward(self, rng):
        s0, x0 = rng.standard_normal((2, 3, 3)), rng.standard_normal((4, 1, 3, 2))
        s, x = Parameter(s0, "s"), Parameter(x0, "x")
        nm.sum_all(nm.matmul(s, x)).backward()
        assert s.grad.shape == s0.shape and x.grad.shape == x0.shape
        gs = central_diff(lambda v: np.sum(np.matmul(v, x0)), s0)
        assert rel_err(s.grad, gs) <= 1e-6


class TestUnary:
    def test_relu(self):
        assert nm.apply_unary(Tensor([-1.0, 0.0, 2.0]), "relu").data.tolist() == [0.0, 0.0, 2.0]

    def test_sigmoid_zero(self):
        assert nm.apply_unary(Tensor([0.0]), "sigmoid").data.tolist() == [0.5]

    def test_sigmoid_extremes_finite(self):
        out = nm.sigmoid(Tensor([-800.0, 800.0])).data
        assert out[0] == pytest.approx(0.0, abs=1e-300) and out[1] == 1.0

    @pytest.mark.parametrize("kind,fn", [("tanh", np.tanh), ("sigmoid", lambda v: 1 / (1 + np.exp(-v)))])
    def test_smooth_gradient(self, kind, fn):
        x = Parameter(np.array([0.3]), "x")
        nm.sum_all(nm.apply_unary(x, kind)).backward()
        num = central_diff(lambda v: fn(v).sum(), np.array([0.3]))
        assert rel_err(x.grad, num) <= 1e-6

    def test_kink_subgradients_are_zero(self):
        x = Parameter(np.zeros(3), "x")
        nm.sum_all(nm.relu(x) + nm.absolute(x)).backward()
        assert np.array_equal(x.grad, np.zeros(3))

    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown unary"):
            nm.apply_unary(Tensor([1.0]), "gelu")


class TestSoftmax:
    def test_uniform(self):
        assert nm.softmax_rows(Tensor([[0.0, 0.0]])).data.tolist() == [[0.5, 0.5]]

    def test_closed_form(self):
        e = math.e
        out = nm.softmax_rows(Tensor([[1.0, 0.0]])).data
        np.testing.assert_allclose(out, [[e / (e + 1), 1 / (e + 1)]], rtol=0, atol=1e-15)
        np.testing.assert_allclose(out, [[0.73106, 0.26894]], atol=5e-6)

    def test_no_overflow(self):
        out = nm.softmax_rows(Tensor([[0.0, 1000.0]])).data
        assert out[0, 0] == pytest.approx(0.0, abs=1e-300) and out[0, 1] == 1.0

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
                  elements=st.floats(-50, 50)))
    def test_rows_are_distributions(self, x):
        out = nm.softmax_rows(Tensor(x)).data
        assert np.all(out >= 0) and np.all(out <= 1)
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_backward(self, rng):
        x0, w = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        x = Parameter(x0, "x")
        nm.sum_all(nm.softmax_rows(x) * w).backward()

        def f(v):
            e = np.exp(v - v.max(axis=1, keepdims=True))
            return np.sum(e / e.sum(axis=1, keepdims=True) * w)

        assert rel_err(x.grad, central_diff(f, x0)) <= 1e-6


class TestPoolContract:
    def test_scalar(self):
        out = nm.pool_contract(np.array([[2.0]]), np.full((1, 1, 1, 1), 5.0))
        assert out.data.item() == 10.0

    def test_null_embedding(self, rng):
        out = nm.pool_contract(np.zeros((3, 2)), rng.standard_normal((2, 2, 3, 4)))
        assert out.shape == (3, 2, 3, 4) and not out.data.any()

    def test_hand_summed_slices(self):
        w = np.array([[[[1.0, 2.0]]], [[[3.0, 4.0]]]])  # d=2, K=1, Cin=1, Cout=2
        out = nm.pool_contract(np.array([[1.0, 1.0]]), w)
        assert out.data.tolist() == [[[[4.0, 6.0]]]]

    def test_mismatch(self):
        with pytest.raises(nm.ShapeError):
            nm.pool_contract(np.ones((3, 2)), np.ones((3, 1, 1, 1)))

    def test_backward(self, rng):
        e0, w0 = rng.standard_normal((4, 3)), rng.standard_normal((3, 2, 2, 2))
        k = rng.standard_normal((4, 2, 2, 2))
        e, w = Parameter(e0, "e"), Parameter(w0, "w")
        nm.sum_all(nm.pool_contract(e, w) * k).backward()
        f_e = lambda v: np.sum(np.einsum("nd,dkio->nkio", v, w0) * k)
        f_w = lambda v: np.sum(np.einsum("nd,dkio->nkio", e0, v) * k)
        assert rel_err(e.grad, central_diff(f_e, e0)) <= 1e-6
        assert rel_err(w.grad, central_diff(f_w, w0)) <= 1e-6


class TestEinsumAndShapes:
    def test_einsum_backward(self, rng):
        a0, b0 = rng.standard_normal((2, 3)), rng.standard_normal((3, 4))
        a, b = Parameter(a0, "a"), Parameter(b0, "b")
        nm.sum_all(nm.einsum("ij,jk->ik", a, b)).backward()
        np.testing.assert_allclose(a.grad, np.ones((2, 4)) @ b0.T)

    def test_einsum_rejects_orphan_index(self):
        with pytest.raises(ValueError):
            nm.einsum("ij,jk->k", np.ones((2, 3)), np.ones((3, 4)))

    def test_rank_limit(self):
        with pytest.raises(nm.ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))

    def test_concat_permute_index_backward(self, rng):
        a0, b0 = rng.standard_normal((2, 3)), rng.standard_normal((2, 2))
        a, b = Parameter(a0, "a"), Parameter(b0, "b")
        c = nm.concat([a, b], axis=-1)
        p = nm.permute(nm.reshape(c, (2, 5, 1)), (2, 0, 1))
        nm.sum_all(nm.index(p, (0, 1)) * 3.0).backward()
        assert a.grad.tolist() == [[0, 0, 0], [3, 3, 3]]
        assert b.grad.tolist() == [[0, 0], [3, 3]]


class TestNonFinite:
    def test_nan_raises(self):
        with pytest.raises(nm.NonFiniteError):
            nm.mul(Tensor([np.inf]), Tensor([0.0]))


def test_rng_determinism():
    a = nm.make_rng(7).standard_normal(5)
    b = nm.make_rng(7).standard_normal(5)
    assert a.tobytes() == b.tobytes()


def test_no_grad_records_nothing():
    p = Parameter(np.ones(2), "p")
    with nm.no_grad():
        out = nm.sum_all(p * 2.0)
    assert not out.requires_grad and out._parents == ()


class TestFiniteDifferenceCheck:
    def test_quadratic(self):
        theta = Parameter(np.array([3.0]), "theta")
        rep = nm.finite_difference_check(lambda: nm.sum_all(theta * theta), [theta], step=1e-5, tol=1e-6)
        assert rep.passed
        assert rep.params[0].max_rel_err <= 1e-9 / 6

    def test_zero_tolerance_reports_failure(self, rng):
        w = Parameter(rng.standard_normal((3, 3)), "w")
        x = rng.standard_normal((2, 3))
        rep = nm.finite_difference_check(lambda: nm.sum_all(nm.tanh(nm.matmul(x, w))), [w], tol=0.0)
        assert not rep.passed

    def test_non_deterministic_loss(self):
        p = Parameter(np.ones(1), "p")
        calls = iter(range(100))
        with pytest.raises(nm.NonDeterministicLossError):
            nm.finite_difference_check(lambda: nm.sum_all(p * float(next(calls))), [p])

    def test_subset_above_limit(self, rng):
        w = Parameter(rng.standard_normal(50), "w")
        rep = nm.finite_difference_check(lambda: nm.sum_all(w * w), [w], max_entries=10)
        assert rep.params[0].n_checked == 10 and rep.params[0].n_total == 50

    def test_report_json(self):
        theta = Parameter(np.array([1.0, 2.0]), "theta")
        rep = nm.finite_difference_check(lambda: nm.sum_all(theta * theta), [theta])
        d = json.loads(rep.to_json())
        assert d["params"][0]["name"] == "theta"
        assert set(d["params"][0]) >= {"name", "max_rel_err", "passed"}
        assert d["passed"] is True
