import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from wordconf import autodiff as ad
from wordconf.autodiff import Tensor


def naive_matmul(a, b):
    n, k = a.shape
    _, m = b.shape
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)

    def test_orthogonal(self):
        assert ad.matmul(Tensor([[1.0, 0.0]]), Tensor([[0.0], [1.0]])).data.tolist() == [[0.0]]

    def test_matches_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b),
                                   rtol=0, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ad.DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)

    def test_closed_form(self):
        y = ad.softmax(Tensor([math.log(2), 0.0, 0.0])).data
        np.testing.assert_allclose(y, [0.5, 0.25, 0.25], atol=1e-15)

    def test_no_overflow(self):
        y = ad.softmax(Tensor([1000.0, 0.0])).data
        assert y[0] == pytest.approx(1.0) and 0.0 <= y[1] < 1e-300

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
    def test_rows_sum_to_one(self, x):
        y = ad.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-12)


class TestSigmoid:
    def test_zero(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_large_negative_stays_positive(self):
        # documented: strictly positive until about -745, where float64 underflows
        y = ad.sigmoid(Tensor([-700.0, -40.0])).data
        assert (y > 0).all() and y[0] < 1e-300

    def test_symmetry(self):
        x = np.random.default_rng(0).uniform(-30, 30, 1000)
        s = ad.sigmoid(Tensor(x)).data + ad.sigmoid(Tensor(-x)).data
        np.testing.assert_allclose(s, 1.0, atol=1e-15)


class TestLayerNorm:
    def ln(self, x):
        d = x.shape[-1]
        return ad.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d))).data

    def test_constant_vector(self):
        np.testing.assert_array_equal(self.ln(np.full(4, 3.0)), np.zeros(4))

    def test_two_point(self):
        expected = 1.0 / math.sqrt(1.0 + 1e-5)
        np.testing.assert_allclose(self.ln(np.array([1.0, -1.0])), [expected, -expected],
                                   rtol=1e-14)
        np.testing.assert_allclose(self.ln(np.array([1.0, -1.0])), [1.0, -1.0], atol=1e-5)

    def test_zero_mean(self):
        y = self.ln(np.random.default_rng(1).normal(3.0, 5.0, (6, 16)))
        assert np.abs(y.mean(axis=-1)).max() <= 1e-10

    def test_needs_two_features(self):
        with pytest.raises(ad.DimensionError):
            self.ln(np.ones((3, 1)))


class TestAttention:
    def test_single_pair(self):
        q = Tensor(np.random.default_rng(0).normal(size=(1, 3, 4)))
        k = Tensor(np.ones((1, 1, 4)))
        v = Tensor([[[7.0, -2.0]]])
        out = ad.attention(q, k, v).data
        np.testing.assert_allclose(out, np.broadcast_to([7.0, -2.0], (1, 3, 2)))

    def test_fully_masked_row(self):
        q = Tensor(np.ones((1, 2, 2)))
        k = Tensor(np.ones((1, 3, 2)))
        v = Tensor(np.arange(6.0).reshape(1, 3, 2))
        mask = np.array([[[True, True, False], [False, False, False]]])
        out = ad.attention(q, k, v, mask)
        np.testing.assert_array_equal(out.data[0, 1], [0.0, 0.0])
        assert out.flags["masked_rows"].tolist() == [[False, True]]
        assert np.isfinite(out.data).all()

    def test_sharp_query_selects_value(self):
        key1, key2 = np.array([10.0, 0.0]), np.array([0.0, 10.0])
        q = Tensor(key1[None, None, :] * 3)
        k = Tensor(np.stack([key1, key2])[None])
        v = Tensor([[[1.0, 2.0], [5.0, 6.0]]])
        # score gap 300/sqrt(2): weight on key 2 is exp(-212)
        np.testing.assert_allclose(ad.attention(q, k, v).data[0, 0], [1.0, 2.0], atol=1e-12)

    def test_mask_shape_checked(self):
        t = Tensor(np.ones((1, 2, 2)))
        with pytest.raises(ad.DimensionError):
            ad.attention(t, t, t, np.ones((1, 3, 3), dtype=bool))

    def test_output_is_convex_combination(self):
        rng = np.random.default_rng(5)
        q, k, v = (Tensor(rng.normal(size=(2, 4, 3))) for _ in range(3))
        out = ad.attention(q, k, v).data
        assert (out <= v.data.max(axis=1, keepdims=True) + 1e-12).all()
        assert (out >= v.data.min(axis=1, keepdims=True) - 1e-12).all()


class TestBackward:
    def test_linear_sum(self):
        x = np.array([[1.0], [2.0], [3.0]])
        w = Tensor(np.random.default_rng(0).normal(size=(2, 3)), requires_grad=True)
        (g,) = ad.backward(ad.matmul(w, Tensor(x)).sum(), [w])
        np.testing.assert_array_equal(g, np.outer(np.ones(2), x.ravel()))

    def test_unused_leaf(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        _, gb = ad.backward((a * 2.0).sum(), [a, b])
        np.testing.assert_array_equal(gb, np.zeros(3))

    def test_non_scalar_loss(self):
        a = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(a * 2.0)

    def test_twice_identical(self):
        rng = np.random.default_rng(2)
        w = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
        x = Tensor(rng.normal(size=(3, 4)))
        loss = ad.softmax(ad.matmul(x, w)).sum() + ad.tanh(ad.matmul(x, w)).mean()
        g1 = ad.backward(loss, [w])[0].copy()
        g2 = ad.backward(loss, [w])[0]
        assert g1.tobytes() == g2.tobytes()

    def test_shared_subexpression_accumulates(self):
        a = Tensor(np.array([3.0]), requires_grad=True)
        (g,) = ad.backward((a * a + a).sum(), [a])
        assert g.tolist() == [7.0]

    def test_non_finite_is_an_error(self):
        with pytest.raises(ad.NonFiniteError):
            ad.log(Tensor(np.array([0.0, 1.0])))


class _OpModel:
    """Scalar loss ``sum(fn(params) * probe)`` for checking one op."""

    def __init__(self, fn, shapes, seed=0):
        rng = np.random.default_rng(seed)
        self.params = {f"p{i}": Tensor(rng.normal(size=s), requires_grad=True)
                       for i, s in enumerate(shapes)}
        self.fn = fn
        out = fn(*self.params.values())
        self.probe = rng.normal(size=out.shape)

    def named_parameters(self):
        return self.params

    def loss(self, batch):
        return (self.fn(*self.params.values()) * self.probe).sum()


ELEMENTWISE = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(3, 4), (3, 4)]),
    "div": (lambda a, b: a / (ad.exp(b) + 1.0), [(3, 4), (3, 4)]),
    "exp": (lambda a: ad.exp(a), [(5,)]),
    "log": (lambda a: ad.log(ad.exp(a) + 0.5), [(5,)]),
    "tanh": (lambda a: ad.tanh(a), [(5,)]),
    "sigmoid": (lambda a: ad.sigmoid(a), [(5,)]),
    "gelu": (lambda a: ad.gelu(a), [(5,)]),
    "sum_axis": (lambda a: a.sum(axis=1), [(3, 4)]),
    "mean": (lambda a: a.mean(axis=0, keepdims=True), [(3, 4)]),
    "reshape": (lambda a: a.reshape(4, 3), [(3, 4)]),
    "transpose": (lambda a: a.transpose(1, 0, 2), [(2, 3, 4)]),
    "getitem": (lambda a: a[:, 1:3], [(3, 4)]),
    "take_rows": (lambda a: ad.take_rows(a, np.array([[0, 2], [2, 1]])), [(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=-1), [(2, 3), (2, 2)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 5)]),
}

COMPOSITE = {
    "softmax": (lambda a: ad.softmax(a, axis=-1), [(3, 5)]),
    "layer_norm": (lambda a, g, b: ad.layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
    "attention": (lambda q, k, v: ad.attention(q, k, v, np.array([[True, True, False]] * 2)),
                  [(2, 2, 4), (2, 3, 4), (2, 3, 3)]),
    "bce": (lambda a: ad.bce(ad.sigmoid(a), np.array([1.0, 0.0, 1.0, 1.0])), [(4,)]),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
def test_grad_check_elementwise(name):
    fn, shapes = ELEMENTWISE[name]
    rep = ad.grad_check(_OpModel(fn, shapes), None, eps=1e-5, tol=1e-6, n_coords=50)
    assert rep.passed, (name, rep.max_rel_err, rep.worst)


@pytest.mark.parametrize("name", sorted(COMPOSITE))
def test_grad_check_composite(name):
    fn, shapes = COMPOSITE[name]
    rep = ad.grad_check(_OpModel(fn, shapes), None, eps=1e-5, tol=1e-4, n_coords=50)
    assert rep.passed, (name, rep.max_rel_err, rep.worst)


class TestGradCheck:
    def test_linear_model_exact(self):
        model = _OpModel(lambda w, b: ad.matmul(Tensor(np.ones((3, 4))), w) + b, [(4, 2), (2,)])
        rep = ad.grad_check(model, None, eps=1e-5, tol=1e-8)
        assert rep.passed and rep.max_rel_err <= 1e-8

    def test_zero_tolerance_fails_nonlinear(self):
        model = _OpModel(lambda a: ad.tanh(a) * ad.exp(a), [(6,)])
        assert not ad.grad_check(model, None, eps=1e-5, tol=0.0).passed

    def test_nondeterminism_detected(self):
        rng = np.random.default_rng(0)
        model = _OpModel(lambda a: a * float(rng.normal()), [(3,)])
        with pytest.raises(ad.DeterminismError):
            ad.grad_check(model, None)

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            ad.grad_check(_OpModel(lambda a: a, [(2,)]), None, eps=0.0)


class TestAdam:
    def test_zero_gradient(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = ad.AdamState.zeros_like([p])
        ad.adam_update([p], [np.zeros(2)], state, lr=0.1)
        assert p.data.tolist() == [1.0, -2.0] and state.step == 1

    def test_first_step_closed_form(self):
        g = np.array([0.3, -2.0, 1e-3])
        p = Tensor(np.zeros(3), requires_grad=True)
        state = ad.AdamState.zeros_like([p])
        lr, eps = 5e-4, 1e-8
        ad.adam_update([p], [g], state, lr=lr, eps=eps)
        # bias correction makes m_hat = g and v_hat = g^2 on the first step
        np.testing.assert_allclose(p.data, -lr * g / (np.abs(g) + eps), rtol=1e-12)
        np.testing.assert_allclose(p.data, -lr * np.sign(g), rtol=1e-4)

    def test_constant_gradient_moves_monotonically(self):
        p = Tensor(np.array([0.0]), requires_grad=True)
        opt = ad.Adam([p], lr=0.01)
        trace = []
        for _ in range(50):
            opt.step([np.array([1.5])])
            trace.append(p.data[0])
        assert np.all(np.diff(trace) < 0)

    def test_state_mismatch(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(ad.DimensionError):
            ad.adam_update([p], [np.zeros(2)], ad.AdamState([np.zeros(3)], [np.zeros(3)]))
