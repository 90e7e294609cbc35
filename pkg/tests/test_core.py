import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neural_teachers.core import tensor as T
from neural_teachers.core.gradcheck import check_gradients
from neural_teachers.core.layers import GruParams, dropout, gru_step
from neural_teachers.core.optim import AdamState, adam_step
from neural_teachers.core.tensor import ShapeError, Tape, Tensor, backward


def leaf(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestPrimitives:
    def test_cosine_identical(self):
        u = np.array([0.3, -1.2, 4.0])
        assert T.cosine(u, u).item() == pytest.approx(1.0, abs=1e-15)

    def test_cosine_orthogonal(self):
        assert T.cosine([1.0, 0.0], [0.0, 1.0]).item() == 0.0

    def test_cosine_value(self):
        # (1*2 + 2*1) / (sqrt5 * sqrt5)
        assert T.cosine([1.0, 2.0], [2.0, 1.0]).item() == pytest.approx(0.8, abs=1e-15)

    def test_cosine_zero_norm_is_zero(self):
        assert T.cosine([0.0, 0.0], [1.0, 2.0]).item() == 0.0

    def test_shape_mismatch_names_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeError, match="cosine"):
            T.cosine(np.ones(3), np.ones(4))

    def test_no_tape_records_nothing(self):
        a = Tensor(np.ones(3), requires_grad=True)
        out = T.tanh(a)
        assert not out.requires_grad

    @pytest.mark.parametrize(
        "name, build",
        [
            ("add", lambda r: ([leaf(r, 3, 4), leaf(r, 4)], lambda a, b: T.sum(T.add(a, b) * T.add(a, b)))),
            ("sub", lambda r: ([leaf(r, 3, 4), leaf(r, 3, 1)], lambda a, b: T.sum(T.tanh(T.sub(a, b))))),
            ("mul", lambda r: ([leaf(r, 2, 5), leaf(r, 5)], lambda a, b: T.sum(T.mul(a, b)))),
            ("matmul22", lambda r: ([leaf(r, 3, 4), leaf(r, 4, 2)], lambda a, b: T.sum(T.tanh(a @ b)))),
            ("matmul12", lambda r: ([leaf(r, 4), leaf(r, 4, 2)], lambda a, b: T.sum(T.tanh(a @ b)))),
            ("matmul21", lambda r: ([leaf(r, 3, 4), leaf(r, 4)], lambda a, b: T.sum(T.tanh(a @ b)))),
            ("matmul11", lambda r: ([leaf(r, 4), leaf(r, 4)], lambda a, b: T.tanh(a @ b))),
            ("sigmoid", lambda r: ([leaf(r, 6)], lambda a: T.sum(T.sigmoid(a) * T.sigmoid(a)))),
            ("tanh", lambda r: ([leaf(r, 6)], lambda a: T.sum(T.tanh(a) * a))),
            ("exp", lambda r: ([leaf(r, 6)], lambda a: T.sum(T.exp(a)))),
            ("log", lambda r: ([Tensor(r.uniform(0.5, 2, 6), True)], lambda a: T.sum(T.log(a) * a))),
            ("softmax", lambda r: ([leaf(r, 3, 5), leaf(r, 3, 5)], lambda a, w: T.sum(T.softmax(a) * w))),
            ("log_softmax", lambda r: ([leaf(r, 3, 5), leaf(r, 3, 5)], lambda a, w: T.sum(T.log_softmax(a) * w))),
            ("concat", lambda r: ([leaf(r, 2, 3), leaf(r, 2, 2)], lambda a, b: T.sum(T.tanh(T.concat([a, b], 1))))),
            ("sum_axis", lambda r: ([leaf(r, 3, 4)], lambda a: T.sum(T.tanh(T.sum(a, axis=0))))),
            ("mean", lambda r: ([leaf(r, 3, 4)], lambda a: T.mean(T.tanh(a)))),
            ("cosine", lambda r: ([leaf(r, 5), leaf(r, 5)], lambda a, b: T.cosine(a, b))),
            ("cosine_rows", lambda r: ([leaf(r, 3, 5), leaf(r, 3, 5)], lambda a, b: T.sum(T.cosine(a, b)))),
            ("embedding", lambda r: ([leaf(r, 6, 3)], lambda t: T.sum(T.tanh(T.embedding(t, [[1, 2], [2, 5]]))))),
            ("embed_bag_sum", lambda r: ([leaf(r, 6, 3)], lambda t: T.sum(T.tanh(T.embed_bag(t, [[1, 1, 4], [0], []]))))),
            ("embed_bag_mean", lambda r: ([leaf(r, 6, 3)], lambda t: T.sum(T.tanh(T.embed_bag(t, [[1, 1, 4], [0]], "mean"))))),
            ("take_rows", lambda r: ([leaf(r, 4, 3)], lambda x: T.sum(T.tanh(T.take_rows(x, [3, -1, 0, 3]))))),
            ("pick", lambda r: ([leaf(r, 3, 4)], lambda x: T.sum(T.pick(T.log_softmax(x), [0, 3, 3])))),
        ],
    )
    def test_gradients_match_finite_differences(self, name, build):
        rng = np.random.default_rng(7)
        leaves, f = build(rng)
        assert check_gradients(lambda: f(*leaves), leaves) < 1e-5


class TestBackward:
    def test_product_rule(self):
        x, y = Tensor(3.0, True), Tensor(2.0, True)
        with Tape() as tape:
            root = x * y
        backward(tape, root, [x, y])
        assert x.grad == 2.0 and y.grad == 3.0

    def test_unused_leaf_gets_zero(self):
        x, unused = Tensor(np.ones(3), True), Tensor(np.ones(2), True)
        with Tape() as tape:
            root = T.sum(x * x)
        backward(tape, root, [x, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(2))

    def test_non_scalar_root_rejected(self):
        x = Tensor(np.ones(3), True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            backward(tape, y)

    def test_cosine_finite_differences(self):
        rng = np.random.default_rng(0)
        u, v = leaf(rng, 5), leaf(rng, 5)
        assert check_gradients(lambda: T.cosine(u, v), [u, v]) < 1e-6

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng, 4, 4), leaf(rng, 4)

        def run():
            with Tape() as tape:
                root = T.sum(T.tanh(a @ b) * T.sigmoid(b @ a))
            return [g.copy() for g in backward(tape, root, [a, b])]

        first, second = run(), run()
        for g1, g2 in zip(first, second):
            assert g1.tobytes() == g2.tobytes()

    def test_tape_is_topological(self):
        rng = np.random.default_rng(2)
        a = leaf(rng, 3)
        with Tape() as tape:
            T.sum(T.tanh(a) * T.exp(a))
        seen = set()
        for rec in tape.records:
            for t in rec.inputs:
                assert not t.requires_grad or t is a or id(t) in seen
            seen.add(id(rec.output))


def _gru_oracle(x, h, p: GruParams):
    mpmath.mp.dps = 40
    W = {k: getattr(p, k).data for k in ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")}
    H = p.hidden_size
    sig = lambda v: 1 / (1 + mpmath.exp(-v))
    xs = [mpmath.mpf(float(v)) for v in x]
    hs = [mpmath.mpf(float(v)) for v in h]

    def lin(Wi, Ui, b, hh, k):
        return (mpmath.fsum(xs[i] * mpmath.mpf(float(Wi[i, k])) for i in range(len(xs)))
                + mpmath.fsum(hh[j] * mpmath.mpf(float(Ui[j, k])) for j in range(H))
                + mpmath.mpf(float(b[k])))

    z = [sig(lin(W["W_z"], W["U_z"], W["b_z"], hs, k)) for k in range(H)]
    r = [sig(lin(W["W_r"], W["U_r"], W["b_r"], hs, k)) for k in range(H)]
    rh = [r[k] * hs[k] for k in range(H)]
    c = [mpmath.tanh(lin(W["W_h"], W["U_h"], W["b_h"], rh, k)) for k in range(H)]
    return np.array([float((1 - z[k]) * hs[k] + z[k] * c[k]) for k in range(H)])


def _random_gru(rng, i, h, scale=1.0):
    p = GruParams.init(i, h, rng)
    for name in ("b_z", "b_r", "b_h"):
        getattr(p, name).data = rng.normal(scale=scale, size=h)
    return p


class TestGru:
    def test_zero_weights_halve_state(self):
        p = GruParams.zeros(3, 2)
        out = gru_step(np.array([5.0, -1.0, 2.0]), np.ones(2), p)
        np.testing.assert_array_equal(out.data, [0.5, 0.5])

    def test_matches_high_precision_formula(self):
        rng = np.random.default_rng(11)
        p = _random_gru(rng, 3, 4)
        x, h = rng.normal(size=3), rng.normal(size=4)
        np.testing.assert_allclose(gru_step(x, h, p).data, _gru_oracle(x, h, p), rtol=0, atol=1e-12)

    def test_batched_rows_match_single(self):
        rng = np.random.default_rng(12)
        p = _random_gru(rng, 3, 4)
        X, Hm = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
        batched = gru_step(X, Hm, p).data
        for i in range(5):
            np.testing.assert_allclose(batched[i], gru_step(X[i], Hm[i], p).data, atol=1e-14)

    def test_gradient(self):
        rng = np.random.default_rng(13)
        p = _random_gru(rng, 3, 4)
        x, h = leaf(rng, 3), leaf(rng, 4)
        w = rng.normal(size=4)
        leaves = [x, h, p.W_z, p.U_r, p.W_h, p.U_h, p.b_z, p.b_r]
        assert check_gradients(lambda: T.sum(gru_step(x, h, p) * w), leaves) < 1e-5

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            gru_step(np.ones(2), np.ones(4), GruParams.zeros(3, 4))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(0.1, 5.0))
    def test_output_bounded_by_prev_or_one(self, seed, hscale):
        rng = np.random.default_rng(seed)
        p = _random_gru(rng, 3, 4, scale=2.0)
        h = rng.normal(scale=hscale, size=4)
        out = gru_step(rng.normal(scale=3, size=3), h, p).data
        assert np.all(np.abs(out) <= np.maximum(np.abs(h), 1.0) + 1e-12)


class TestAdam:
    def test_zero_grad_fresh_state_leaves_param(self):
        p = Tensor(np.array([1.5, -2.0]), True)
        adam_step(p, np.zeros(2), AdamState.fresh(p.data, lr=0.1))
        np.testing.assert_array_equal(p.data, [1.5, -2.0])

    def test_one_step(self):
        p = Tensor(np.array(0.0), True)
        s = AdamState.fresh(p.data, lr=0.001)
        adam_step(p, np.array(2.0), s)
        # m_hat = g, v_hat = g^2 after bias correction
        assert p.data == pytest.approx(-0.001 * 2.0 / (2.0 + 1e-8), abs=1e-18)
        assert s.t == 1

    def test_two_identical_steps(self):
        # hand evaluation: m = 0.19 g, v = 0.001999 g^2 after two steps;
        # bias correction restores m_hat = g, v_hat = g^2
        p = Tensor(np.array(0.0), True)
        s = AdamState.fresh(p.data, lr=0.001)
        adam_step(p, np.array(2.0), s)
        first, v1 = float(p.data), float(s.v)
        adam_step(p, np.array(2.0), s)
        second = float(p.data) - first
        assert float(s.v) > v1
        assert float(s.m) == pytest.approx(0.19 * 2.0, rel=1e-12)
        assert float(s.v) == pytest.approx(0.001999 * 4.0, rel=1e-12)
        assert second == pytest.approx(first, rel=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 5))
    def test_zero_grad_is_fixed_point_after_history(self, seed, zero_steps):
        rng = np.random.default_rng(seed)
        p = Tensor(rng.normal(size=3), True)
        s = AdamState.fresh(p.data)
        before = p.data.copy()
        for _ in range(zero_steps):
            adam_step(p, np.zeros(3), s)
        np.testing.assert_array_equal(p.data, before)

    def test_shape_mismatch(self):
        p = Tensor(np.zeros(2), True)
        with pytest.raises(ShapeError):
            adam_step(p, np.zeros(3), AdamState.fresh(p.data))


class TestDropout:
    def test_rate_zero_identity(self):
        x = Tensor(np.arange(5.0))
        assert dropout(x, 0.0, True, np.random.default_rng(0)) is x

    def test_inference_identity(self):
        x = Tensor(np.arange(5.0))
        assert dropout(x, 0.7, False, None) is x

    def test_mean_preserved(self):
        out = dropout(np.ones(100_000), 0.3, True, np.random.default_rng(3)).data
        assert abs(out.mean() - 1.0) < 0.01
        assert set(np.unique(out)) <= {0.0, 1.0 / 0.7}

    def test_rate_one_rejected(self):
        with pytest.raises(ValueError):
            dropout(np.ones(3), 1.0, True, np.random.default_rng(0))
