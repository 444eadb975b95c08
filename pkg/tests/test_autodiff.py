import threading
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from classic import autodiff as ad
from classic.autodiff import NonFiniteError, RandomSource, ShapeError, Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def grad_of(fn, *values):
    params = [ad.parameter(v) for v in values]
    with ad.Tape():
        out = fn(*params)
        ad.backward(out, params)
    return [p.grad for p in params]


class TestForward:
    def test_l2_normalize_three_four(self):
        out = ad.l2_normalize(Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_l2_normalize_zero_row_warns(self):
        with pytest.warns(RuntimeWarning):
            out = ad.l2_normalize(Tensor([[0.0, 0.0], [1.0, 0.0]]))
        assert out.data[0].tolist() == [0.0, 0.0]

    def test_softmax_rows_sum_to_one(self):
        x = RandomSource(1).normal(3.0, (4, 5))
        np.testing.assert_allclose(ad.softmax(Tensor(x)).data.sum(axis=1), 1.0, atol=1e-14)

    def test_logsumexp_is_stable_for_large_inputs(self):
        out = ad.logsumexp(Tensor([[1000.0, 1000.0]]))
        assert out.data[0] == pytest.approx(1000.0 + np.log(2.0))

    def test_sigmoid_saturates_without_overflow(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            y = ad.sigmoid(Tensor([-4000.0, 4000.0])).data
        assert y.tolist() == [0.0, 1.0]

    def test_layer_norm_normalizes_rows(self):
        x = RandomSource(2).normal(2.0, (3, 6))
        y = ad.layer_norm(Tensor(x), Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        np.testing.assert_allclose(y.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.var(axis=1), 1.0, atol=1e-4)

    def test_maximum_takes_elementwise_max(self):
        a, b = Tensor([1.0, 5.0, 2.0]), Tensor([3.0, 0.0, 2.0])
        assert ad.maximum([a, b]).values == [3.0, 5.0, 2.0]

    def test_dropout_keep_one_is_identity(self):
        x = Tensor([1.0, 2.0])
        assert ad.dropout(x, 1.0, RandomSource(0), training=True) is x

    def test_dropout_eval_is_identity(self):
        x = Tensor([1.0, 2.0])
        assert ad.dropout(x, 0.5, RandomSource(0), training=False) is x

    def test_embedding_lookup(self):
        table = Tensor(np.arange(6.0).reshape(3, 2))
        assert ad.embedding(table, np.array([2, 0])).values == [4.0, 5.0, 0.0, 1.0]

    def test_concat_along_axis(self):
        out = ad.concat([Tensor(np.zeros((2, 1))), Tensor(np.ones((2, 2)))], axis=1)
        assert out.shape == (2, 3)


class TestErrors:
    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_add_incompatible_broadcast(self):
        with pytest.raises(ShapeError):
            ad.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))

    def test_log_of_zero_is_non_finite(self):
        with pytest.raises(NonFiniteError):
            ad.log(Tensor([0.0]))

    def test_backward_requires_scalar(self):
        p = ad.parameter([1.0, 2.0])
        with ad.Tape():
            out = ad.mul(p, 2.0)
            with pytest.raises(ValueError):
                ad.backward(out)

    def test_dropout_rejects_bad_keep_prob(self):
        with pytest.raises(ValueError):
            ad.dropout(Tensor([1.0]), 0.0, RandomSource(0), training=True)


class TestBackward:
    def test_cross_entropy_gradient(self):
        (g,) = grad_of(lambda z: ad.scale(ad.take(ad.log_softmax(z), (0, 0)), -1.0),
                       np.array([[1.0, 0.0, 0.0]]))
        soft = np.exp([1.0, 0.0, 0.0]) / np.exp([1.0, 0.0, 0.0]).sum()
        np.testing.assert_allclose(g[0], soft - [1, 0, 0], atol=1e-15)
        assert g[0, 0] == pytest.approx(-0.4239, abs=1e-4)

    def test_broadcast_gradient_is_summed(self):
        _, gb = grad_of(lambda a, b: ad.sum(ad.add(a, b)), np.zeros((3, 2)), np.zeros(2))
        assert gb.tolist() == [3.0, 3.0]

    def test_shared_input_accumulates(self):
        (g,) = grad_of(lambda x: ad.sum(ad.mul(x, x)), np.array([1.0, -2.0]))
        assert g.tolist() == [2.0, -4.0]

    def test_take_repeated_index_accumulates(self):
        (g,) = grad_of(lambda x: ad.sum(ad.take(x, (np.array([0, 0, 1]),))), np.array([1.0, 2.0]))
        assert g.tolist() == [2.0, 1.0]

    def test_maximum_tie_goes_to_first(self):
        ga, gb = grad_of(lambda a, b: ad.sum(ad.maximum([a, b])), np.array([1.0]), np.array([1.0]))
        assert (ga.tolist(), gb.tolist()) == ([1.0], [0.0])

    def test_unreached_param_gets_zero(self):
        a, b = ad.parameter([1.0]), ad.parameter([2.0, 3.0])
        with ad.Tape():
            ad.backward(ad.sum(a), [a, b])
        assert b.grad.tolist() == [0.0, 0.0]

    def test_no_grad_suspends_recording(self):
        p = ad.parameter([1.0])
        with ad.Tape() as tape:
            with ad.no_grad():
                ad.mul(p, 3.0)
            assert len(tape) == 0

    def test_tapes_are_thread_local(self):
        lengths = {}

        def work(k):
            p = ad.parameter(np.ones(3))
            with ad.Tape() as tape:
                for _ in range(k):
                    p = ad.mul(p, 2.0)
                lengths[k] = len(tape)

        threads = [threading.Thread(target=work, args=(k,)) for k in (3, 7)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert lengths == {3: 3, 7: 7}

    def test_finite_difference_on_quadratic(self):
        x = RandomSource(3).normal(2.0, (4,))
        assert ad.finite_difference_check(lambda t: ad.sum(ad.mul(t, t)), x) <= 1e-6


class TestProperties:
    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite))
    def test_softmax_gradient_sums_to_zero_per_row(self, x):
        w = np.arange(12.0).reshape(3, 4)
        (g,) = grad_of(lambda t: ad.sum(ad.mul(ad.softmax(t), w)), x)
        np.testing.assert_allclose(g.sum(axis=1), 0.0, atol=1e-10)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
    def test_matmul_matches_numpy(self, a, b):
        np.testing.assert_allclose(ad.matmul(Tensor(a), Tensor(b)).data, a @ b)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (2, 3), elements=finite))
    def test_l2_normalize_gradient_matches_differences(self, x):
        x = x + np.where(np.abs(x).sum(axis=1, keepdims=True) < 0.5, 1.0, 0.0)
        w = np.array([[1.0, -2.0, 0.5], [0.3, 0.0, 1.0]])
        err = ad.finite_difference_check(lambda t: ad.sum(ad.mul(ad.l2_normalize(t), w)), x)
        assert err <= 1e-4

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (2, 5), elements=finite))
    def test_log_softmax_equals_log_of_softmax(self, x):
        np.testing.assert_allclose(ad.log_softmax(Tensor(x)).data,
                                   np.log(ad.softmax(Tensor(x)).data), atol=1e-10)


class TestRandomSource:
    def test_same_seed_same_stream(self):
        assert RandomSource(5).normal(1.0, 4).tolist() == RandomSource(5).normal(1.0, 4).tolist()

    def test_spawn_is_independent_of_parent_draws(self):
        a = RandomSource(5)
        a.normal(1.0, 10)
        assert a.spawn(1, 2).normal(1.0, 3).tolist() == RandomSource(5).spawn(1, 2).normal(1.0, 3).tolist()

    def test_spawn_labels_differ(self):
        r = RandomSource(0)
        assert r.spawn(1).normal(1.0, 3).tolist() != r.spawn(2).normal(1.0, 3).tolist()
