import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scenebias import autodiff as ad
from scenebias.autodiff import Parameter, Tape, Tensor
from scenebias.errors import ConfigError, ContractError, DimensionError


def naive_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


def naive_conv(x, w, b):
    c_in, h, wd = x.shape
    c_out, _, kh, kw = w.shape
    out = np.zeros((c_out, h - kh + 1, wd - kw + 1))
    for o in range(c_out):
        for i in range(h - kh + 1):
            for j in range(wd - kw + 1):
                s = b[o]
                for c in range(c_in):
                    for u in range(kh):
                        for v in range(kw):
                            s += x[c, i + u, j + v] * w[o, c, u, v]
                out[o, i, j] = s
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b))))


class TestMatmul:
    def test_identity(self):
        out = ad.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        assert out.data.tolist() == [[3, 4], [5, 6]]

    def test_scalar_case(self):
        assert ad.matmul(Tensor([[2]]), Tensor([[3]])).data.tolist() == [[6]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
        assert rel_err(ad.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b)) < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\[2, 3\].*\[2, 3\]"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestConv2d:
    def test_unit_kernel_is_identity(self):
        x = np.random.default_rng(0).random((1, 5, 6))
        out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
        assert np.array_equal(out.data, x)

    def test_ones_kernel_on_constant_image(self):
        c = 0.37
        out = ad.conv2d(Tensor(np.full((1, 4, 4), c)), Tensor(np.ones((1, 1, 2, 2))), Tensor([0.0]))
        assert out.shape == (1, 3, 3)
        np.testing.assert_allclose(out.data, 4 * c, rtol=0, atol=1e-15)

    def test_against_direct_summation(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(1, 6, 6)), rng.normal(size=(2, 1, 3, 3)), rng.normal(size=2)
        assert rel_err(ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data, naive_conv(x, w, b)) < 1e-12

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(3, 2, 5, 5)), rng.normal(size=(4, 2, 3, 3)), rng.normal(size=4)
        batched = ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
        for i in range(3):
            assert rel_err(batched[i], naive_conv(x[i], w, b)) < 1e-12

    def test_kernel_larger_than_input(self):
        with pytest.raises(DimensionError):
            ad.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))

    def test_gradients_against_finite_differences(self):
        rng = np.random.default_rng(4)
        x = Parameter(rng.normal(size=(2, 2, 5, 4)), "x")
        w = Parameter(rng.normal(size=(3, 2, 3, 2)), "w")
        b = Parameter(rng.normal(size=3), "b")
        probe = rng.normal(size=(2, 3, 3, 3))

        def f_of(which):
            def f(t):
                args = {"x": x.data, "w": w.data, "b": b.data}
                args[which] = t.data
                with ad.no_grad():
                    out = ad.conv2d(Tensor(args["x"]), Tensor(args["w"]), Tensor(args["b"]))
                return float(np.sum(out.data * probe))
            return f

        with Tape() as tape:
            loss = ad.sum(ad.mul(ad.conv2d(x, w, b), probe))
        ad.backward(loss, tape)
        for name, p in (("x", x), ("w", w), ("b", b)):
            assert rel_err(p.grad, ad.finite_diff_grad(f_of(name), Tensor(p.data)).data) <= 1e-5


class TestRelu:
    def test_values(self):
        assert ad.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0, 0, 2]

    def test_all_negative_gives_zero_gradient(self):
        x = Parameter([-1.0, -2.0, -0.5])
        with Tape() as tape:
            out = ad.relu(x)
            loss = ad.sum(out)
        ad.backward(loss, tape)
        assert out.data.tolist() == [0, 0, 0]
        assert x.grad.tolist() == [0, 0, 0]

    def test_gradient_away_from_kink(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=20)
        data = data[np.abs(data) > 1e-3]
        weights = rng.normal(size=data.size)
        x = Parameter(data)
        with Tape() as tape:
            loss = ad.sum(ad.mul(ad.relu(x), weights))
        ad.backward(loss, tape)
        fd = ad.finite_diff_grad(lambda t: float(np.sum(np.maximum(t.data, 0) * weights)), Tensor(data))
        np.testing.assert_allclose(x.grad, fd.data, rtol=1e-5, atol=1e-9)


class TestLogSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.log_softmax(Tensor([0.0] * 4)).data, -math.log(4), rtol=0, atol=1e-15)

    def test_shift_invariance(self):
        z = np.random.default_rng(6).normal(size=7)
        a = ad.log_softmax(Tensor(z)).data
        b = ad.log_softmax(Tensor(z + 12.5)).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_large_logits_stay_finite(self):
        import mpmath

        mpmath.mp.dps = 50
        lse = mpmath.log(mpmath.exp(1000) + mpmath.exp(0))
        expected = [float(1000 - lse), float(0 - lse)]
        out = ad.log_softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, expected, rtol=1e-15, atol=1e-12)

    def test_empty_is_dimension_error(self):
        with pytest.raises(DimensionError):
            ad.log_softmax(Tensor(np.zeros(0)))

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-700, 700)))
    def test_probabilities_sum_to_one(self, z):
        assert abs(np.exp(ad.log_softmax(Tensor(z)).data).sum() - 1.0) <= 1e-12


class TestGradReverse:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(1, 10), elements=st.floats(-1e6, 1e6)), st.floats(0, 10))
    def test_forward_bit_identity(self, x, lam):
        out = ad.grad_reverse(Tensor(x), lam)
        assert out.data.tobytes() == Tensor(x).data.tobytes()

    @pytest.mark.parametrize("lam, expected", [(0.0, [0.0, 0.0]), (0.5, [-0.5, 1.0])])
    def test_backward_scale(self, lam, expected):
        x = Parameter([3.0, 4.0])
        with Tape() as tape:
            loss = ad.sum(ad.mul(ad.grad_reverse(x, lam), [1.0, -2.0]))
        ad.backward(loss, tape)
        assert x.grad.tolist() == expected

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            ad.grad_reverse(Tensor([1.0]), -0.1)


class TestBackward:
    def test_sum(self):
        x = Parameter([1.0, 2.0, 3.0])
        with Tape() as tape:
            loss = ad.sum(x)
        ad.backward(loss, tape)
        assert x.grad.tolist() == [1, 1, 1]

    def test_zero_times_x(self):
        x = Parameter([1.0, -2.0])
        with Tape() as tape:
            loss = ad.sum(ad.mul(x, 0.0))
        ad.backward(loss, tape)
        assert x.grad.tolist() == [0, 0]

    def test_non_scalar_loss(self):
        x = Parameter([1.0, 2.0])
        with Tape() as tape:
            y = ad.mul(x, 2.0)
        with pytest.raises(ContractError):
            ad.backward(y, tape)

    def test_tape_order_is_topological(self):
        x = Parameter([1.0, 2.0])
        with Tape() as tape:
            y = ad.relu(ad.mul(x, 3.0))
            ad.sum(ad.add(y, x))
        seen = {id(x)}
        for node in tape.nodes:
            assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
            seen.add(id(node.output))

    def test_two_passes_accumulate(self):
        rng = np.random.default_rng(7)
        w = Parameter(rng.normal(size=(3, 2)))
        x = rng.normal(size=(4, 3))
        with Tape() as tape:
            loss = ad.sum(ad.relu(ad.matmul(Tensor(x), w)))
        ad.backward(loss, tape)
        once = w.grad.copy()
        ad.backward(loss, tape)
        assert np.array_equal(w.grad, 2 * once)

    def test_two_layer_network_against_finite_differences(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(5, 4))
        y = rng.integers(0, 3, size=5)
        params = {
            "w1": rng.normal(size=(4, 6)), "b1": rng.normal(size=6),
            "w2": rng.normal(size=(6, 3)), "b2": rng.normal(size=3),
        }

        def loss_fn(p):
            h = ad.relu(ad.add(ad.matmul(Tensor(x), p["w1"]), p["b1"]))
            logp = ad.log_softmax(ad.add(ad.matmul(h, p["w2"]), p["b2"]))
            return ad.neg(ad.mean(ad.take(logp, y)))

        tensors = {k: Parameter(v, k) for k, v in params.items()}
        with Tape() as tape:
            loss = loss_fn(tensors)
        ad.backward(loss, tape)
        pre = x @ params["w1"] + params["b1"]
        assert np.min(np.abs(pre)) > 1e-3
        for name, p in tensors.items():
            def f(t, name=name):
                with ad.no_grad():
                    return loss_fn({**{k: Tensor(v) for k, v in params.items()}, name: t})
            fd = ad.finite_diff_grad(f, Tensor(params[name]), 1e-6)
            assert rel_err(p.grad, fd.data) <= 1e-5, name


class TestSgd:
    def test_plain_step(self):
        p = Parameter([1.0], "p")
        p.grad = np.array([2.0])
        ad.sgd_step([p], lr=0.1, momentum=0.0, weight_decay=0.0)
        assert p.data[0] == pytest.approx(0.8, abs=1e-15)
        assert p.grad is None

    def test_zero_grad_leaves_param(self):
        p = Parameter([1.5, -2.0], "p")
        p.grad = np.zeros(2)
        ad.sgd_step([p], lr=0.3, momentum=0.9, weight_decay=0.0)
        assert p.data.tolist() == [1.5, -2.0]

    def test_two_momentum_steps_match_recurrence(self):
        p = Parameter([1.0, -1.0], "p")
        g1, g2 = np.array([0.5, 0.25]), np.array([-0.1, 0.3])
        lr, m, wd = 0.1, 0.9, 1e-5
        theta, buf = np.array([1.0, -1.0]), np.zeros(2)
        for g in (g1, g2):
            p.grad = g
            ad.sgd_step([p], lr, m, wd)
            buf = m * buf + g + wd * theta
            theta = theta - lr * buf
        np.testing.assert_allclose(p.data, theta, rtol=0, atol=1e-12)

    def test_missing_grad_names_parameter(self):
        with pytest.raises(ContractError, match="theta_f.conv"):
            ad.sgd_step([Parameter([1.0], "theta_f.conv")], 0.1)

    def test_momentum_buffer_length(self):
        p = Parameter(np.ones((2, 3)), "p")
        assert p.momentum_buffer.shape == p.data.shape


class TestFiniteDiff:
    def test_sum_of_squares(self):
        fd = ad.finite_diff_grad(lambda t: float(np.sum(t.data ** 2)), Tensor([1.0, 2.0]), 1e-6)
        np.testing.assert_allclose(fd.data, [2.0, 4.0], rtol=0, atol=1e-6)

    def test_constant(self):
        assert ad.finite_diff_grad(lambda t: 3.0, Tensor([1.0, 2.0, 3.0])).data.tolist() == [0, 0, 0]

    def test_agrees_with_backward_on_composite(self):
        rng = np.random.default_rng(9)
        a = rng.normal(size=(3, 4))
        x0 = rng.normal(size=(4, 2))

        def f(t):
            z = ad.log_softmax(ad.matmul(Tensor(a), t), axis=0)
            return ad.sum(ad.mul(ad.exp(z), z))

        x = Parameter(x0)
        with Tape() as tape:
            loss = f(x)
        ad.backward(loss, tape)
        with ad.no_grad():
            fd = ad.finite_diff_grad(f, Tensor(x0))
        assert rel_err(x.grad, fd.data) < 1e-6
