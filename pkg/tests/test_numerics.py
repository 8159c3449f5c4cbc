"""Tensor engine against brute-force oracles and finite differences."""

import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dhvt.numerics import (
    AdamW,
    BatchNormState,
    DegenerateBatchError,
    Initializer,
    ParamStore,
    ShapeError,
    Tape,
    Tensor,
    adamw_step,
    avg_pool3x3,
    backward,
    batchnorm2d,
    concat,
    conv2d,
    cross_entropy,
    dropout,
    gelu,
    layernorm,
    linear,
    lr_at,
    matmul,
    no_grad,
    set_debug,
    softmax,
)

from conftest import fd_check


def matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


def conv_loops(x, w, bias, stride, pad, groups):
    B, C, H, W = x.shape
    O, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    og = O // groups
    out = np.zeros((B, O, ho, wo))
    for b in range(B):
        for o in range(O):
            g = o // og
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if bias is None else bias[o]
                    for c in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, g * cg + c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def bn_state(c, rng, dtype=np.float64):
    return BatchNormState(Tensor(rng.standard_normal(c) + 1.0, requires_grad=True),
                          Tensor(rng.standard_normal(c), requires_grad=True),
                          Tensor(np.zeros(c, dtype)), Tensor(np.ones(c, dtype)))


class TestMatmul:
    def test_matches_triple_loop(self, rng):
        a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
        np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12)

    def test_batched_broadcast(self, rng):
        a, b = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((5, 2))
        out = matmul(Tensor(a), Tensor(b)).data
        for i in range(2):
            for j in range(3):
                np.testing.assert_allclose(out[i, j], matmul_loops(a[i, j], b), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_gradient(self, rng):
        fd_check(lambda a, b: a @ b, rng.standard_normal((3, 4)), rng.standard_normal((4, 2)))


class TestConv2d:
    @pytest.mark.parametrize("stride,pad,groups", [(1, 0, 1), (1, 1, 1), (2, 1, 1), (2, 0, 2), (1, 1, 4)])
    def test_matches_six_loops(self, rng, stride, pad, groups):
        x = rng.standard_normal((2, 4, 7, 6))
        w = rng.standard_normal((4, 4 // groups, 3, 3))
        b = rng.standard_normal(4)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad, groups=groups).data
        np.testing.assert_allclose(out, conv_loops(x, w, b, stride, pad, groups), atol=1e-12)

    def test_depthwise_groups_equal_channels(self, rng):
        x = rng.standard_normal((2, 5, 6, 6))
        w = rng.standard_normal((5, 1, 3, 3))
        out = conv2d(Tensor(x), Tensor(w), None, stride=1, padding=1, groups=5).data
        for c in range(5):
            ref = conv_loops(x[:, c:c + 1], w[c:c + 1], None, 1, 1, 1)
            np.testing.assert_allclose(out[:, c:c + 1], ref, atol=1e-12)

    def test_pointwise_is_linear_over_channels(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        w = rng.standard_normal((5, 3, 1, 1))
        out = conv2d(Tensor(x), Tensor(w)).data
        ref = np.einsum("bchw,oc->bohw", x, w[:, :, 0, 0])
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 2, 3, 3))))

    @pytest.mark.parametrize("stride,pad,groups", [(1, 1, 1), (2, 1, 1), (1, 1, 3), (2, 0, 3)])
    def test_gradient(self, rng, stride, pad, groups):
        fd_check(lambda x, w, b: conv2d(x, w, b, stride=stride, padding=pad, groups=groups),
                 rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((3, 3 // groups, 3, 3)),
                 rng.standard_normal(3))


class TestNorms:
    def test_bn_train_standardizes(self, rng):
        x = rng.standard_normal((4, 3, 5, 5)) * 3 + 2
        st_ = BatchNormState(Tensor(np.ones(3)), Tensor(np.zeros(3)), Tensor(np.zeros(3)), Tensor(np.ones(3)))
        y = batchnorm2d(Tensor(x), st_, train=True).data
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-6)
        # eps shifts the variance slightly below one
        np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-4)

    def test_bn_running_stats_unbiased(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        st_ = BatchNormState(Tensor(np.ones(2)), Tensor(np.zeros(2)), Tensor(np.zeros(2)), Tensor(np.ones(2)))
        batchnorm2d(Tensor(x), st_, train=True)
        m = x.mean(axis=(0, 2, 3))
        v = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(st_.running_mean.data, 0.1 * m, atol=1e-14)
        np.testing.assert_allclose(st_.running_var.data, 0.9 + 0.1 * v, atol=1e-14)

    def test_bn_eval_uses_running_stats(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        st_ = BatchNormState(Tensor(np.array([2.0, 3.0])), Tensor(np.array([0.5, -1.0])),
                             Tensor(np.array([0.1, -0.2])), Tensor(np.array([4.0, 0.25])))
        y = batchnorm2d(Tensor(x), st_, train=False).data
        ref = (x - st_.running_mean.data[None, :, None, None]) / np.sqrt(st_.running_var.data + 1e-5)[None, :, None, None]
        ref = ref * st_.gamma.data[None, :, None, None] + st_.beta.data[None, :, None, None]
        np.testing.assert_allclose(y, ref, atol=1e-14)

    def test_bn_degenerate_batch(self):
        st_ = BatchNormState(Tensor(np.ones(1)), Tensor(np.zeros(1)), Tensor(np.zeros(1)), Tensor(np.ones(1)))
        with pytest.raises(DegenerateBatchError):
            batchnorm2d(Tensor(np.ones((1, 1, 1, 1))), st_, train=True)

    @pytest.mark.parametrize("train", [True, False])
    def test_bn_gradient(self, rng, train):
        st_ = bn_state(3, rng)
        st_.running_var.data = rng.uniform(0.5, 2.0, 3)

        def fn(x, g, b):
            s = BatchNormState(g, b, st_.running_mean, st_.running_var)
            return batchnorm2d(x, s, train=train, update_stats=False)

        fd_check(fn, rng.standard_normal((2, 3, 3, 3)), rng.standard_normal(3) + 1, rng.standard_normal(3))

    def test_layernorm_matches_formula(self, rng):
        x = rng.standard_normal((3, 4, 6))
        g, b = rng.standard_normal(6), rng.standard_normal(6)
        y = layernorm(Tensor(x), Tensor(g), Tensor(b)).data
        ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-6) * g + b
        np.testing.assert_allclose(y, ref, atol=1e-12)

    def test_layernorm_gradient(self, rng):
        fd_check(layernorm, rng.standard_normal((2, 3, 5)), rng.standard_normal(5), rng.standard_normal(5))


class TestActivations:
    def test_gelu_at_one_matches_erf_series(self):
        mpmath.mp.dps = 40
        ref = float(mpmath.mpf(1) * 0.5 * (1 + mpmath.erf(1 / mpmath.sqrt(2))))
        assert abs(float(gelu(Tensor(np.array([1.0]))).data[0]) - ref) < 1e-15

    def test_gelu_is_exact_not_tanh(self):
        x = np.array([1.5])
        tanh_form = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
        assert abs(gelu(Tensor(x)).data[0] - tanh_form[0]) > 1e-5

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax(Tensor(rng.standard_normal((4, 7)) * 30)).data
        np.testing.assert_allclose(p.sum(-1), 1, atol=1e-14)
        assert np.all(p >= 0)

    def test_softmax_shift_invariant(self, rng):
        x = rng.standard_normal((3, 5))
        np.testing.assert_allclose(softmax(Tensor(x)).data, softmax(Tensor(x + 100.0)).data, atol=1e-14)

    def test_cross_entropy_closed_form(self):
        logits = np.log(np.array([[0.5, 0.25, 0.25], [0.1, 0.1, 0.8]]))
        loss = cross_entropy(Tensor(logits), [0, 2]).data
        assert abs(float(loss) - 0.5 * (math.log(2) - math.log(0.8))) < 1e-14

    def test_cross_entropy_uniform(self):
        assert abs(float(cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2]).data) - math.log(4)) < 1e-14

    def test_dropout_eval_identity(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        assert dropout(x, 0.5, None, train=False) is x

    def test_avg_pool_constant_interior(self):
        y = avg_pool3x3(Tensor(np.ones((1, 2, 5, 5)))).data
        np.testing.assert_allclose(y[:, :, 1:-1, 1:-1], 1.0)
        np.testing.assert_allclose(y[:, :, 0, 0], 4 / 9)

    @pytest.mark.parametrize("fn", [gelu, softmax, lambda x: softmax(x, axis=0), avg_pool3x3])
    def test_gradients(self, rng, fn):
        shape = (1, 2, 4, 4) if fn is avg_pool3x3 else (3, 4)
        fd_check(fn, rng.standard_normal(shape))

    def test_cross_entropy_gradient(self, rng):
        fd_check(lambda z: cross_entropy(z, [1, 0, 2]), rng.standard_normal((3, 4)))

    def test_linear_gradient(self, rng):
        fd_check(linear, rng.standard_normal((2, 3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5))


class TestStructuralOps:
    @settings(max_examples=15, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
    def test_broadcast_arithmetic_gradients(self, a, b, c, seed):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal((a, b, c)), r.standard_normal((b, 1))
        fd_check(lambda p, q: (p * q - p / (q * q + 2.0)) + q, x, y)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(2, 4), st.integers(2, 4), st.integers(0, 10_000))
    def test_reshape_transpose_getitem_concat(self, a, b, seed):
        r = np.random.default_rng(seed)
        x, y = r.standard_normal((a, b)), r.standard_normal((1, b))

        def fn(p, q):
            z = concat([p, q], axis=0).transpose(1, 0).reshape(-1)
            return z[1:] * z[:-1]

        fd_check(fn, x, y)

    def test_mean_and_sum_gradients(self, rng):
        fd_check(lambda x: x.mean(axis=1, keepdims=True) * x.sum(axis=0), rng.standard_normal((3, 4)))


class TestTape:
    def test_tape_consumed_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum()
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, 2.0)
        with pytest.raises(RuntimeError):
            backward(loss, tape)

    def test_gradients_accumulate_over_reuse(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        with Tape() as tape:
            loss = (x * x + x).sum()
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, [7.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape, no_grad():
            _ = x * x
        assert len(tape) == 0

    def test_debug_check_catches_nonfinite(self):
        set_debug(True)
        try:
            with np.errstate(divide="ignore"), pytest.raises(FloatingPointError, match="div"):
                Tensor(np.array([1.0])) / Tensor(np.array([0.0]))
        finally:
            set_debug(False)


class TestAdamW:
    def test_first_step_closed_form(self, rng):
        ps = ParamStore()
        p0 = rng.standard_normal(5)
        ps.add("w", p0.copy())
        g = rng.standard_normal(5)
        adamw_step(ps, {"w": g}, lr=0.01, weight_decay=0.1)
        expect = p0 - 0.01 * 0.1 * p0 - 0.01 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(ps["w"].data, expect, atol=1e-15)

    def test_decay_only_shrinks_exactly(self):
        ps = ParamStore()
        ps.add("w", np.array([2.0, -4.0]))
        adamw_step(ps, {"w": np.zeros(2)}, lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(ps["w"].data, [2.0 - 0.1 * 0.5 * 2.0, -4.0 + 0.1 * 0.5 * 4.0], atol=1e-15)

    def test_second_step_bias_correction(self):
        ps = ParamStore()
        ps.add("w", np.array([0.0]))
        opt = AdamW(lr=1.0, weight_decay=0.0)
        opt.step(ps, {"w": np.array([1.0])})
        opt.step(ps, {"w": np.array([3.0])})
        m = (0.1 * 0.9 + 0.1 * 3.0) / (1 - 0.81)
        v = (0.001 * 0.999 + 0.001 * 9.0) / (1 - 0.999 ** 2)
        np.testing.assert_allclose(ps["w"].data, [-1.0 - m / (math.sqrt(v) + 1e-8)], atol=1e-12)

    def test_buffers_untouched(self):
        ps = ParamStore()
        ps.add("x.running_var", np.ones(2), trainable=False)
        ps.add("w", np.ones(2))
        adamw_step(ps, {"w": np.ones(2)}, lr=0.1, weight_decay=0.1)
        np.testing.assert_array_equal(ps["x.running_var"].data, 1.0)


class TestSchedule:
    def test_warmup_starts_at_zero(self):
        assert lr_at(0, 100, 10, 1e-3) == 0.0

    def test_continuous_at_boundary(self):
        eps = lr_at(10, 100, 10, 1e-3) - lr_at(9, 100, 10, 1e-3)
        assert lr_at(10, 100, 10, 1e-3) == pytest.approx(1e-3)
        assert 0 < eps <= 1e-3 / 10 + 1e-12

    def test_cosine_tail(self):
        assert lr_at(100, 100, 10, 1e-3) <= 1e-8 * 1e-3

    def test_midpoint(self):
        assert lr_at(55, 100, 10, 1.0) == pytest.approx(0.5)


class TestInit:
    def test_trunc_normal_bounded(self):
        w = Initializer(0, "f64").trunc_normal((2000,))
        assert np.abs(w).max() <= 0.04 + 1e-12
        assert 0.015 < w.std() < 0.02

    def test_deterministic(self):
        a = Initializer(3, "f32").trunc_normal((4, 4))
        b = Initializer(3, "f32").trunc_normal((4, 4))
        np.testing.assert_array_equal(a, b)
        assert a.dtype == np.float32
