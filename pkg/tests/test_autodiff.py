"""Autodiff engine: op semantics, gradient checks, DAG accumulation, determinism."""

import numpy as np
import pytest

from evidose import autodiff as ad

from _helpers import gradcheck, scalarize


def _param(shape, seed, dtype=np.float64, positive=False, scale=1.0):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal(shape) * scale
    if positive:
        a = np.abs(a) + 0.5
    return ad.parameter(a.astype(dtype))


class TestStructuralOps:
    def test_conv_shapes_and_errors(self):
        x = _param((2, 4, 4, 4), 0, np.float32)
        w = _param((3, 2, 3, 3, 3), 1, np.float32)
        b = _param((3,), 2, np.float32)
        y = ad.conv3d(x, w, b, "same")
        assert y.data.shape == (3, 4, 4, 4)
        y = ad.conv3d(x, w, b, "valid")
        assert y.data.shape == (3, 2, 2, 2)
        with pytest.raises(ValueError, match="channel mismatch"):
            ad.conv3d(_param((5, 4, 4, 4), 3, np.float32), w, b)
        with pytest.raises(ValueError, match="odd"):
            ad.conv3d(x, _param((3, 2, 2, 2, 2), 4, np.float32), b)
        with pytest.raises(ValueError, match="bias"):
            ad.conv3d(x, w, _param((7,), 5, np.float32))

    def test_maxpool_divisibility(self):
        with pytest.raises(ValueError, match="does not divide"):
            ad.maxpool3d(_param((1, 3, 4, 4), 6, np.float32), 2)

    def test_upsample_concat_values(self):
        low = ad.constant(np.full((1, 1, 1, 1), 5.0, np.float32))
        skip = ad.constant(np.zeros((1, 2, 2, 2), np.float32))
        y = ad.upsample_concat(low, skip)
        assert y.data.shape == (2, 2, 2, 2)
        assert np.all(y.data[0] == 5.0)
        assert np.all(y.data[1] == 0.0)

    def test_upsample_concat_channel_arithmetic(self):
        low = _param((3, 2, 2, 2), 7, np.float32)
        skip = _param((5, 4, 4, 4), 8, np.float32)
        y = ad.upsample_concat(low, skip)
        assert y.data.shape[0] == 3 + 5
        with pytest.raises(ValueError, match="extent mismatch"):
            ad.upsample_concat(skip, low)

    def test_channel_slice_bounds(self):
        x = _param((4, 2, 2, 2), 9, np.float32)
        assert ad.channel_slice(x, 1, 3).data.shape == (2, 2, 2, 2)
        with pytest.raises(ValueError, match="out of range"):
            ad.channel_slice(x, 2, 5)


class TestGradients:
    """Central finite-difference checks, float64 graphs (tight tolerance)."""

    def test_conv3d(self):
        x = _param((2, 4, 4, 4), 10)
        w = _param((3, 2, 3, 3, 3), 11)
        b = _param((3,), 12)
        rng = np.random.default_rng(13)
        gradcheck(lambda: scalarize(ad.conv3d(x, w, b, "same"), np.random.default_rng(13)),
                  [x, w, b], rtol=1e-6)

    def test_conv3d_valid(self):
        x = _param((2, 5, 5, 5), 14)
        w = _param((2, 2, 3, 3, 3), 15)
        b = _param((2,), 16)
        gradcheck(lambda: scalarize(ad.conv3d(x, w, b, "valid"), np.random.default_rng(17)),
                  [x, w, b], rtol=1e-6)

    def test_maxpool3d(self):
        # continuous random values: ties have probability zero
        x = _param((2, 4, 4, 4), 18)
        gradcheck(lambda: scalarize(ad.maxpool3d(x, 2), np.random.default_rng(19)),
                  [x], rtol=1e-6)

    def test_maxpool_routes_to_argmax(self):
        x = ad.parameter(np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2))
        y = ad.maxpool3d(x, 2)
        ad.backward(y)
        expect = np.zeros((1, 2, 2, 2))
        expect[0, 1, 1, 1] = 1.0
        np.testing.assert_array_equal(x.grad, expect)

    def test_upsample_concat(self):
        low = _param((2, 2, 2, 2), 20)
        skip = _param((3, 4, 4, 4), 21)
        gradcheck(lambda: scalarize(ad.upsample_concat(low, skip), np.random.default_rng(22)),
                  [low, skip], rtol=1e-6)

    @pytest.mark.parametrize(
        "name,fn,positive,seed",
        [
            ("relu", ad.relu, False, 101),
            ("sigmoid", ad.sigmoid, False, 102),
            ("softplus", ad.softplus, False, 103),
            ("exp", ad.exp, False, 104),
            ("log", ad.log, True, 105),
            ("lgamma", ad.lgamma, True, 106),
            ("abs", ad.absval, False, 107),
            ("square", ad.square, False, 108),
        ],
    )
    def test_elementwise(self, name, fn, positive, seed):
        x = _param((2, 3, 3, 3), seed, positive=positive)
        if name in ("relu", "abs"):
            # keep clear of the kink at zero where the subgradient is exact
            # but finite differences are not
            x.data = x.data + np.where(x.data >= 0, 0.2, -0.2)
        gradcheck(lambda: scalarize(fn(x), np.random.default_rng(23)), [x], rtol=1e-6)

    @pytest.mark.parametrize("fn", [ad.add, ad.sub, ad.mul])
    def test_binary(self, fn):
        a = _param((2, 3, 3, 3), 24)
        b = _param((2, 3, 3, 3), 25)
        gradcheck(lambda: scalarize(fn(a, b), np.random.default_rng(26)), [a, b], rtol=1e-6)

    @pytest.mark.parametrize("fn", [ad.add, ad.sub, ad.mul])
    def test_binary_scalar_operand(self, fn):
        a = _param((2, 3, 3, 3), 27)
        gradcheck(lambda: scalarize(fn(a, 1.7), np.random.default_rng(28)), [a], rtol=1e-6)

    def test_masked_mean(self):
        x = _param((1, 4, 4, 4), 29)
        mask = np.random.default_rng(30).random((1, 4, 4, 4)) > 0.4
        gradcheck(lambda: ad.masked_mean(x, mask), [x], rtol=1e-6)

    def test_dropout_fixed_mask(self):
        x = _param((2, 4, 4, 4), 31)
        gradcheck(
            lambda: scalarize(ad.dropout(x, 0.3, np.random.default_rng(7), True),
                              np.random.default_rng(32)),
            [x], rtol=1e-6,
        )

    def test_float32_tolerance(self):
        x = _param((2, 4, 4, 4), 33, np.float32)
        w = _param((2, 2, 3, 3, 3), 34, np.float32)
        b = _param((2,), 35, np.float32)
        gradcheck(
            lambda: scalarize(ad.sigmoid(ad.conv3d(x, w, b)), np.random.default_rng(36)),
            [x, w, b], rtol=1e-3,
        )


class TestSemantics:
    def test_lgamma_values(self):
        x = ad.constant(np.array([[[[1.0, 2.0]]]]))
        y = ad.lgamma(x)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-12)

    def test_sigmoid_half(self):
        y = ad.sigmoid(ad.constant(np.zeros((1, 1, 1, 1))))
        assert y.data[0, 0, 0, 0] == 0.5

    def test_lgamma_gradient_matches_central_difference(self):
        x = ad.parameter(np.full((1, 1, 1, 1), 3.7))
        y = ad.lgamma(x)
        ad.backward(y)
        h = 1e-6
        from evidose import special
        num = (special.lgamma(3.7 + h) - special.lgamma(3.7 - h)) / (2 * h)
        assert abs(x.grad[0, 0, 0, 0] - num) / abs(num) < 1e-5

    def test_log_domain_rejected_before_evaluation(self):
        x = ad.constant(np.array([[[[1.0, -0.5]]]]))
        with pytest.raises(ValueError, match="strictly positive"):
            ad.log(x)
        with pytest.raises(ValueError, match="strictly positive"):
            ad.lgamma(x)

    def test_shared_subexpression_accumulates(self):
        # three-node graph out = a * a with a = x^2: d(x^4)/dx = 4 x^3
        x = ad.parameter(np.full((1, 1, 1, 1), 1.3))
        a = ad.square(x)
        out = ad.mul(a, a)
        ad.backward(out)
        np.testing.assert_allclose(x.grad[0, 0, 0, 0], 4 * 1.3**3, rtol=1e-12)

    def test_backward_visits_once(self):
        x = ad.parameter(np.ones((1, 1, 1, 1)))
        a = ad.square(x)
        calls = []
        orig = a._backward

        def counting(g):
            calls.append(1)
            orig(g)

        a._backward = counting
        out = ad.add(ad.mul(a, 2.0), ad.mul(a, 3.0))
        ad.backward(out)
        assert len(calls) == 1
        np.testing.assert_allclose(x.grad[0, 0, 0, 0], 10.0)  # d(5 x^2)/dx at 1

    def test_forward_values_finite(self):
        rng = np.random.default_rng(40)
        x = ad.constant(rng.standard_normal((3, 8, 8, 8)).astype(np.float32))
        w = ad.constant(rng.standard_normal((4, 3, 3, 3, 3)).astype(np.float32) * 0.2)
        b = ad.constant(np.zeros(4, np.float32))
        h = ad.relu(ad.conv3d(x, w, b))
        h = ad.maxpool3d(h)
        h = ad.softplus(h)
        assert np.all(np.isfinite(h.data))


class TestDropout:
    def test_rate_zero_identity(self):
        x = _param((2, 4, 4, 4), 41)
        y = ad.dropout(x, 0.0, np.random.default_rng(0), True)
        assert y is x

    def test_inference_identity(self):
        x = _param((2, 4, 4, 4), 42)
        y = ad.dropout(x, 0.9, np.random.default_rng(0), False)
        assert y is x

    def test_rate_validation(self):
        x = _param((1, 2, 2, 2), 43)
        with pytest.raises(ValueError):
            ad.dropout(x, 1.0, np.random.default_rng(0), True)
        with pytest.raises(ValueError):
            ad.dropout(x, -0.1, np.random.default_rng(0), True)

    def test_monte_carlo_mean_preserved(self):
        x = ad.constant(np.full((1, 1, 1, 1), 2.0))
        rate = 0.25
        rng = np.random.default_rng(44)
        n = 100_000
        samples = np.array([
            ad.dropout(x, rate, rng, True).data.item() for _ in range(n)
        ])
        se = samples.std(ddof=1) / np.sqrt(n)
        assert abs(samples.mean() - 2.0) < 3 * se

    def test_same_seed_identical(self):
        x = _param((2, 8, 8, 8), 45, np.float32)
        y1 = ad.dropout(x, 0.4, np.random.default_rng(5), True)
        y2 = ad.dropout(x, 0.4, np.random.default_rng(5), True)
        np.testing.assert_array_equal(y1.data, y2.data)
        y3 = ad.dropout(x, 0.4, np.random.default_rng(6), True)
        assert not np.array_equal(y1.data, y3.data)


def test_bit_identical_forward_backward():
    def run():
        rng = np.random.default_rng(50)
        x = ad.constant(rng.standard_normal((2, 4, 4, 4)).astype(np.float32))
        w = ad.parameter(rng.standard_normal((2, 2, 3, 3, 3)).astype(np.float32))
        b = ad.parameter(np.zeros(2, np.float32))
        h = ad.relu(ad.conv3d(x, w, b))
        h = ad.dropout(h, 0.2, np.random.default_rng(51), True)
        loss = ad.masked_mean(ad.square(h), np.ones(h.data.shape, bool))
        ad.backward(loss)
        return float(loss.data), w.grad.copy(), b.grad.copy()

    l1, gw1, gb1 = run()
    l2, gw2, gb2 = run()
    assert l1 == l2
    np.testing.assert_array_equal(gw1, gw2)
    np.testing.assert_array_equal(gb1, gb2)
