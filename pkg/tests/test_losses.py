import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from topk_attack.losses import (
    CE,
    CE_LL,
    CW,
    RCE,
    RCE_LL,
    GradientOnlyLossError,
    InterestSpec,
    LossKind,
    ce_temp,
    gradient_direction_cosine,
    interest_class,
    logit_gradient,
    loss_value,
    runner_up,
    training_grad,
    wce,
    zero_sum_of_gradient,
)

Z = np.array([1.0, 0.2, -1.2])
mpmath.mp.dps = 50


def mp_softmax(z, t=1):
    e = [mpmath.exp(mpmath.mpf(v) / t) for v in z]
    s = sum(e)
    return [v / s for v in e]


def mp_gradient(kind, z, c):
    """High-precision reference gradients written straight from the closed forms."""
    K = len(z)
    y = [1 if i == c else 0 for i in range(K)]
    if kind == "ce":
        p = mp_softmax(z)
        return [p[i] - y[i] for i in range(K)]
    if kind == "ce-ll":
        p = mp_softmax(z)
        return [y[i] - p[i] for i in range(K)]
    if kind == "rce":
        return [mpmath.mpf(1) / K - y[i] for i in range(K)]
    raise ValueError(kind)


class TestLossKind:
    @pytest.mark.parametrize("text,expected", [
        ("ce", CE), ("CE-LL", CE_LL), ("cw", CW), ("rce", RCE), ("rce-ll", RCE_LL),
        ("ce-temp:8", ce_temp(8)), ("wce:1.1", wce(1.1)),
    ])
    def test_parse(self, text, expected):
        assert LossKind.parse(text) == expected
        assert LossKind.parse(str(expected)) == expected

    @pytest.mark.parametrize("text", ["bogus", "ce-temp", "ce-temp:0", "wce:-1", "ce:2", "ce-temp:abc"])
    def test_parse_rejects(self, text):
        with pytest.raises(ValueError):
            LossKind.parse(text)


class TestWorkedExample:
    def test_loss_values(self):
        assert loss_value(CE, Z, 0) == pytest.approx(0.445, abs=1e-3)
        assert loss_value(CW, Z, 0) == pytest.approx(-0.8, abs=1e-12)

    def test_rce_value_matches_oracle(self):
        p = mp_softmax(Z)
        expected = -mpmath.log(p[0]) + sum(mpmath.log(v) for v in p) / 3
        assert loss_value(RCE, Z, 0) == pytest.approx(float(expected), abs=1e-12)
        # RCE reduces to mean(z) - z_gt, which is exactly -1 here
        assert loss_value(RCE, Z, 0) == pytest.approx(-1.0, abs=1e-12)

    def test_gradients_against_printed_values(self):
        np.testing.assert_allclose(logit_gradient(CE, Z, 0), [-0.36, 0.29, 0.07], atol=0.01)
        np.testing.assert_allclose(logit_gradient(CE_LL, Z, 0), [-0.64, -0.29, 0.93], atol=0.01)
        np.testing.assert_allclose(logit_gradient(CW, Z, 0), [-1, 1, 0], atol=0.01)
        np.testing.assert_allclose(logit_gradient(RCE, Z, 0), [-0.66, 0.33, 0.33], atol=0.01)

    @pytest.mark.parametrize("kind", ["ce", "ce-ll", "rce"])
    def test_gradients_against_high_precision(self, kind):
        c = 2 if kind == "ce-ll" else 0
        ref = np.array([float(v) for v in mp_gradient(kind, Z, c)])
        np.testing.assert_allclose(logit_gradient(kind, Z, 0), ref, rtol=0, atol=1e-9)

    def test_ll_class_is_argmin(self):
        assert interest_class(CE_LL, Z, 0) == 2
        assert runner_up(Z, 0) == 1


class TestGradients:
    def test_rce_is_position_agnostic(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            np.testing.assert_array_equal(logit_gradient(RCE, rng.normal(size=3) * 5, 0), [1 / 3 - 1, 1 / 3, 1 / 3])

    def test_rce_ll_mirrors_rce(self):
        g = logit_gradient(RCE_LL, Z, 0)
        np.testing.assert_allclose(g, [-1 / 3, -1 / 3, 2 / 3], atol=1e-15)

    def test_targeted_uses_target_class(self):
        spec = InterestSpec(0, target_class=2)
        np.testing.assert_allclose(logit_gradient(CE, Z, spec), logit_gradient(CE, Z, 2))

    def test_frozen_ll(self):
        spec = InterestSpec(0).frozen_ll(Z)
        assert spec.ll_class == 2
        # after freezing, the LL class stays put even if the logits change
        assert interest_class(CE_LL, np.array([-5.0, 0.0, 3.0]), spec) == 2

    def test_wce_value_is_gradient_only(self):
        with pytest.raises(GradientOnlyLossError):
            loss_value(wce(1.1), Z, 0)

    def test_batched_matches_rows(self):
        rng = np.random.default_rng(1)
        zb = rng.normal(size=(6, 5))
        gt = rng.integers(0, 5, 6)
        for kind in (CE, CE_LL, CW, RCE, RCE_LL, ce_temp(3.0), wce(0.9)):
            gb = logit_gradient(kind, zb, gt)
            for i in range(6):
                np.testing.assert_allclose(gb[i], logit_gradient(kind, zb[i], gt[i]), atol=1e-15)

    def test_class_out_of_range(self):
        with pytest.raises(ValueError):
            logit_gradient(CE, Z, 3)

    def test_stable_at_tiny_temperature(self):
        # p_gt rounds to 1 but the gradient direction must still be exact
        z = np.array([3.0, 2.99, 0.0])
        g = logit_gradient(ce_temp(1e-3), z, 0)
        assert g[0] < 0 and g[1] > 0
        assert g.sum() == pytest.approx(0.0, abs=1e-12 * np.abs(g).max())

    def test_training_grad_adapter(self):
        zb = np.random.default_rng(2).normal(size=(4, 3))
        y = np.array([0, 1, 2, 0])
        np.testing.assert_allclose(training_grad(CE)(zb, y), logit_gradient(CE, zb, y))


def finite_difference(kind, z, c, h=1e-6):
    g = np.zeros_like(z)
    for i in range(len(z)):
        e = np.zeros_like(z)
        e[i] = h
        g[i] = (loss_value(kind, z + e, c) - loss_value(kind, z - e, c)) / (2 * h)
    return g


logit_vectors = st.lists(st.floats(-5, 5), min_size=3, max_size=8).map(np.array)


class TestAgainstFiniteDifferences:
    @settings(max_examples=100, deadline=None)
    @given(logit_vectors, st.sampled_from(["ce", "ce-ll", "rce", "rce-ll", "ce-temp:0.5", "ce-temp:4"]),
           st.integers(0, 7))
    def test_smooth_losses(self, z, kind, c):
        c = c % len(z)
        kind = LossKind.parse(kind)
        if kind.uses_ll:
            # stay away from argmin switches inside the difference stencil
            s = np.sort(z)
            if s[1] - s[0] < 1e-3:
                return
        g = logit_gradient(kind, z, c)
        num = finite_difference(kind, z, c)
        assert np.linalg.norm(g - num) <= 1e-6 * max(np.linalg.norm(g), 1e-12)

    @settings(max_examples=100, deadline=None)
    @given(logit_vectors, st.integers(0, 7))
    def test_cw_off_ties(self, z, c):
        c = c % len(z)
        others = np.delete(z, c)
        s = np.sort(others)
        if s[-1] - s[-2] < 1e-3:
            return
        g = logit_gradient(CW, z, c)
        num = finite_difference(CW, z, c)
        assert np.linalg.norm(g - num) <= 1e-6 * np.linalg.norm(g)


class TestZeroSum:
    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=10).map(np.array), st.integers(0, 9),
           st.sampled_from(["ce", "ce-ll", "cw", "rce", "rce-ll", "ce-temp:0.125", "ce-temp:8", "wce:1"]))
    def test_gradients_sum_to_zero(self, z, c, kind):
        assert abs(zero_sum_of_gradient(kind, z, c % len(z))) <= 1e-12

    def test_wce_offsets_sum(self):
        assert zero_sum_of_gradient(wce(1.1), np.zeros(4), 0) == pytest.approx(0.1, abs=1e-12)

    def test_cw_exact(self):
        assert zero_sum_of_gradient(CW, Z, 0) == 0.0


class TestCosine:
    def test_identities(self):
        a = np.array([0.3, -1.0, 2.0])
        assert gradient_direction_cosine(a, a) == pytest.approx(1.0, abs=1e-15)
        assert gradient_direction_cosine(a, -a) == pytest.approx(-1.0, abs=1e-15)

    def test_zero_vector(self):
        with pytest.raises(ValueError):
            gradient_direction_cosine(np.zeros(3), np.ones(3))

    def test_high_temperature_on_worked_example(self):
        assert gradient_direction_cosine(logit_gradient(ce_temp(1000), Z, 0), logit_gradient(RCE, Z, 0)) >= 0.9999

    def test_tiny_entries(self):
        a = np.array([-4e-212, 0.0, 4e-212])
        assert gradient_direction_cosine(a, np.array([-1.0, 0.0, 1.0])) == pytest.approx(1.0, abs=1e-15)
