import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pvrct.errors import ConfigError, MissingClassError
from pvrct.nn.gradcheck import numerical_grad, relative_error
from pvrct.objectives import (
    ConfusionMatrix,
    LossParams,
    balanced_accuracy,
    bce_loss,
    confusion,
    focal_loss,
    metric_report,
    mse_loss,
    threshold_decisions,
)

LN2 = 0.6931471805599453


class TestBce:
    def test_half_probability(self):
        loss, _ = bce_loss([0.5], [1])
        assert loss == pytest.approx(0.693147, abs=1e-6)

    def test_confident_correct_is_eps_level(self):
        eps = 1e-7
        loss, _ = bce_loss([1 - eps], [1])
        assert 0 <= loss < 1e-6
        loss, _ = bce_loss([1.0], [1])
        assert 0 <= loss < 1e-6

    def test_zero_probability_is_finite(self):
        loss, grad = bce_loss([0.0], [1])
        assert math.isfinite(loss) and np.all(np.isfinite(grad))
        assert loss == pytest.approx(-math.log(1e-7))

    def test_batch_mean(self):
        a, _ = bce_loss([0.2], [1])
        b, _ = bce_loss([0.7], [0])
        ab, _ = bce_loss([0.2, 0.7], [1, 0])
        assert ab == pytest.approx((a + b) / 2)

    def test_empty_and_mismatch(self):
        with pytest.raises(ValueError):
            bce_loss([], [])
        with pytest.raises(ValueError):
            bce_loss([0.5, 0.5], [1])


class TestFocal:
    def test_hand_value_at_half(self):
        loss, _ = focal_loss([0.5], [1], LossParams(2.0, 0.75))
        assert loss == pytest.approx(0.75 * 0.25 * LN2, abs=1e-12)
        assert loss == pytest.approx(0.129965, abs=1e-6)

    def test_hand_value_at_point_nine(self):
        loss, _ = focal_loss([0.9], [1], LossParams(2.0, 0.75))
        assert loss == pytest.approx(0.75 * 0.01 * -math.log(0.9), rel=1e-12)
        assert loss == pytest.approx(7.902e-4, abs=5e-8)

    def test_negative_term_uses_one_minus_alpha(self):
        loss, _ = focal_loss([0.5], [0], LossParams(2.0, 0.75))
        assert loss == pytest.approx(0.25 * 0.25 * LN2, rel=1e-12)

    def test_unweighted_form(self):
        loss, _ = focal_loss([0.5], [1], LossParams(2.0, 0.75, alpha_balanced=False))
        assert loss == pytest.approx(0.25 * LN2, rel=1e-12)

    def test_params_validation(self):
        with pytest.raises(ConfigError, match="alpha"):
            LossParams(alpha=1.0).validate()
        with pytest.raises(ConfigError, match="gamma"):
            LossParams(gamma=-1).validate()

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 40))
    def test_gamma_zero_is_half_bce(self, seed, n):
        rng = np.random.default_rng(seed)
        p, y = rng.uniform(size=n), rng.integers(0, 2, size=n)
        f, gf = focal_loss(p, y, LossParams(0.0, 0.5))
        b, gb = bce_loss(p, y)
        assert abs(f - 0.5 * b) <= 1e-12
        np.testing.assert_allclose(gf, 0.5 * gb, rtol=1e-12, atol=0)

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, st.integers(1, 20), elements=st.floats(1e-4, 1 - 1e-4)),
        st.floats(0, 5), st.floats(0.05, 0.95),
    )
    def test_bounded_by_weighted_bce_termwise(self, p, gamma, alpha):
        y = (np.arange(p.size) % 2).astype(float)
        for pi, yi in zip(p, y):
            f, _ = focal_loss([pi], [yi], LossParams(gamma, alpha))
            b, _ = bce_loss([pi], [yi])
            w = alpha if yi == 1 else 1 - alpha
            assert 0 <= f <= w * b + 1e-15

    @pytest.mark.parametrize("gamma,alpha", [(0.0, 0.5), (2.0, 0.75), (0.5, 0.3), (3.0, 0.9)])
    def test_gradient_finite_difference(self, gamma, alpha):
        rng = np.random.default_rng(int(gamma * 10 + alpha * 100))
        p = rng.uniform(0.05, 0.95, size=9)
        y = rng.integers(0, 2, size=9).astype(float)
        params = LossParams(gamma, alpha)
        _, g = focal_loss(p, y, params)
        num = numerical_grad(lambda: focal_loss(p, y, params)[0], p, h=1e-6)
        assert relative_error(g, num) <= 1e-6


class TestMse:
    def test_value_and_gradient(self):
        loss, grad = mse_loss([1.0, 3.0], [0.0, 1.0])
        assert loss == pytest.approx(2.5)
        np.testing.assert_allclose(grad, [1.0, 2.0])

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(0)
        o, t = rng.normal(size=6), rng.normal(size=6)
        _, g = mse_loss(o, t)
        assert relative_error(g, numerical_grad(lambda: mse_loss(o, t)[0], o)) <= 1e-6


class TestThreshold:
    def test_boundary(self):
        assert threshold_decisions([0.5, 0.49]).tolist() == [1, 0]

    def test_threshold_one(self):
        assert threshold_decisions([0.2, 0.999, 1.0], 1.0).tolist() == [0, 0, 1]


class TestMetrics:
    def test_hand_example(self):
        cm = ConfusionMatrix(tp=5, fp=1, tn=9, fn=5)
        r = metric_report(cm)
        assert r.sensitivity == 0.5
        assert r.specificity == 0.9
        assert r.balanced_accuracy == pytest.approx(0.7)
        assert r.accuracy == pytest.approx(0.7)

    def test_perfect(self):
        y = [0, 1, 1, 0]
        assert balanced_accuracy(confusion(y, y)) == 1.0

    def test_constant_predictor(self):
        y = [0, 0, 0, 1]
        assert balanced_accuracy(confusion([1] * 4, y)) == 0.5
        assert balanced_accuracy(confusion([0] * 4, y)) == 0.5

    def test_missing_class(self):
        with pytest.raises(MissingClassError):
            balanced_accuracy(confusion([0, 1], [1, 1]))
        with pytest.raises(MissingClassError):
            metric_report(confusion([0, 1], [0, 0]))

    def test_csv_layout_rows_are_truth(self):
        cm = ConfusionMatrix(tp=4, fp=3, tn=2, fn=1)
        assert cm.to_csv() == "truth\\pred,0,1\n0,2,3\n1,1,4\n"
        assert ConfusionMatrix.from_csv(cm.to_csv()) == cm

    def test_report_json(self):
        text = metric_report(ConfusionMatrix(1, 0, 1, 0)).to_json()
        assert '"balanced_accuracy": 1.0' in text

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.integers(4, 50))
    def test_order_invariance_and_balanced_equals_accuracy(self, seed, n):
        rng = np.random.default_rng(seed)
        y = np.array([0, 1] * n)
        d = rng.integers(0, 2, size=y.size)
        perm = rng.permutation(y.size)
        cm, cm2 = confusion(d, y), confusion(d[perm], y[perm])
        assert cm == cm2
        r = metric_report(cm)
        assert r.balanced_accuracy == pytest.approx(r.accuracy)
        assert cm.total == y.size
