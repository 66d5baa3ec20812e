import numpy as np
import pytest

from fbsfde_lab.errors import IllConditionedWarning, TooFewPaths
from fbsfde_lab.features import FeatureContext, FeatureMap, FeatureSpec
from fbsfde_lab.regression import (
    LeastSquaresConditionalExpectation,
    RegressionPolicy,
    TreeConditionalExpectation,
    regress_condexp,
)


class TestRegressCondexp:
    def test_target_in_span_zero_residual(self):
        rng = np.random.default_rng(1)
        phi = np.column_stack([np.ones(200), rng.normal(size=200)])
        target = 3.0 * phi[:, 1]
        res = regress_condexp(target, phi, ridge=0.0)
        assert np.allclose(res.fitted, target, atol=1e-10)
        assert res.residual_mse < 1e-20
        assert res.coefficients[1] == pytest.approx(3.0, abs=1e-12)

    def test_noise_projects_to_sample_mean(self):
        rng = np.random.default_rng(2)
        target = rng.normal(size=500)
        phi = np.ones((500, 1))
        res = regress_condexp(target, phi)
        assert np.allclose(res.fitted, target.mean(), atol=1e-12)

    def test_duplicated_column_resolved_like_pinv(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=100)
        target = 1.5 * x + rng.normal(size=100) * 0.1
        clean = np.column_stack([np.ones(100), x])
        dup = np.column_stack([np.ones(100), x, x])
        res_clean = regress_condexp(target, clean)
        with pytest.warns(IllConditionedWarning):
            res_dup = regress_condexp(target, dup)
        assert res_dup.ill_conditioned
        assert np.allclose(res_dup.fitted, res_clean.fitted, atol=1e-8)

    def test_too_few_paths(self):
        with pytest.raises(TooFewPaths):
            regress_condexp(np.ones(25), np.ones((25, 3)))

    def test_multi_target(self):
        rng = np.random.default_rng(4)
        phi = np.column_stack([np.ones(300), rng.normal(size=300)])
        targets = np.column_stack([2.0 * phi[:, 1], -1.0 + phi[:, 1]])
        res = regress_condexp(targets, phi)
        assert res.fitted.shape == (300, 2)
        assert np.allclose(res.fitted, targets, atol=1e-10)


class TestEngines:
    def test_node_fit_reuses_factorization(self):
        rng = np.random.default_rng(5)
        spec = FeatureSpec(degree=2, sources=("brownian",))
        eng = LeastSquaresConditionalExpectation(spec, {"brownian": 1})
        b = rng.normal(size=(400, 3, 1))
        ctx = FeatureContext(brownian_values=b)
        fit = eng.at_node(1, ctx)
        t1 = b[:, 1, 0] ** 2
        v1, c1, _ = fit.fit(t1[:, None])
        ref = regress_condexp(t1, FeatureMap(spec, {"brownian": 1}).build(1, ctx))
        assert np.allclose(v1[:, 0], ref.fitted, atol=1e-10)

    def test_tree_engine_block_means(self):
        eng = TreeConditionalExpectation(8)
        fit = eng.at_node(1, FeatureContext())  # level 1: two blocks of four
        targets = np.arange(8.0)[:, None]
        vals, means, _ = fit.fit(targets)
        assert np.allclose(means[:, 0], [1.5, 5.5])
        assert np.allclose(vals[:4, 0], 1.5) and np.allclose(vals[4:, 0], 5.5)

    def test_tree_engine_level_zero_is_plain_mean(self):
        eng = TreeConditionalExpectation(16)
        fit = eng.at_node(0, FeatureContext())
        t = np.linspace(0, 1, 16)[:, None]
        vals, _, _ = fit.fit(t)
        assert np.allclose(vals, t.mean())


class TestPolicy:
    def test_unset_nodes_evaluate_to_zero(self):
        pol = RegressionPolicy(FeatureSpec(1, ("brownian",)), {"brownian": 1}, m=1, d=1)
        ctx = FeatureContext(brownian_values=np.ones((5, 4, 1)))
        y, z = pol.values_at(2, ctx)
        assert y.shape == (5, 1) and z.shape == (5, 1, 1)
        assert np.all(y == 0.0) and np.all(z == 0.0)

    def test_round_trip_through_store(self):
        rng = np.random.default_rng(6)
        spec = FeatureSpec(1, ("brownian",))
        pol = RegressionPolicy(spec, {"brownian": 2}, m=1, d=2)
        coef_y = rng.normal(size=(3, 1))
        coef_z = rng.normal(size=(3, 2))
        pol.store(1, coef_y, coef_z)
        b = rng.normal(size=(10, 3, 2))
        ctx = FeatureContext(brownian_values=b)
        y, z = pol.values_at(1, ctx)
        phi = FeatureMap(spec, {"brownian": 2}).build(1, ctx)
        assert np.allclose(y, phi @ coef_y)
        assert np.allclose(z.reshape(10, 2), phi @ coef_z)
