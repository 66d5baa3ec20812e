import numpy as np
import pytest

from fbsfde_lab.errors import NegativeLipschitz, NonDivisibleHorizon, RangeMismatch
from fbsfde_lab.kernel import (
    ProcessEnsemble,
    WeightedNormSpec,
    build_time_grid,
    sample_brownian,
    theta_star,
    weighted_l2_norm,
)
from fbsfde_lab.runtime import set_max_threads


def constant_ensemble(grid, value=1.0, n_paths=3, dim=1):
    vals = np.full((n_paths, grid.n_nodes, dim), value, dtype=float)
    return ProcessEnsemble(grid, vals)


class TestTimeGrid:
    def test_degenerate_horizons(self):
        g = build_time_grid(M=0, T=1, K=0, h=0.5)
        assert np.allclose(g.nodes, [0.0, 0.5, 1.0])
        assert g.idx0 == 0 and g.idxT == 2

    def test_three_segments(self):
        g = build_time_grid(M=1, T=1, K=1, h=0.5)
        assert g.n_nodes == 7
        assert g.idx0 == 2 and g.idxT == 4
        assert g.time_at(g.idx0) == 0.0
        assert g.time_at(g.idxT) == 1.0
        assert g.nodes[0] == -1.0 and g.nodes[-1] == 2.0

    def test_non_divisible(self):
        with pytest.raises(NonDivisibleHorizon):
            build_time_grid(M=0, T=1, K=0.3, h=0.2)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            build_time_grid(M=0, T=0, K=0, h=0.1)
        with pytest.raises(ValueError):
            build_time_grid(M=-0.5, T=1, K=0, h=0.1)
        with pytest.raises(ValueError):
            build_time_grid(M=0, T=1, K=0, h=0)

    def test_node_count_formula(self):
        for (M, T, K, h) in [(1, 2, 0.5, 0.25), (0, 1, 0, 1 / 64), (0.5, 1, 0.5, 0.125)]:
            g = build_time_grid(M, T, K, h)
            assert g.n_nodes == round((M + T + K) / h) + 1

    def test_integer_step_spacing_is_exact(self):
        # the stored representation is integer steps: spacing exactly one step
        g = build_time_grid(M=0.3, T=0.7, K=0.2, h=0.1)
        assert np.all(np.diff(g.steps) == 1)
        assert g.time_at(g.idx0) == 0.0

    def test_index_at(self):
        g = build_time_grid(M=1, T=1, K=0.5, h=0.25)
        assert g.index_at(0.0) == g.idx0
        assert g.index_at(1.0) == g.idxT
        assert g.index_at(-1.0) == 0
        with pytest.raises(RangeMismatch):
            g.index_at(0.3)
        with pytest.raises(RangeMismatch):
            g.index_at(2.0)


class TestBrownian:
    def test_zero_on_memory_segment_and_origin(self):
        g = build_time_grid(M=0.5, T=1, K=0.5, h=0.25)
        b = sample_brownian(g, n_paths=16, d=2, seed=7)
        assert np.all(b.values[:, : g.idx0 + 1, :] == 0.0)

    def test_deterministic_regeneration(self):
        g = build_time_grid(M=0, T=1, K=0, h=0.125)
        b1 = sample_brownian(g, n_paths=64, d=2, seed=42)
        b2 = sample_brownian(g, n_paths=64, d=2, seed=42)
        assert np.array_equal(b1.values, b2.values)

    def test_path_depends_only_on_seed_and_index(self):
        g = build_time_grid(M=0, T=1, K=0, h=0.125)
        small = sample_brownian(g, n_paths=8, d=1, seed=3)
        large = sample_brownian(g, n_paths=32, d=1, seed=3)
        assert np.array_equal(small.values, large.values[:8])

    def test_independent_of_worker_partition(self):
        g = build_time_grid(M=0, T=1, K=0, h=0.25)
        try:
            set_max_threads(1)
            one = sample_brownian(g, n_paths=20000, d=1, seed=11)
            set_max_threads(4)
            four = sample_brownian(g, n_paths=20000, d=1, seed=11)
        finally:
            set_max_threads(None)
        assert np.array_equal(one.values, four.values)

    def test_increment_moments(self):
        # sample variance of N(0, h) over n paths concentrates at 5 sigma of
        # the estimator: h * (1 +- 5*sqrt(2/n)); mean within 5*sqrt(h/n)
        g = build_time_grid(M=0, T=1, K=0, h=0.1)
        n = 100_000
        b = sample_brownian(g, n_paths=n, d=1, seed=123)
        inc = b.increments()[:, g.idx0 :, 0]
        var = inc.var(axis=0)
        mean = inc.mean(axis=0)
        h = g.h
        assert np.all(np.abs(var - h) <= 5.0 * h * np.sqrt(2.0 / n))
        assert np.all(np.abs(mean) <= 5.0 * np.sqrt(h / n))


class TestWeightedNorm:
    def test_unit_constant(self):
        g = build_time_grid(M=0, T=1, K=0, h=0.01)
        e = constant_ensemble(g)
        spec = WeightedNormSpec(theta=0.0, t_lo=0.0, t_hi=1.0)
        assert weighted_l2_norm(e, spec) == pytest.approx(1.0, abs=1e-12)

    def test_exponential_decay_closed_form(self):
        # int_0^1 e^(-s) ds = 1 - 1/e, left sums converge at O(h)
        g = build_time_grid(M=0, T=1, K=0, h=1 / 512)
        e = constant_ensemble(g)
        spec = WeightedNormSpec(theta=1.0, sign="decay", t_lo=0.0, t_hi=1.0)
        exact = np.sqrt(1.0 - np.exp(-1.0))
        assert weighted_l2_norm(e, spec) == pytest.approx(exact, abs=2e-3)

    def test_zero_ensemble(self):
        g = build_time_grid(M=0.5, T=1, K=0, h=0.25)
        e = constant_ensemble(g, value=0.0)
        assert weighted_l2_norm(e, WeightedNormSpec(theta=2.0)) == 0.0

    def test_empty_range(self):
        g = build_time_grid(M=0, T=1, K=0, h=0.25)
        e = constant_ensemble(g)
        assert weighted_l2_norm(e, WeightedNormSpec(theta=0.0, t_lo=0.5, t_hi=0.5)) == 0.0

    def test_range_outside_grid(self):
        g = build_time_grid(M=0, T=1, K=0, h=0.25)
        e = constant_ensemble(g)
        with pytest.raises(RangeMismatch):
            weighted_l2_norm(e, WeightedNormSpec(theta=0.0, t_lo=0.0, t_hi=2.0))

    def test_decay_norm_non_increasing_in_theta(self):
        # on nonnegative ranges the decay weight is <= 1 and shrinks with theta
        rng = np.random.default_rng(0)
        g = build_time_grid(M=0, T=1, K=0.5, h=0.125)
        e = ProcessEnsemble(g, rng.normal(size=(50, g.n_nodes, 2)))
        thetas = [0.0, 0.5, 1.0, 2.0, 5.0]
        norms = [
            weighted_l2_norm(e, WeightedNormSpec(theta=t, sign="decay", t_lo=0.0, t_hi=1.5))
            for t in thetas
        ]
        assert all(a >= b for a, b in zip(norms, norms[1:]))


class TestThetaStar:
    def test_values(self):
        assert theta_star(0.0) == 0.0
        assert theta_star(1.0) == pytest.approx(2.0 + 2.0 * np.sqrt(3.0), rel=1e-15)
        assert theta_star(2.0) == pytest.approx(8.0 + 4.0 * np.sqrt(6.0), rel=1e-15)

    def test_negative(self):
        with pytest.raises(NegativeLipschitz):
            theta_star(-0.1)
