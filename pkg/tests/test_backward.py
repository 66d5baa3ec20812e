import numpy as np
import pytest

from fbsfde_lab.affine import AffineMap
from fbsfde_lab.backward import (
    GeneratorSpec,
    PathFn,
    TerminalExtension,
    backward_step,
    eval_anticipated_generator,
    solve_gabsde,
    zero_generator,
)
from fbsfde_lab.errors import MissingFuture, StabilityViolation
from fbsfde_lab.features import FeatureContext, FeatureSpec
from fbsfde_lab.kernel import build_time_grid, sample_brownian
from fbsfde_lab.oracles import (
    BinomialDriver,
    TreeGenerator,
    binomial_exact_backward,
    ode_anticipated_backward,
)
from fbsfde_lab.regression import TreeConditionalExpectation


def f1_generator(slope_y=0.4, slope_z=0.2, intercept=0.1, kind="f1"):
    g = AffineMap.build(np.array([[slope_y, slope_z]]), np.array([intercept]))
    return GeneratorSpec(kind=kind, m=1, d=1, g=g, lipschitz=g.slope_norm())


def terminal_bT(m=1, d=1, eta=0.0):
    return TerminalExtension(
        m=m, d=d, xi=PathFn(lambda br, x: br.values[:, br.grid.idxT, :]), eta=eta
    )


class TestBackwardStep:
    def test_martingale_step_on_tree(self):
        drv = BinomialDriver(depth=4, h=0.25)
        b = drv.to_brownian()
        g = b.grid
        i = 2
        fit = TreeConditionalExpectation(drv.n_paths).at_node(i, FeatureContext())
        y_next = b.values[:, i + 1]
        d_b = b.values[:, i + 1] - b.values[:, i]
        y_i, z_i, _, _, _ = backward_step(y_next, np.zeros((drv.n_paths, 1)), d_b, fit, g.h)
        assert np.allclose(y_i, b.values[:, i], atol=1e-13)
        assert np.allclose(z_i, 1.0, atol=1e-13)

    def test_constant_is_fixed_point(self):
        drv = BinomialDriver(depth=3, h=0.25)
        b = drv.to_brownian()
        fit = TreeConditionalExpectation(drv.n_paths).at_node(1, FeatureContext())
        y_next = np.full((drv.n_paths, 1), 2.5)
        d_b = b.values[:, 2] - b.values[:, 1]
        y_i, z_i, _, _, _ = backward_step(y_next, np.zeros_like(y_next), d_b, fit, 0.25)
        assert np.allclose(y_i, 2.5, atol=1e-14)
        assert np.allclose(z_i, 0.0, atol=1e-14)

    def test_pure_drift_step(self):
        drv = BinomialDriver(depth=3, h=0.25)
        b = drv.to_brownian()
        fit = TreeConditionalExpectation(drv.n_paths).at_node(0, FeatureContext())
        y_next = np.zeros((drv.n_paths, 1))
        d_b = b.values[:, 1] - b.values[:, 0]
        y_i, _, _, _, _ = backward_step(y_next, np.ones_like(y_next), d_b, fit, 0.25)
        assert np.allclose(y_i, 0.25, atol=1e-15)


class TestEvalGenerator:
    def _setup(self, T=1.0, K=0.5, h=0.25, n_paths=20):
        grid = build_time_grid(M=0, T=T, K=K, h=h)
        y = np.ones((n_paths, grid.n_nodes, 1))
        z = np.zeros((n_paths, grid.n_nodes, 1, 1))
        return grid, y, z

    class _IdentityFit:
        ill = False

        def fit(self, targets):
            return targets, None, 0.0

    def test_f1_deterministic_tail(self):
        # future y identically 1 over a remaining window of length 0.5
        grid, y, z = self._setup(T=1.0, K=0.5, h=0.25)
        i = grid.index_at(1.0)  # tail [1.0, 1.5) has two left nodes
        spec = f1_generator(slope_y=1.0, slope_z=0.0, intercept=0.0)
        f = eval_anticipated_generator(spec, i, y, z, grid, self._IdentityFit())
        assert np.allclose(f, 0.5, atol=1e-14)

    def test_f2_equals_f1_on_deterministic_data(self):
        grid, y, z = self._setup()
        i = 1
        s1 = f1_generator(0.7, 0.3, 0.2, kind="f1")
        s2 = f1_generator(0.7, 0.3, 0.2, kind="f2")
        fit = self._IdentityFit()
        f1_val = eval_anticipated_generator(s1, i, y, z, grid, fit)
        f2_val = eval_anticipated_generator(s2, i, y, z, grid, fit)
        assert np.allclose(f1_val, f2_val, atol=1e-14)

    def test_adjoint_reduces_to_x_term(self):
        grid, y, z = self._setup()
        n_paths = y.shape[0]
        x = np.tile(np.linspace(-1, 1, n_paths)[:, None, None], (1, grid.n_nodes, 1))
        r = AffineMap.build(np.array([[2.0]]))
        spec = GeneratorSpec(kind="affine_adjoint", m=1, d=1, x_map=r)
        f = eval_anticipated_generator(spec, 1, y, z, grid, self._IdentityFit(), x_values=x)
        assert np.allclose(f, 2.0 * x[:, 1], atol=1e-14)

    def test_missing_future(self):
        grid, y, z = self._setup()
        y[:, 3:] = np.nan
        spec = f1_generator()
        with pytest.raises(MissingFuture):
            eval_anticipated_generator(spec, 1, y, z, grid, self._IdentityFit())


class TestSolveGabsde:
    def test_zero_data_zero_solution(self):
        grid = build_time_grid(M=0, T=1, K=0.5, h=0.25)
        b = sample_brownian(grid, n_paths=64, d=1, seed=1)
        sol = solve_gabsde(zero_generator(1, 1), TerminalExtension(1, 1), grid, b)
        assert np.all(sol.y.values == 0.0)
        assert np.all(sol.z.values == 0.0)

    def test_terminal_pinning_bit_exact(self):
        grid = build_time_grid(M=0, T=1, K=0.5, h=0.25)
        b = sample_brownian(grid, n_paths=64, d=1, seed=2)
        term = TerminalExtension(
            1, 1, xi=PathFn(lambda br, x: br.values[:, br.grid.idxT, :]), eta=0.3
        )
        sol = solve_gabsde(zero_generator(1, 1), term, grid, b,
                           feature_spec=FeatureSpec(3, ("brownian",)))
        b_T = b.values[:, grid.idxT, :]
        for k in range(grid.idxT, grid.n_nodes):
            assert np.array_equal(sol.y.values[:, k], b_T)
            assert np.all(sol.z.values[:, k] == 0.3)

    def test_stability_guard(self):
        grid = build_time_grid(M=0, T=1, K=0, h=0.5)
        b = sample_brownian(grid, n_paths=64, d=1, seed=3)
        gen = f1_generator(slope_y=2.5, slope_z=0.0, intercept=0.0)
        with pytest.raises(StabilityViolation):
            solve_gabsde(gen, TerminalExtension(1, 1), grid, b)

    def test_martingale_representation_small(self):
        grid = build_time_grid(M=0, T=1, K=0.25, h=1 / 16)
        b = sample_brownian(grid, n_paths=8000, d=1, seed=4)
        sol = solve_gabsde(
            zero_generator(1, 1), terminal_bT(), grid, b,
            feature_spec=FeatureSpec(3, ("brownian",)),
        )
        rmse = np.sqrt(
            np.mean((sol.y.values[:, : grid.idxT, 0] - b.values[:, : grid.idxT, 0]) ** 2, axis=0)
        )
        assert rmse.max() <= 0.05, rmse.max()
        z_err = np.mean(np.abs(sol.z.values[:, : grid.idxT, 0, 0] - 1.0))
        assert z_err <= 0.12, z_err

    def test_anticipated_tail_matches_reference(self):
        grid = build_time_grid(M=0, T=1, K=0.5, h=1 / 64)
        b = sample_brownian(grid, n_paths=256, d=1, seed=5)
        gen = f1_generator(slope_y=1.0, slope_z=0.0, intercept=0.0)
        sol = solve_gabsde(gen, TerminalExtension(1, 1, xi=1.0), grid, b,
                           feature_spec=FeatureSpec(1, ("brownian",)))
        ref = ode_anticipated_backward(T=1.0, K=0.5, fine_step=1e-4)
        y0 = sol.y.values[0, grid.idx0, 0]
        assert np.allclose(sol.y.values[:, grid.idx0, 0], y0, atol=1e-12)
        assert abs(y0 - float(ref.value_at(0.0)[0])) <= 0.02

    def test_linearity_in_terminal_data(self):
        grid = build_time_grid(M=0, T=1, K=0.25, h=1 / 8)
        b = sample_brownian(grid, n_paths=4000, d=1, seed=6)
        gen = f1_generator(0.4, 0.2, 0.0)
        spec = FeatureSpec(2, ("brownian",))
        one = solve_gabsde(gen, terminal_bT(eta=0.1), grid, b, feature_spec=spec)
        two = solve_gabsde(
            gen,
            TerminalExtension(1, 1,
                              xi=PathFn(lambda br, x: 2.0 * br.values[:, br.grid.idxT, :]),
                              eta=0.2),
            grid, b, feature_spec=spec,
        )
        assert np.allclose(2.0 * one.y.values, two.y.values, atol=1e-8)
        assert np.allclose(2.0 * one.z.values, two.z.values, atol=1e-8)

    @pytest.mark.parametrize("use_f1", [False, True])
    def test_tree_exactness(self, use_f1):
        depth, h, K = 8, 0.125, 0.25
        drv = BinomialDriver(depth=depth, h=h)
        b = drv.to_brownian(K=K)
        grid = b.grid
        if use_f1:
            gen = f1_generator(0.4, 0.2, 0.1)
            tree_gen = TreeGenerator(slope_y=0.4, slope_z=0.2, intercept=0.1)
        else:
            gen = zero_generator(1, 1)
            tree_gen = None
        eta = 0.2
        sol = solve_gabsde(
            gen, terminal_bT(eta=eta), grid, b,
            engine=TreeConditionalExpectation(drv.n_paths),
        )
        y_levels, z_levels = binomial_exact_backward(
            drv, tree_gen, terminal_y=lambda bT: bT, terminal_z=eta, K=K
        )
        for i in range(depth + 1):
            expect = np.repeat(y_levels[i], 2 ** (depth - i))
            assert np.allclose(sol.y.values[:, i, 0], expect, atol=1e-10), i
        for i in range(depth):
            expect = np.repeat(z_levels[i], 2 ** (depth - i))
            assert np.allclose(sol.z.values[:, i, 0, 0], expect, atol=1e-10), i

    def test_adaptedness_under_suffix_permutation(self):
        # permuting whole-path suffixes inside one tree block leaves every
        # fitted value at or before the block's node unchanged
        depth, h = 6, 0.125
        drv = BinomialDriver(depth=depth, h=h)
        b = drv.to_brownian()
        grid = b.grid
        cut = 2  # node level whose blocks we shuffle within
        block = drv.n_paths >> cut
        rng = np.random.default_rng(7)
        perm = np.concatenate(
            [k * block + rng.permutation(block) for k in range(1 << cut)]
        )
        vals = b.values.copy()
        vals[:, cut:] = vals[perm, cut:]
        b2 = type(b)(grid=grid, n_paths=b.n_paths, dim=1, seed=0, values=vals)
        gen = f1_generator(0.4, 0.0, 0.0)
        sol1 = solve_gabsde(gen, terminal_bT(), grid, b,
                            engine=TreeConditionalExpectation(drv.n_paths))
        sol2 = solve_gabsde(gen, terminal_bT(), grid, b2,
                            engine=TreeConditionalExpectation(drv.n_paths))
        assert np.allclose(sol1.y.values[:, : cut + 1], sol2.y.values[:, : cut + 1], atol=1e-12)

    def test_instantaneous_linear_generator(self):
        # f = a*y gives Y_t = exp(a (T-t)) B_t for the B_T terminal value
        a, h = 0.5, 1 / 32
        grid = build_time_grid(M=0, T=1, K=0, h=h)
        b = sample_brownian(grid, n_paths=20000, d=1, seed=8)
        g = AffineMap.build(np.array([[a, 0.0]]))
        gen = GeneratorSpec(kind="instantaneous", m=1, d=1, g=g, lipschitz=a)
        sol = solve_gabsde(gen, terminal_bT(), grid, b,
                           feature_spec=FeatureSpec(3, ("brownian",)))
        mid = grid.index_at(0.5)
        target = np.exp(a * 0.5) * b.values[:, mid, 0]
        rmse = np.sqrt(np.mean((sol.y.values[:, mid, 0] - target) ** 2))
        assert rmse <= 0.05, rmse
