import math

import numpy as np
import pytest

from fbsfde_lab.errors import DepthExceeded, UnsupportedKernel
from fbsfde_lab.oracles import (
    BinomialDriver,
    TreeGenerator,
    binomial_exact_backward,
    integro_ode_rk4,
    ode_anticipated_backward,
)

COSH_1 = 1.5430806348152437  # cosh(1)
E_1 = 2.718281828459045  # e
COS_1 = 0.5403023058681398  # cos(1)
EXP_M1 = 0.36787944117144233  # 1/e
TAIL_ODE_Y0 = 2.1306812316371444  # cosh(1) + 0.5*sinh(1), T=1, K=0.5


class TestIntegroOde:
    def test_cosh_growth(self):
        # x'(t) = int_0^t x dr, x(0)=1  =>  x'' = x  =>  x = cosh(t)
        path = integro_ode_rk4("integral_of_state", 1.0, 0.0, 1.0, M=0.0, T=1.0, fine_step=1e-3)
        assert float(path.value_at(1.0)[0]) == pytest.approx(COSH_1, abs=1e-8)

    def test_memory_segment_shifts_initial_slope(self):
        # with rho = 1 on [-1, 0] the memory integral starts at 1, so x = e^t
        path = integro_ode_rk4("integral_of_state", 1.0, 0.0, 1.0, M=1.0, T=1.0, fine_step=1e-3)
        assert float(path.value_at(1.0)[0]) == pytest.approx(E_1, abs=1e-8)

    def test_zero_kernel_constant_path(self):
        path = integro_ode_rk4("instantaneous", 0.0, 0.0, 3.5, M=0.0, T=1.0, fine_step=1e-3)
        assert np.allclose(path.values, 3.5)

    def test_exponential_decay(self):
        path = integro_ode_rk4("instantaneous", -1.0, 0.0, 1.0, M=0.0, T=1.0, fine_step=1e-3)
        assert float(path.value_at(1.0)[0]) == pytest.approx(EXP_M1, abs=1e-8)

    def test_integral_of_p_oscillator(self):
        # x'(t) = int_0^t (-x) dr  =>  x'' = -x  =>  x = cos(t)
        path = integro_ode_rk4("integral_of_p", -1.0, 0.0, 1.0, M=0.0, T=1.0, fine_step=1e-3)
        assert float(path.value_at(1.0)[0]) == pytest.approx(COS_1, abs=1e-8)

    def test_windowed_unsupported(self):
        with pytest.raises(UnsupportedKernel):
            integro_ode_rk4("windowed_integral", 1.0, 0.0, 1.0, M=0.5, T=1.0, fine_step=1e-3)

    def test_self_convergence(self):
        coarse = integro_ode_rk4("integral_of_state", 1.0, 0.0, 1.0, M=0.0, T=1.0, fine_step=1e-3)
        fine = integro_ode_rk4("integral_of_state", 1.0, 0.0, 1.0, M=0.0, T=1.0, fine_step=5e-4)
        delta = abs(float(coarse.value_at(1.0)[0]) - float(fine.value_at(1.0)[0]))
        assert delta <= 1e-8


class TestAnticipatedTailOde:
    def test_closed_form(self):
        # y'' = y with y(T)=1, y'(T)=-K  =>  y(t) = cosh(T-t) + K sinh(T-t)
        path = ode_anticipated_backward(T=1.0, K=0.5, fine_step=1e-3)
        assert float(path.value_at(0.0)[0]) == pytest.approx(TAIL_ODE_Y0, abs=1e-8)
        assert float(path.value_at(1.0)[0]) == pytest.approx(1.0, abs=1e-12)

    def test_slope_at_terminal(self):
        path = ode_anticipated_backward(T=1.0, K=0.5, fine_step=1e-4)
        delta = 1e-2
        slope = (float(path.value_at(1.0 - delta)[0]) - 1.0) / delta
        assert slope == pytest.approx(0.5, abs=1e-2)

    def test_stays_above_one(self):
        path = ode_anticipated_backward(T=1.0, K=0.5, fine_step=1e-3)
        assert np.all(path.values >= 1.0 - 1e-12)

    def test_self_convergence(self):
        a = ode_anticipated_backward(T=1.0, K=0.5, fine_step=1e-3)
        b = ode_anticipated_backward(T=1.0, K=0.5, fine_step=5e-4)
        assert abs(float(a.value_at(0.0)[0]) - float(b.value_at(0.0)[0])) <= 1e-9


class TestBinomialTree:
    def test_depth_guard(self):
        with pytest.raises(DepthExceeded):
            BinomialDriver(depth=21, h=0.01)

    def test_probabilities_sum_to_one_exactly(self):
        drv = BinomialDriver(depth=10, h=0.01)
        assert drv.probabilities().sum() == 1.0

    def test_path_table_layout(self):
        drv = BinomialDriver(depth=2, h=0.25)
        signs = drv.increment_signs()
        assert signs.tolist() == [[-1, -1], [-1, 1], [1, -1], [1, 1]]

    def test_to_brownian_extension_held_constant(self):
        drv = BinomialDriver(depth=2, h=0.25)
        b = drv.to_brownian(K=0.5)
        assert b.values.shape == (4, 5, 1)
        assert np.all(b.values[:, 0, 0] == 0.0)
        assert np.array_equal(b.values[:, 3, 0], b.values[:, 2, 0])
        assert np.array_equal(b.values[:, 4, 0], b.values[:, 2, 0])

    def test_martingale_by_hand(self):
        # f = 0, xi = B_T: Y is the walk itself, Z is identically one
        drv = BinomialDriver(depth=2, h=0.25)
        y_levels, z_levels = binomial_exact_backward(drv, None, terminal_y=lambda bT: bT)
        assert y_levels[0][0] == pytest.approx(0.0, abs=1e-15)
        sqrt_h = math.sqrt(0.25)
        assert np.allclose(y_levels[1], [-sqrt_h, sqrt_h])
        for z in z_levels:
            assert np.allclose(z, 1.0, atol=1e-14)

    def test_constant_drift(self):
        # f = c, xi = 0: root value accumulates c*T
        drv = BinomialDriver(depth=8, h=1 / 8)
        gen = TreeGenerator(slope_y=0.0, slope_z=0.0, intercept=0.7)
        y_levels, _ = binomial_exact_backward(drv, gen, terminal_y=0.0)
        assert y_levels[0][0] == pytest.approx(0.7 * drv.T, rel=1e-14)

    def test_deterministic_tail_recursion_matches_scalar_loop(self):
        # deterministic terminal value: averaging is the identity and the tree
        # must reproduce the plain scalar recursion step for step
        depth, h, K = 8, 1 / 8, 0.25
        n_ext = round(K / h)
        drv = BinomialDriver(depth=depth, h=h)
        gen = TreeGenerator(slope_y=1.0)
        y_levels, _ = binomial_exact_backward(drv, gen, terminal_y=1.0, K=K)
        y_next = 1.0
        tail = h * 1.0 * n_ext
        for _ in range(depth):
            f = tail + h * y_next
            y_here = y_next + h * f
            tail = tail + h * y_here
            y_next = y_here
        assert np.allclose(y_levels[0][0], y_here, rtol=1e-12)
        # every node at a level carries the same deterministic value
        for lv in y_levels:
            assert np.allclose(lv, lv.flat[0])
