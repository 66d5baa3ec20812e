"""Named problem presets shared by the CLI, the tests and the studies.

Every preset is assembled from the affine functional algebra, carries honest
Lipschitz/dissipativity constants, and where possible has an independent
reference solution (closed form, deterministic integrator, Riccati).
"""

from __future__ import annotations

import numpy as np

from .affine import AffineMap
from .backward import GeneratorSpec, PathFn, TerminalExtension, zero_generator
from .control import LqProblem
from .coupled import FbsfdeSystem, MonotoneStructure
from .features import FeatureSpec
from .functionals import InitialSegment, SfdeCoefficients, affine_functional
from .kernel import TimeGrid


# ---------------------------------------------------------------------------
# forward presets: (coefficients, initial segment, reference descriptor)
# ---------------------------------------------------------------------------


def _zero_sigma():
    return affine_functional("instantaneous", 0.0)


def sfde_cosh(grid: TimeGrid, slope: float = 1.0, rho0: float = 1.0):
    """x' = slope * int_{-M}^t x dr with no noise; for M=0, slope=1, rho0=1
    the exact solution is cosh(t)."""
    coeffs = SfdeCoefficients(
        drift=affine_functional("integral_of_state", slope),
        diffusion=(_zero_sigma(),),
    )
    rho = InitialSegment.constant(grid, [rho0])
    oracle = {"kind": "integral_of_state", "slope": slope, "intercept": 0.0, "rho": rho0}
    return coeffs, rho, oracle


def sfde_exp_decay(grid: TimeGrid, rate: float = 1.0, rho0: float = 1.0):
    """x' = -rate * x; exact solution rho0 * exp(-rate t)."""
    coeffs = SfdeCoefficients(
        drift=affine_functional("instantaneous", -rate),
        diffusion=(_zero_sigma(),),
    )
    rho = InitialSegment.constant(grid, [rho0])
    oracle = {"kind": "instantaneous", "slope": -rate, "intercept": 0.0, "rho": rho0}
    return coeffs, rho, oracle


def sfde_accumulated(grid: TimeGrid, slope: float = -1.0, rho0: float = 1.0):
    """x'(t) = int_{-M}^t (slope * x_r) dr; for M=0, slope=-1 this is cos(t)."""
    coeffs = SfdeCoefficients(
        drift=affine_functional("integral_of_p", slope),
        diffusion=(_zero_sigma(),),
    )
    rho = InitialSegment.constant(grid, [rho0])
    oracle = {"kind": "integral_of_p", "slope": slope, "intercept": 0.0, "rho": rho0}
    return coeffs, rho, oracle


def sfde_windowed(grid: TimeGrid, slope: float = 1.0, rho0: float = 1.0):
    """x' = slope * int_{t-M}^t x dr (trailing window); no reference integrator."""
    coeffs = SfdeCoefficients(
        drift=affine_functional("windowed_integral", slope),
        diffusion=(_zero_sigma(),),
    )
    return coeffs, InitialSegment.constant(grid, [rho0]), None


def sfde_brownian(grid: TimeGrid, sigma: float = 1.0, rho0: float = 0.0):
    """Pure noise: X_t = rho0 + sigma B_t."""
    coeffs = SfdeCoefficients(
        drift=affine_functional("instantaneous", 0.0),
        diffusion=(affine_functional("instantaneous", 0.0, sigma),),
    )
    return coeffs, InitialSegment.constant(grid, [rho0]), None


def sfde_noisy_memory(grid: TimeGrid, slope: float = 1.0, sigma_slope: float = 0.5,
                      rho0: float = 1.0):
    """Memory drift plus proportional noise; used by the contraction study."""
    coeffs = SfdeCoefficients(
        drift=affine_functional("integral_of_state", slope),
        diffusion=(affine_functional("instantaneous", sigma_slope,
                                     lipschitz=max(slope, sigma_slope)),),
    )
    return coeffs, InitialSegment.constant(grid, [rho0]), None


SFDE_PRESETS = {
    "cosh": sfde_cosh,
    "exp_decay": sfde_exp_decay,
    "accumulated": sfde_accumulated,
    "windowed": sfde_windowed,
    "brownian": sfde_brownian,
    "noisy_memory": sfde_noisy_memory,
}

# presets asserting the contraction certificate, with their constants
CONTRACTION_PRESETS = [
    ("cosh", {"slope": 0.5}, 0.5),
    ("cosh", {"slope": 1.0}, 1.0),
    ("cosh", {"slope": 2.0}, 2.0),
    ("exp_decay", {"rate": 1.0}, 1.0),
    ("accumulated", {"slope": -1.0}, 1.0),
    ("noisy_memory", {"slope": 1.0, "sigma_slope": 0.5}, 1.0),
]


# ---------------------------------------------------------------------------
# backward presets: (generator, terminal extension, feature spec)
# ---------------------------------------------------------------------------


def _terminal_brownian_at_T():
    return PathFn(lambda br, x: br.values[:, br.grid.idxT, :])


def gabsde_martingale(grid: TimeGrid):
    """f = 0 with Y pinned to B_T across the extension; the solution is the
    martingale Y_t = B_t with unit Z."""
    gen = zero_generator(1, 1)
    term = TerminalExtension(1, 1, xi=_terminal_brownian_at_T(), eta=0.0)
    return gen, term, FeatureSpec(degree=3, sources=("brownian",))


def gabsde_anticipated_tail(grid: TimeGrid, slope: float = 1.0):
    """f = slope * E[int_t^{T+K} Y dr | F_t] with Y pinned to 1 beyond T;
    deterministic, matching the tail-integral backward reference."""
    g = AffineMap.build(np.array([[slope, 0.0]]))
    gen = GeneratorSpec(kind="f1", m=1, d=1, g=g, lipschitz=abs(slope))
    term = TerminalExtension(1, 1, xi=1.0, eta=0.0)
    return gen, term, FeatureSpec(degree=1, sources=("brownian",))


def gabsde_f1_affine(grid: TimeGrid, slope_y: float = 0.4, slope_z: float = 0.2,
                     intercept: float = 0.1, eta: float = 0.2):
    """Affine tail generator with a Brownian terminal value; exercised both
    by the regression engine and the exact tree induction."""
    g = AffineMap.build(np.array([[slope_y, slope_z]]), np.array([intercept]))
    gen = GeneratorSpec(kind="f1", m=1, d=1, g=g, lipschitz=g.slope_norm())
    term = TerminalExtension(1, 1, xi=_terminal_brownian_at_T(), eta=eta)
    return gen, term, FeatureSpec(degree=3, sources=("brownian",))


def gabsde_zero(grid: TimeGrid):
    gen = zero_generator(1, 1)
    return gen, TerminalExtension(1, 1), FeatureSpec(degree=1, sources=("brownian",))


GABSDE_PRESETS = {
    "martingale": gabsde_martingale,
    "anticipated_tail": gabsde_anticipated_tail,
    "f1_affine": gabsde_f1_affine,
    "zero": gabsde_zero,
}


# ---------------------------------------------------------------------------
# coupled presets
# ---------------------------------------------------------------------------


def canonical_monotone(grid: TimeGrid, coupling: float = 1.0, rho0: float = 1.0,
                       sigma_coupling: float | None = None) -> FbsfdeSystem:
    """The scalar dissipative benchmark: drift -c Y, diffusion -c Z, generator
    c X, identity terminal map. Its stacked field is -(coupling) * (x, y, z),
    so the dissipativity constants are lambda1 = lambda2 = coupling, mu = 1,
    with exact pointwise equality at the margin."""
    c = coupling
    sz = c if sigma_coupling is None else sigma_coupling
    forward = SfdeCoefficients(
        drift=affine_functional("instantaneous", 0.0),
        diffusion=(_zero_sigma(),),
        drift_y=AffineMap.build(np.array([[-c]])),
        diffusion_z=(AffineMap.build(np.array([[-sz]])),),
    )
    gen = zero_generator(1, 1, x_map=AffineMap.build(np.array([[c]])))
    return FbsfdeSystem(
        forward=forward,
        backward=gen,
        terminal_map=AffineMap.build(np.array([[1.0]])),
        terminal_lipschitz=1.0,
        structure=MonotoneStructure(G=np.array([[1.0]]), lambda1=c, lambda2=min(c, sz), mu=1.0),
        rho=InitialSegment.constant(grid, [rho0]),
        extension=TerminalExtension(1, 1),
    )


def canonical_flipped(grid: TimeGrid, coupling: float = 1.0, rho0: float = 1.0) -> FbsfdeSystem:
    """Sign-flipped generator (f = -c X): the dissipativity inequality fails
    in the x direction; used to exercise the checker's violation path."""
    base = canonical_monotone(grid, coupling=coupling, rho0=rho0)
    gen = zero_generator(1, 1, x_map=AffineMap.build(np.array([[-coupling]])))
    return FbsfdeSystem(
        forward=base.forward,
        backward=gen,
        terminal_map=base.terminal_map,
        terminal_lipschitz=base.terminal_lipschitz,
        structure=base.structure,
        rho=base.rho,
        extension=base.extension,
    )


def monotone_stress(grid: TimeGrid, coupling: float = 1.0, weak: float = 0.3,
                    rho0: float = 0.5) -> FbsfdeSystem:
    """Strong drift/generator coupling over a weak dissipative bridge: the
    plain alternating solve diverges from a cold start, while the blended
    family remains tractable with small steps."""
    forward = SfdeCoefficients(
        drift=affine_functional("instantaneous", 0.0),
        diffusion=(_zero_sigma(),),
        drift_y=AffineMap.build(np.array([[-coupling]])),
        diffusion_z=(AffineMap.build(np.array([[-weak]])),),
    )
    gen = zero_generator(1, 1, x_map=AffineMap.build(np.array([[coupling]])))
    return FbsfdeSystem(
        forward=forward,
        backward=gen,
        terminal_map=AffineMap.build(np.array([[1.0]])),
        terminal_lipschitz=1.0,
        structure=MonotoneStructure(
            G=np.array([[1.0]]), lambda1=weak, lambda2=weak, mu=1.0
        ),
        rho=InitialSegment.constant(grid, [rho0]),
        extension=TerminalExtension(1, 1),
    )


def decoupled_brownian(grid: TimeGrid) -> FbsfdeSystem:
    """No feedback in either direction: X = B, the backward pair is the
    martingale representation of X_T. Declares no dissipativity constants."""
    forward = SfdeCoefficients(
        drift=affine_functional("instantaneous", 0.0),
        diffusion=(affine_functional("instantaneous", 0.0, 1.0),),
    )
    return FbsfdeSystem(
        forward=forward,
        backward=zero_generator(1, 1),
        terminal_map=AffineMap.build(np.array([[1.0]])),
        terminal_lipschitz=1.0,
        structure=None,
        rho=InitialSegment.constant(grid, [0.0]),
        extension=TerminalExtension(1, 1),
    )


FBSFDE_PRESETS = {
    "canonical_monotone": canonical_monotone,
    "canonical_flipped": canonical_flipped,
    "monotone_stress": monotone_stress,
    "decoupled_brownian": decoupled_brownian,
}

# presets that direct alternation solves on its own (route-independence set)
DIRECTLY_SOLVABLE_MONOTONE = [
    ("canonical_monotone", {"coupling": 0.5}),
    ("canonical_monotone", {"coupling": 0.25}),
    ("canonical_monotone", {"coupling": 0.5, "sigma_coupling": 0.25}),
]


# ---------------------------------------------------------------------------
# quadratic control presets
# ---------------------------------------------------------------------------


def lq_memoryless(grid: TimeGrid) -> LqProblem:
    """A = D = 0, C = N = R = 1, F = Q = 0, x0 = 1: the Riccati reference has
    P(t) = tanh(T - t), optimal cost tanh(1)/2 at T = 1."""
    return LqProblem(A=0.0, C=1.0, D=0.0, F=0.0, R=1.0, N=1.0, Q=0.0,
                     M=grid.M, T=grid.T, x0=1.0)


def lq_delay(grid: TimeGrid) -> LqProblem:
    """Distributed-memory drift (A = 1, M = 0.5) with control in the drift;
    no closed form, verified through optimality and duality properties."""
    return LqProblem(A=1.0, C=1.0, D=0.0, F=0.0, R=1.0, N=1.0, Q=0.0,
                     M=grid.M, T=grid.T, x0=1.0)


def lq_memoryless_2d(grid: TimeGrid) -> LqProblem:
    """Two states, two controls, noise on the control, PSD weights; still
    memoryless so the matrix Riccati reference applies."""
    c = np.array([[1.0, 0.2], [0.0, 0.8]])
    f = np.array([[0.3, 0.0], [0.1, 0.2]])
    r = np.array([[1.0, 0.1], [0.1, 0.5]])
    n = np.array([[1.0, 0.0], [0.0, 2.0]])
    q = np.array([[0.5, 0.0], [0.0, 0.5]])
    return LqProblem(A=np.zeros((2, 2)), C=c, D=np.zeros((2, 2)), F=f, R=r, N=n, Q=q,
                     M=grid.M, T=grid.T, x0=np.array([1.0, -0.5]))


LQ_PRESETS = {
    "memoryless": lq_memoryless,
    "delay": lq_delay,
    "memoryless_2d": lq_memoryless_2d,
}
