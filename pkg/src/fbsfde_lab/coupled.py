"""Coupled solution of the forward-backward pair.

The solver alternates a forward Euler pass (reading the backward pair through
the previous sweep's regression policy) with a full backward sweep on the
fresh forward ensemble, and tracks the composite successive-difference norm

    ( E int |dX|^2 + E int (|dY|^2 + |dZ|^2) + E |dX_T|^2 )^(1/2)

until it falls below tolerance. A family of problems blended by epsilon in
[0, 1] connects a linear, easily solvable system (epsilon 0) to the target
one (epsilon 1); the continuation driver walks that family with warm-started
policies, halving its step adaptively when a stage fails to converge.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affine import AffineMap
from .backward import BackwardSolution, GeneratorSpec, PathFn, TerminalExtension, solve_gabsde
from .errors import DimensionMismatch, NonConvergence, StepUnderflow
from .features import FeatureSpec
from .forward import simulate_sfde
from .functionals import InitialSegment, SfdeCoefficients
from .kernel import (
    BrownianEnsemble,
    ProcessEnsemble,
    TimeGrid,
    WeightedNormSpec,
    theta_star,
    weighted_l2_norm,
)
from .regression import RegressionPolicy, zero_policy

_RANK_CUTOFF = 1e-10


# ---------------------------------------------------------------------------
# structure and system containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MonotoneStructure:
    """Full-rank bridge matrix G and the dissipativity constants.

    The stated sign pattern (lambda1 + lambda2 > 0, lambda2 + mu > 0, plus
    strict positivity requirements when the dimensions differ) is enforced at
    construction. For square systems, uniqueness already follows from
    lambda1 > 0 alone, with lambda2 = mu = 0; builders that rely on that
    pattern (the quadratic-control adjoint with a zero terminal weight) must
    opt in explicitly via relaxed_square_pattern.
    """

    G: np.ndarray
    lambda1: float
    lambda2: float
    mu: float
    relaxed_square_pattern: bool = False

    def __post_init__(self):
        g = np.atleast_2d(np.asarray(self.G, dtype=float))
        object.__setattr__(self, "G", g)
        m, n = g.shape
        sv = np.linalg.svd(g, compute_uv=False)
        if sv[-1] <= _RANK_CUTOFF * sv[0]:
            raise ValueError(f"G must have full rank {min(m, n)}; singular values {sv}")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.mu < 0:
            raise ValueError("lambda1, lambda2, mu must be nonnegative")
        if self.lambda1 + self.lambda2 <= 0:
            raise ValueError("need lambda1 + lambda2 > 0")
        if m > n and not (self.lambda1 > 0 and self.mu > 0):
            raise ValueError("need lambda1 > 0 and mu > 0 when m > n")
        if n > m and not self.lambda2 > 0:
            raise ValueError("need lambda2 > 0 when n > m")
        if self.lambda2 + self.mu <= 0:
            if not (self.relaxed_square_pattern and m == n and self.lambda1 > 0):
                raise ValueError(
                    "need lambda2 + mu > 0 (or the explicit square-system relaxation "
                    "with lambda1 > 0)"
                )

    @property
    def m(self) -> int:
        return self.G.shape[0]

    @property
    def n(self) -> int:
        return self.G.shape[1]


@dataclass(frozen=True)
class FbsfdeSystem:
    """The full coupled problem: forward coefficients with backward couplings,
    a backward generator with a state term, the terminal map, the prescribed
    extension data and the monotone structure.

    structure=None declares no dissipativity constants: direct Picard still
    applies, but the continuation family and the monotonicity checker need a
    structure and will refuse to run.
    """

    forward: SfdeCoefficients
    backward: GeneratorSpec
    terminal_map: AffineMap  # x -> y at T
    terminal_lipschitz: float
    structure: MonotoneStructure | None
    rho: InitialSegment
    extension: TerminalExtension

    def __post_init__(self):
        n, m, d = self.forward.n, self.backward.m, self.backward.d
        if self.structure is not None and self.structure.G.shape != (m, n):
            raise DimensionMismatch(f"G has shape {self.structure.G.shape}, expected {(m, n)}")
        if self.forward.d != d:
            raise DimensionMismatch("forward diffusion columns and generator d disagree")
        if self.rho.dim != n:
            raise DimensionMismatch("initial segment dimension != n")
        if (self.extension.m, self.extension.d) != (m, d):
            raise DimensionMismatch("extension dimensions != (m, d)")
        if self.terminal_map.in_dim != n or self.terminal_map.out_dim != m:
            raise DimensionMismatch(f"terminal map must send R^{n} to R^{m}")
        if self.terminal_map.slope_norm() > self.terminal_lipschitz * (1 + 1e-12) + 1e-15:
            raise ValueError(
                f"declared terminal lipschitz {self.terminal_lipschitz} below slope norm "
                f"{self.terminal_map.slope_norm()}"
            )

    @property
    def dims(self) -> tuple:
        return self.forward.n, self.backward.m, self.backward.d

    def lipschitz(self) -> float:
        return max(self.forward.lipschitz(), self.backward.lipschitz, self.terminal_lipschitz)


@dataclass(frozen=True)
class ContinuationProblem:
    """One member of the blended family: epsilon mixes the target system with
    the linear bridge built from (G, lambda1, lambda2); the offsets are the
    inhomogeneities of the family."""

    base: FbsfdeSystem
    epsilon: float
    drift_offset: object = None  # (n,) or (n_forward, n)
    diffusion_offset: object = None  # (n, d) or (n_forward, n, d)
    generator_offset: object = None  # (m,) or (n_forward, m)
    zeta: object = None  # (m,) constant or PathFn

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")


# ---------------------------------------------------------------------------
# the stacked monotonicity field and its falsification checker
# ---------------------------------------------------------------------------


def _constant_memory_value(spec, t: float, M: float, x: np.ndarray) -> np.ndarray:
    """Value of a memory functional on the constant segment identically x."""
    fwd = 0 if spec.p.time_constant else None
    if fwd is None:
        raise DimensionMismatch("the pointwise checker needs time-constant inner maps")
    if spec.kind == "instantaneous":
        return spec.p(0, x[None, :])[0]
    if spec.kind == "integral_of_state":
        return spec.p(0, ((t + M) * x)[None, :])[0]
    if spec.kind == "windowed_integral":
        return spec.p(0, (M * x)[None, :])[0]
    # integral_of_p on a constant segment
    return (t + M) * spec.p(0, x[None, :])[0]


def _constant_generator_value(gen: GeneratorSpec, t: float, horizon: float, x, y, z_flat):
    """Generator value when the future segments are constant at (y, z)."""
    tail = horizon - t
    if gen.kind == "zero":
        f = np.zeros(gen.m)
    elif gen.kind == "instantaneous":
        f = gen.g(0, np.concatenate([y, z_flat])[None, :])[0]
    elif gen.kind in ("f1", "f2"):
        f = gen.g(0, np.concatenate([tail * y, tail * z_flat])[None, :])[0]
    else:  # affine_adjoint with constant weights
        wy, wz = gen.tail_weights()
        f = tail * (wy(0, y[None, :])[0] + wz(0, z_flat[None, :])[0])
    if gen.x_map is not None:
        f = f + gen.x_map(0, x[None, :])[0]
    return f


def assemble_A(system: FbsfdeSystem, t: float, x, y, z) -> np.ndarray:
    """The stacked field (-G^T f, G b, G sigma) at one point, with all segment
    arguments taken constant at the pointwise values (the checker's view).

    z is (m, d); the sigma block is returned column-major (G sigma_1, ...,
    G sigma_d), giving a vector of length n + m + m*d.
    """
    if system.structure is None:
        raise ValueError("the stacked field needs the system's monotone structure")
    n, m, d = system.dims
    x = np.asarray(x, dtype=float).reshape(n)
    y = np.asarray(y, dtype=float).reshape(m)
    z = np.asarray(z, dtype=float).reshape(m, d)
    z_flat = z.reshape(m * d)
    fw = system.forward
    G = system.structure.G
    grid_M = system.rho.grid.M
    horizon = system.rho.grid.T + system.rho.grid.K

    b = _constant_memory_value(fw.drift, t, grid_M, x)
    if fw.drift_y is not None:
        b = b + fw.drift_y(0, y[None, :])[0]
    if fw.drift_z is not None:
        b = b + fw.drift_z(0, z_flat[None, :])[0]

    sigma_cols = []
    for k in range(d):
        col = _constant_memory_value(fw.diffusion[k], t, grid_M, x)
        if fw.diffusion_y is not None and fw.diffusion_y[k] is not None:
            col = col + fw.diffusion_y[k](0, y[None, :])[0]
        if fw.diffusion_z is not None and fw.diffusion_z[k] is not None:
            col = col + fw.diffusion_z[k](0, z_flat[None, :])[0]
        sigma_cols.append(G @ col)

    f = _constant_generator_value(system.backward, t, horizon, x, y, z_flat)
    return np.concatenate([-G.T @ f, G @ b] + sigma_cols)


@dataclass(frozen=True)
class MonotonicityReport:
    status: str  # "pointwise-satisfied" | "violated"
    worst_margin: float
    worst_phi_margin: float
    witness: dict | None
    n_trials: int
    note: str = (
        "pointwise check on constant segments; satisfying it does not prove the "
        "integral dissipativity condition, which quantifies over all process pairs"
    )


def check_monotonicity(system: FbsfdeSystem, n_trials: int = 200, scale: float = 1.0,
                       seed: int = 0) -> MonotonicityReport:
    """Falsification check of the pointwise dissipativity inequality.

    Samples pairs of points (and times), evaluates the stacked field on
    constant segments and tests <dA, du> <= -lambda1 |G dx|^2 - lambda2
    (|G^T dy|^2 + |G^T dz|^2) together with the terminal-map inequality
    <Phi(x)-Phi(x'), G(x-x')> >= mu |G dx|^2. Reports the worst margins and a
    witness when violated; never raises.
    """
    if system.structure is None:
        raise ValueError("the monotonicity checker needs declared structure constants")
    n, m, d = system.dims
    st = system.structure
    rng = np.random.default_rng(seed)
    grid = system.rho.grid
    worst = np.inf
    worst_phi = np.inf
    witness = None
    for _ in range(max(1, n_trials)):
        t = float(rng.uniform(0.0, grid.T))
        u1 = rng.normal(scale=scale, size=n + m + m * d)
        u2 = rng.normal(scale=scale, size=n + m + m * d)
        x1, y1, z1 = u1[:n], u1[n : n + m], u1[n + m :].reshape(m, d)
        x2, y2, z2 = u2[:n], u2[n : n + m], u2[n + m :].reshape(m, d)
        da = assemble_A(system, t, x1, y1, z1) - assemble_A(system, t, x2, y2, z2)
        du = u1 - u2
        lhs = float(da @ du)
        dx, dy, dz = x1 - x2, y1 - y2, z1 - z2
        bound = -st.lambda1 * float(np.sum((st.G @ dx) ** 2)) - st.lambda2 * (
            float(np.sum((st.G.T @ dy) ** 2)) + float(np.sum((st.G.T @ dz) ** 2))
        )
        margin = bound - lhs
        phi_lhs = float(
            (system.terminal_map(0, x1[None, :])[0] - system.terminal_map(0, x2[None, :])[0])
            @ (st.G @ dx)
        )
        phi_margin = phi_lhs - st.mu * float(np.sum((st.G @ dx) ** 2))
        if margin < worst or (margin == worst and witness is None):
            worst = margin
            witness = {"t": t, "u": u1.copy(), "u_prime": u2.copy(),
                       "lhs": lhs, "bound": bound}
        worst_phi = min(worst_phi, phi_margin)
    tol = 1e-12 * max(1.0, scale * scale)
    status = "pointwise-satisfied" if worst >= -tol and worst_phi >= -tol else "violated"
    return MonotonicityReport(
        status=status,
        worst_margin=float(worst),
        worst_phi_margin=float(worst_phi),
        witness=witness if status == "violated" else None,
        n_trials=n_trials,
    )


# ---------------------------------------------------------------------------
# epsilon blending
# ---------------------------------------------------------------------------


def _z_column_selector(m: int, d: int, k: int) -> np.ndarray:
    """Matrix extracting column k of a row-major flattened (m, d) block."""
    sel = np.zeros((m, m * d))
    for j in range(m):
        sel[j, j * d + k] = 1.0
    return sel


def _blend_system(problem: ContinuationProblem):
    """Effective (coefficients, generator, terminal map) of the epsilon family."""
    sys_ = problem.base
    eps = problem.epsilon
    n, m, d = sys_.dims
    if sys_.structure is None:
        if eps != 1.0:
            raise ValueError("the blended family needs a monotone structure; got none")
        G = np.eye(m, n)
        lam1 = lam2 = 0.0
    else:
        G = sys_.structure.G
        lam2 = sys_.structure.lambda2
        lam1 = sys_.structure.lambda1
    fw = sys_.forward

    bridge_y = AffineMap.build(-(1.0 - eps) * lam2 * G.T)  # (n, m)
    drift_y = bridge_y if fw.drift_y is None else bridge_y.plus(fw.drift_y.scaled(eps))
    drift_z = None if fw.drift_z is None else fw.drift_z.scaled(eps)

    diffusion_z = []
    diffusion_y = []
    for k in range(d):
        sel = _z_column_selector(m, d, k)
        bridge_zk = AffineMap.build(-(1.0 - eps) * lam2 * (G.T @ sel))  # (n, m*d)
        base_zk = None if fw.diffusion_z is None else fw.diffusion_z[k]
        diffusion_z.append(bridge_zk if base_zk is None else bridge_zk.plus(base_zk.scaled(eps)))
        base_yk = None if fw.diffusion_y is None else fw.diffusion_y[k]
        diffusion_y.append(None if base_yk is None else base_yk.scaled(eps))

    coeffs = SfdeCoefficients(
        drift=fw.drift.scaled(eps),
        diffusion=tuple(col.scaled(eps) for col in fw.diffusion),
        drift_y=drift_y,
        drift_z=drift_z,
        diffusion_y=tuple(diffusion_y),
        diffusion_z=tuple(diffusion_z),
    )

    bridge_x = AffineMap.build((1.0 - eps) * lam1 * G)  # (m, n)
    gen = sys_.backward.scaled(eps)
    x_map = bridge_x if gen.x_map is None else bridge_x.plus(gen.x_map)
    if problem.generator_offset is not None:
        x_map = x_map.with_intercept_offset(problem.generator_offset)
    gen = gen.with_x_map(x_map)

    terminal = sys_.terminal_map.scaled(eps).plus(AffineMap.build((1.0 - eps) * G))
    return coeffs, gen, terminal


# ---------------------------------------------------------------------------
# solutions and norms
# ---------------------------------------------------------------------------


@dataclass
class FbsfdeSolution:
    """Converged forward/backward ensembles plus iteration diagnostics."""

    x: ProcessEnsemble
    backward: BackwardSolution
    iterations: int
    history: list = field(default_factory=list)
    converged: bool = False
    schedule_used: list | None = None

    @property
    def y(self) -> ProcessEnsemble:
        return self.backward.y

    @property
    def z(self) -> ProcessEnsemble:
        return self.backward.z

    @property
    def policy(self) -> RegressionPolicy | None:
        return self.backward.policy


def composite_distance(grid: TimeGrid, x_a, y_a, z_a, x_b, y_b, z_b, theta: float = 0.0):
    """The iteration metric: state distance on [-M, T], backward distances on
    [0, T+K], plus the terminal state gap. theta > 0 applies the decay weight
    to the state part and the growth weight to the backward part."""
    dx = ProcessEnsemble(grid, x_a - x_b)
    dy = ProcessEnsemble(grid, y_a - y_b)
    dz = ProcessEnsemble(grid, z_a - z_b)
    x_spec = WeightedNormSpec(theta=theta, sign="decay", t_lo=-grid.M, t_hi=grid.T)
    yz_spec = WeightedNormSpec(theta=theta, sign="growth", t_lo=0.0, t_hi=grid.T + grid.K)
    term = float(np.mean(np.sum((x_a[:, grid.idxT] - x_b[:, grid.idxT]) ** 2, axis=-1)))
    return float(
        np.sqrt(
            weighted_l2_norm(dx, x_spec) ** 2
            + weighted_l2_norm(dy, yz_spec) ** 2
            + weighted_l2_norm(dz, yz_spec) ** 2
            + term
        )
    )


def solution_distance(a: FbsfdeSolution, b: FbsfdeSolution) -> float:
    return composite_distance(
        a.x.grid, a.x.values, a.y.values, a.z.values, b.x.values, b.y.values, b.z.values
    )


# ---------------------------------------------------------------------------
# Picard iteration and continuation
# ---------------------------------------------------------------------------


def _zeta_values(zeta, brownian: BrownianEnsemble, x_ens: ProcessEnsemble, m: int):
    if zeta is None:
        return 0.0
    if isinstance(zeta, PathFn):
        return np.asarray(zeta.fn(brownian, x_ens), dtype=float).reshape(brownian.n_paths, m)
    return np.broadcast_to(np.asarray(zeta, dtype=float), (m,))


def solve_picard(
    problem,
    grid: TimeGrid,
    brownian: BrownianEnsemble,
    feature_spec: FeatureSpec | None = None,
    tol: float = 1e-3,
    max_iter: int = 20,
    warm_start: RegressionPolicy | None = None,
    ridge: float = 0.0,
    theta: float | None = None,
) -> FbsfdeSolution:
    """Alternate forward simulation and backward regression sweeps until the
    composite successive-difference norm falls below tol.

    Accepts the coupled system itself or one member of the blended family.
    The backward couplings of the forward pass are evaluated through the
    previous sweep's policy on the current path's features, keeping the pass
    explicit and adapted. Returns converged=False (with the recorded history)
    if max_iter passes were not enough.
    """
    if isinstance(problem, FbsfdeSystem):
        problem = ContinuationProblem(base=problem, epsilon=1.0)
    sys_ = problem.base
    n, m, d = sys_.dims
    coeffs, gen, terminal = _blend_system(problem)
    if feature_spec is None:
        feature_spec = FeatureSpec(degree=1, sources=("state", "memory_integral"))
    dims = {"brownian": d, "state": n, "memory_integral": n}
    if theta is None:
        theta = theta_star(sys_.lipschitz())

    policy = warm_start if warm_start is not None else zero_policy(feature_spec, dims, m, d)
    zeta = _zeta_values(problem.zeta, brownian, None, m)

    prev = None
    history = []
    converged = False
    x_ens = bsol = None
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        x_ens = simulate_sfde(
            coeffs, sys_.rho, grid, brownian,
            forcing_drift=problem.drift_offset,
            forcing_diffusion=problem.diffusion_offset,
            policy=policy,
        )
        y_term = terminal(grid.n_forward, x_ens.values[:, grid.idxT]) + zeta
        bsol = solve_gabsde(
            gen, sys_.extension, grid, brownian,
            feature_spec=feature_spec, x_ensemble=x_ens, ridge=ridge,
            y_terminal_override=y_term,
        )
        policy = bsol.policy
        if prev is not None:
            plain = composite_distance(
                grid, x_ens.values, bsol.y.values, bsol.z.values, *prev
            )
            weighted = composite_distance(
                grid, x_ens.values, bsol.y.values, bsol.z.values, *prev, theta=theta
            )
            history.append({"iteration": it, "plain": plain, "weighted": weighted})
            if plain < tol:
                converged = True
                break
        prev = (x_ens.values, bsol.y.values, bsol.z.values)

    return FbsfdeSolution(
        x=x_ens, backward=bsol, iterations=iterations, history=history, converged=converged
    )


def solve_continuation(
    system: FbsfdeSystem,
    grid: TimeGrid,
    brownian: BrownianEnsemble,
    feature_spec: FeatureSpec | None = None,
    schedule=None,
    tol: float = 1e-3,
    max_iter: int = 20,
    ridge: float = 0.0,
    delta_min: float = 1.0 / 256.0,
) -> FbsfdeSolution:
    """Walk the blended family from epsilon 0 to 1, warm-starting each stage
    with the previous stage's policy.

    schedule is an increasing sequence of waypoints from 0 to 1 (default 8
    equal steps). A stage that fails to converge is retried with half the
    step, down to delta_min (StepUnderflow below that). The returned solution
    solves the target system (epsilon 1, no offsets) and records the epsilon
    values actually visited.
    """
    if schedule is None:
        schedule = [k / 8.0 for k in range(9)]
    schedule = [float(e) for e in schedule]
    if schedule[0] != 0.0 or schedule[-1] != 1.0 or any(
        b <= a for a, b in zip(schedule, schedule[1:])
    ):
        raise ValueError("schedule must increase from 0 to 1")

    visited = []
    base = solve_picard(
        ContinuationProblem(base=system, epsilon=0.0), grid, brownian,
        feature_spec=feature_spec, tol=tol, max_iter=max_iter, ridge=ridge,
    )
    if not base.converged:
        raise StepUnderflow("the epsilon=0 stage itself did not converge")
    visited.append(0.0)
    policy = base.policy
    solution = base

    current = 0.0
    for target in schedule[1:]:
        delta = target - current
        while current < target:
            step = min(delta, target - current)
            candidate = solve_picard(
                ContinuationProblem(base=system, epsilon=current + step), grid, brownian,
                feature_spec=feature_spec, tol=tol, max_iter=max_iter,
                warm_start=policy, ridge=ridge,
            )
            if candidate.converged:
                current += step
                visited.append(current)
                policy = candidate.policy
                solution = candidate
            else:
                delta = step / 2.0
                if delta < delta_min:
                    raise StepUnderflow(
                        f"continuation step underflow at epsilon={current} "
                        f"(delta {delta} < {delta_min})"
                    )

    solution.schedule_used = visited
    return solution
