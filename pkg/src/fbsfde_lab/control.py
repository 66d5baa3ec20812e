"""Quadratic optimal control of distributed-memory linear dynamics.

The state is driven by the running memory integral of itself plus the
control, in both drift and diffusion. The optimal control is read off the
adjoint forward-backward system as u = -N^{-1} (C^T Y + F^T Z); everything
here either assembles that adjoint system, evaluates costs, or verifies
optimality/convexity/duality numerically against perturbed controls and an
independent Riccati reference for the memoryless case.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .affine import AffineMap
from .backward import GeneratorSpec, TerminalExtension
from .coupled import FbsfdeSolution, FbsfdeSystem, MonotoneStructure, solve_picard
from .errors import (
    DimensionMismatch,
    MismatchedEnsemble,
    NotPositiveDefinite,
    OptimalityViolated,
    OracleInapplicable,
)
from .features import FeatureContext, FeatureMap, FeatureSpec
from .functionals import InitialSegment, MemoryFunctionalSpec, SfdeCoefficients
from .kernel import BrownianEnsemble, ProcessEnsemble, TimeGrid
from .oracles import DensePath, _rk4

_SYM_TOL = 1e-12
_EIG_TOL = 1e-12

LQ_FEATURES = FeatureSpec(degree=1, sources=("state", "memory_integral"))


def _normalize_columns(mat, d: int, rows: int, cols: int, name: str) -> np.ndarray:
    """Per-Brownian-column matrices as (d, rows, cols); accepts a single
    matrix (broadcast when d == 1) or a stacked array."""
    arr = np.asarray(mat, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim == 2:
        arr = arr[None]
        if d != 1:
            raise DimensionMismatch(f"{name} needs one matrix per Brownian column (d={d})")
    if arr.shape != (d, rows, cols):
        raise DimensionMismatch(f"{name} must have shape {(d, rows, cols)}, got {arr.shape}")
    return arr


def _check_sym_psd(mat: np.ndarray, name: str, strict: bool = False) -> float:
    if np.linalg.norm(mat - mat.T) > _SYM_TOL:
        raise ValueError(f"{name} must be symmetric within {_SYM_TOL}")
    lam = float(np.linalg.eigvalsh(mat).min())
    if strict and lam <= 0:
        raise NotPositiveDefinite(f"{name} must be positive definite, min eigenvalue {lam}")
    if not strict and lam < -_EIG_TOL:
        raise ValueError(f"{name} must be positive semidefinite, min eigenvalue {lam}")
    return lam


@dataclass(frozen=True)
class LqProblem:
    """Quadratic cost over linear memory dynamics.

    dX = (A int_{-M}^t X ds + C v) dt + sum_j (D_j int_{-M}^t X ds + F_j v) dB_j
    J(v) = 1/2 E[ int_0^T (<R X, X> + <N v, v>) dt + <Q X_T, X_T> ]

    Matrices are constant in time; D and F take one matrix per Brownian
    column (a single matrix means d = 1). K is the anticipation pad of the
    adjoint system; the prescribed pair vanishes there, so any K >= h gives
    the same answer (the solvers assert that invariance in tests).
    """

    A: np.ndarray
    C: np.ndarray
    D: np.ndarray
    F: np.ndarray
    R: np.ndarray
    N: np.ndarray
    Q: np.ndarray
    M: float
    T: float
    x0: np.ndarray
    K: float | None = None  # None: one grid step

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = a.shape[0]
        c = np.asarray(self.C, dtype=float)
        c = c.reshape(n, -1) if c.ndim < 2 else c
        k = c.shape[1]
        d = np.asarray(self.D, dtype=float)
        n_cols = d.shape[0] if d.ndim == 3 else 1
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "C", c)
        object.__setattr__(self, "D", _normalize_columns(self.D, n_cols, n, n, "D"))
        object.__setattr__(self, "F", _normalize_columns(self.F, n_cols, n, k, "F"))
        object.__setattr__(self, "R", np.atleast_2d(np.asarray(self.R, dtype=float)))
        object.__setattr__(self, "N", np.atleast_2d(np.asarray(self.N, dtype=float)))
        object.__setattr__(self, "Q", np.atleast_2d(np.asarray(self.Q, dtype=float)))
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        if a.shape != (n, n) or self.R.shape != (n, n) or self.Q.shape != (n, n):
            raise DimensionMismatch("A, R, Q must be n x n")
        if self.N.shape != (k, k):
            raise DimensionMismatch("N must be k x k")
        if self.x0.shape != (n,):
            raise DimensionMismatch("x0 must have length n")
        _check_sym_psd(self.R, "R")
        _check_sym_psd(self.Q, "Q")
        object.__setattr__(self, "nu", _check_sym_psd(self.N, "N", strict=True))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def k(self) -> int:
        return self.C.shape[1]

    @property
    def d(self) -> int:
        return self.D.shape[0]

    def grid_horizons(self, h: float) -> tuple:
        return self.M, self.T, h if self.K is None else self.K

    def initial_segment(self, grid: TimeGrid) -> InitialSegment:
        return InitialSegment.constant(grid, self.x0)

    def control_weight_solver(self):
        """Cached symmetric positive-definite solve with N (never the inverse
        matrix itself); guards against corrupted data at call time."""
        lam = float(np.linalg.eigvalsh(self.N).min())
        if lam < 0.5 * self.nu:
            raise NotPositiveDefinite(
                f"control weight lost definiteness: min eigenvalue {lam} < nu/2 = {0.5 * self.nu}"
            )
        factor = cho_factor(self.N)
        return lambda rhs: cho_solve(factor, rhs)


def _z_contraction(mats: np.ndarray) -> np.ndarray:
    """(rows, m*d) matrix W with W @ z_flat = sum_j mats[j]^T z[:, j]."""
    d, m, rows = mats.shape[0], mats.shape[1], mats.shape[2]
    w = np.zeros((rows, m * d))
    for j in range(d):
        for l in range(m):
            w[:, l * d + j] += mats[j][l, :]
    return w


def optimal_control(problem: LqProblem, y_values: np.ndarray, z_values: np.ndarray) -> np.ndarray:
    """u = -N^{-1} (C^T y + F^T z) applied per path.

    y_values: (paths, n); z_values: (paths, n, d). F^T z contracts the
    diffusion-control matrices against the matching Brownian columns.
    """
    solve = problem.control_weight_solver()
    rhs = y_values @ problem.C  # (paths, k)
    for j in range(problem.d):
        rhs = rhs + z_values[:, :, j] @ problem.F[j]
    return -solve(rhs.T).T


def build_adjoint_fbsfde(problem: LqProblem, grid: TimeGrid) -> FbsfdeSystem:
    """The coupled system whose solution carries the optimal control.

    The forward part substitutes u = -N^{-1}(C^T Y + F^T Z) into the
    controlled dynamics; the backward generator conditions the anticipated
    integrals of A^T Y and D^T Z and adds R X; the terminal map is Q with a
    vanishing extension.
    """
    n, k, d = problem.n, problem.k, problem.d
    solve = problem.control_weight_solver()
    n_inv_ct = solve(problem.C.T)  # (k, n)
    w = _z_contraction(problem.F)  # (k, n*d)
    n_inv_w = solve(w)

    drift = MemoryFunctionalSpec(
        "integral_of_state", AffineMap.build(problem.A), np.linalg.norm(problem.A, 2)
    )
    diffusion = tuple(
        MemoryFunctionalSpec(
            "integral_of_state", AffineMap.build(problem.D[j]), np.linalg.norm(problem.D[j], 2)
        )
        for j in range(d)
    )
    coeffs = SfdeCoefficients(
        drift=drift,
        diffusion=diffusion,
        drift_y=AffineMap.build(-problem.C @ n_inv_ct),
        drift_z=AffineMap.build(-problem.C @ n_inv_w),
        diffusion_y=tuple(AffineMap.build(-problem.F[j] @ n_inv_ct) for j in range(d)),
        diffusion_z=tuple(AffineMap.build(-problem.F[j] @ n_inv_w) for j in range(d)),
    )

    tail_y = AffineMap.build(problem.A.T)
    tail_z = AffineMap.build(_z_contraction(problem.D))
    gen = GeneratorSpec(
        kind="affine_adjoint",
        m=n,
        d=d,
        tail_y_weight=tail_y,
        tail_z_weight=tail_z,
        x_map=AffineMap.build(problem.R),
        lipschitz=float(np.linalg.norm(problem.A, 2) + np.linalg.norm(_z_contraction(problem.D), 2)),
    )

    lam1 = max(0.0, float(np.linalg.eigvalsh(problem.R).min()))
    mu = max(0.0, float(np.linalg.eigvalsh(problem.Q).min()))
    structure = None
    if lam1 > 0.0:
        structure = MonotoneStructure(
            G=np.eye(n), lambda1=lam1, lambda2=0.0, mu=mu,
            relaxed_square_pattern=(mu == 0.0),
        )

    return FbsfdeSystem(
        forward=coeffs,
        backward=gen,
        terminal_map=AffineMap.build(problem.Q),
        terminal_lipschitz=float(np.linalg.norm(problem.Q, 2)),
        structure=structure,
        rho=problem.initial_segment(grid),
        extension=TerminalExtension(m=n, d=d, xi=0.0, eta=0.0),
    )


def solve_adjoint(problem: LqProblem, grid: TimeGrid, brownian: BrownianEnsemble,
                  tol: float = 1e-3, max_iter: int = 25, ridge: float = 0.0) -> FbsfdeSolution:
    system = build_adjoint_fbsfde(problem, grid)
    return solve_picard(system, grid, brownian, feature_spec=LQ_FEATURES,
                        tol=tol, max_iter=max_iter, ridge=ridge)


# ---------------------------------------------------------------------------
# control policies
# ---------------------------------------------------------------------------


class OpenLoopControl:
    """Fixed values per node: constant (k,), per-node (n_forward, k), or
    per path (paths, n_forward, k)."""

    kind = "open-loop"

    def __init__(self, values, k: int):
        self.values = np.asarray(values, dtype=float)
        self.k = k

    def control_at(self, i_fwd: int, ctx: FeatureContext) -> np.ndarray:
        v = self.values
        n_paths = ctx.n_paths
        if v.ndim == 1:
            return np.broadcast_to(v, (n_paths, self.k))
        if v.ndim == 2:
            return np.broadcast_to(v[i_fwd], (n_paths, self.k))
        return v[:, i_fwd, :]


class FeedbackControl:
    """u = -N^{-1}(C^T Y + F^T Z) with (Y, Z) read from the adjoint solve's
    regression policy on the current path's features, so the control is
    well-defined under any Brownian ensemble."""

    kind = "feedback-from-adjoint"

    def __init__(self, problem: LqProblem, policy, idx0: int):
        self.problem = problem
        self.policy = policy
        self.idx0 = idx0

    def control_at(self, i_fwd: int, ctx: FeatureContext) -> np.ndarray:
        y, z = self.policy.values_at(self.idx0 + i_fwd, ctx)
        return optimal_control(self.problem, y, z)


class PerturbedControl:
    """base + epsilon * direction."""

    kind = "perturbed"

    def __init__(self, base, direction, epsilon: float):
        self.base = base
        self.direction = direction
        self.epsilon = epsilon

    def control_at(self, i_fwd: int, ctx: FeatureContext) -> np.ndarray:
        return self.base.control_at(i_fwd, ctx) + self.epsilon * self.direction.control_at(
            i_fwd, ctx
        )


class AdaptedDirection:
    """Admissible perturbation direction: an affine map of the path features
    at each node (adapted by construction)."""

    kind = "open-loop"

    def __init__(self, coefficients: np.ndarray, feature_map: FeatureMap, idx0: int):
        self.coefficients = np.asarray(coefficients, dtype=float)  # (n_features, k)
        self.feature_map = feature_map
        self.idx0 = idx0

    def control_at(self, i_fwd: int, ctx: FeatureContext) -> np.ndarray:
        phi = self.feature_map.build(self.idx0 + i_fwd, ctx)
        return phi @ self.coefficients


def simulate_controlled(problem: LqProblem, policy, grid: TimeGrid,
                        brownian: BrownianEnsemble) -> tuple:
    """Euler path ensemble of the controlled dynamics under the policy.

    Returns (ensemble, controls) with controls of shape (paths, n_forward, k)
    so cost evaluation reuses exactly the applied control values.
    """
    n, k, d = problem.n, problem.k, problem.d
    if brownian.dim != d:
        raise DimensionMismatch(f"brownian dim {brownian.dim} != problem d {d}")
    n_paths = brownian.n_paths
    idx0, idxT, h = grid.idx0, grid.idxT, grid.h
    rho = problem.initial_segment(grid)

    X = np.empty((n_paths, grid.n_nodes, n))
    X[:, : idx0 + 1] = rho.values[None, :, :]
    if grid.n_nodes > idxT + 1:
        X[:, idxT + 1 :] = 0.0
    controls = np.empty((n_paths, grid.n_forward, k))

    seg = rho.values[:-1].sum(axis=0) * h if idx0 > 0 else np.zeros(n)
    memint = np.tile(seg, (n_paths, 1))
    b_vals = brownian.values
    for i in range(idx0, idxT):
        fwd = i - idx0
        ctx = FeatureContext(brownian_values=b_vals, x_values=X, x_memint=memint)
        v = policy.control_at(fwd, ctx)
        controls[:, fwd] = v
        drift = memint @ problem.A.T + v @ problem.C.T
        d_b = b_vals[:, i + 1] - b_vals[:, i]
        incr = drift * h
        for j in range(d):
            col = memint @ problem.D[j].T + v @ problem.F[j].T
            incr = incr + col * d_b[:, j : j + 1]
        X[:, i + 1] = X[:, i] + incr
        memint = memint + h * X[:, i]

    return ProcessEnsemble(grid, X), controls


@dataclass(frozen=True)
class CostEstimate:
    value: float
    standard_error: float
    per_path: np.ndarray = field(repr=False)


def cost_J(problem: LqProblem, controls: np.ndarray, x_ensemble: ProcessEnsemble) -> CostEstimate:
    """Monte Carlo estimate of the quadratic cost for realized controls.

    controls must be the values applied along the simulation of x_ensemble,
    shape (paths, n_forward, k); the running term uses left-endpoint
    quadrature and the terminal term reads X_T.
    """
    grid = x_ensemble.grid
    x = x_ensemble.values
    if controls.shape != (x.shape[0], grid.n_forward, problem.k):
        raise MismatchedEnsemble(
            f"controls {controls.shape} do not match ensemble "
            f"{(x.shape[0], grid.n_forward, problem.k)}"
        )
    xs = x[:, grid.idx0 : grid.idxT]  # left endpoints on [0, T)
    run_state = np.einsum("pin,nm,pim->p", xs, problem.R, xs)
    run_control = np.einsum("pik,kl,pil->p", controls, problem.N, controls)
    x_T = x[:, grid.idxT]
    terminal = np.einsum("pn,nm,pm->p", x_T, problem.Q, x_T)
    per_path = 0.5 * ((run_state + run_control) * grid.h + terminal)
    n = per_path.shape[0]
    return CostEstimate(
        value=float(per_path.mean()),
        standard_error=float(per_path.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        per_path=per_path,
    )


def evaluate_policy_cost(problem: LqProblem, policy, grid: TimeGrid,
                         brownian: BrownianEnsemble) -> CostEstimate:
    ens, controls = simulate_controlled(problem, policy, grid, brownian)
    return cost_J(problem, controls, ens)


# ---------------------------------------------------------------------------
# optimality verification
# ---------------------------------------------------------------------------


@dataclass
class OptimalityReport:
    cost_u: CostEstimate
    perturbations: list
    convexity: list
    duality_residual: float
    duality_se: float
    all_pass: bool


def _feedback(problem: LqProblem, adjoint: FbsfdeSolution, grid: TimeGrid) -> FeedbackControl:
    return FeedbackControl(problem, adjoint.policy, grid.idx0)


def verify_optimality(
    problem: LqProblem,
    adjoint: FbsfdeSolution,
    grid: TimeGrid,
    brownian: BrownianEnsemble,
    n_perturbations: int = 100,
    epsilons: tuple = (0.1, 0.5),
    n_convexity_pairs: int = 50,
    direction_scale: float = 1.0,
    seed: int = 0,
) -> OptimalityReport:
    """Compare the candidate optimal control against random admissible
    perturbations with common random numbers.

    For every adapted direction the per-path cost difference of the perturbed
    control must not be significantly negative (three standard errors);
    midpoint convexity is checked on random control pairs the same way; and
    the integration-by-parts identity relating the terminal gap, the running
    state cost and the control couplings is evaluated as a residual that
    should vanish with the step and the regression error. Raises
    OptimalityViolated on a significant loss, otherwise returns the report.
    """
    rng = np.random.default_rng(seed)
    u_policy = _feedback(problem, adjoint, grid)
    x_u, controls_u = simulate_controlled(problem, u_policy, grid, brownian)
    cost_u = cost_J(problem, controls_u, x_u)

    fmap = FeatureMap(LQ_FEATURES, {"state": problem.n, "memory_integral": problem.n})

    def random_direction():
        coef = direction_scale * rng.standard_normal((fmap.n_features, problem.k))
        return AdaptedDirection(coef, fmap, grid.idx0)

    perturbations = []
    all_pass = True
    for p_idx in range(n_perturbations):
        direction = random_direction()
        for eps in epsilons:
            pert = PerturbedControl(u_policy, direction, eps)
            cost_v = evaluate_policy_cost(problem, pert, grid, brownian)
            diff = cost_v.per_path - cost_u.per_path
            n = diff.shape[0]
            se = float(diff.std(ddof=1) / np.sqrt(n))
            ok = bool(diff.mean() >= -3.0 * se)
            perturbations.append(
                {"index": p_idx, "epsilon": eps, "mean_diff": float(diff.mean()),
                 "se": se, "pass": ok}
            )
            if not ok:
                all_pass = False

    convexity = []
    for c_idx in range(n_convexity_pairs):
        va = PerturbedControl(u_policy, random_direction(), 1.0)
        vb = PerturbedControl(u_policy, random_direction(), 1.0)
        cost_a = evaluate_policy_cost(problem, va, grid, brownian)
        cost_b = evaluate_policy_cost(problem, vb, grid, brownian)
        mid = _MidpointPolicy(va, vb)
        cost_mid = evaluate_policy_cost(problem, mid, grid, brownian)
        gap = 0.5 * (cost_a.per_path + cost_b.per_path) - cost_mid.per_path
        n = gap.shape[0]
        se = float(gap.std(ddof=1) / np.sqrt(n))
        ok = bool(gap.mean() >= -3.0 * se)
        convexity.append({"index": c_idx, "mean_gap": float(gap.mean()), "se": se, "pass": ok})
        if not ok:
            all_pass = False

    residual, res_se = duality_residual(problem, adjoint, grid, brownian)

    report = OptimalityReport(
        cost_u=cost_u,
        perturbations=perturbations,
        convexity=convexity,
        duality_residual=residual,
        duality_se=res_se,
        all_pass=all_pass,
    )
    if not all_pass:
        worst = min(
            perturbations + convexity,
            key=lambda r: r.get("mean_diff", r.get("mean_gap", 0.0)) / max(r["se"], 1e-300),
        )
        raise OptimalityViolated(
            f"perturbed control beat the candidate beyond noise: {worst}", report=report
        )
    return report


class _MidpointPolicy:
    kind = "open-loop"

    def __init__(self, a, b):
        self.a, self.b = a, b

    def control_at(self, i_fwd, ctx):
        return 0.5 * (self.a.control_at(i_fwd, ctx) + self.b.control_at(i_fwd, ctx))


def duality_residual(
    problem: LqProblem,
    adjoint: FbsfdeSolution,
    grid: TimeGrid,
    brownian: BrownianEnsemble,
    direction: np.ndarray | None = None,
) -> tuple:
    """Residual of the integration-by-parts identity

        E<X_T^v - X_T, Y_T> + E int <R X, X^v - X> dt
            = E int (<C (v-u), Y> + <F (v-u), Z>) dt

    under the comparison control v = u + direction (a constant offset,
    default all-ones). Returns (|mean residual|, standard error).
    """
    if direction is None:
        direction = np.ones(problem.k)
    u_policy = _feedback(problem, adjoint, grid)
    x_u, controls_u = simulate_controlled(problem, u_policy, grid, brownian)
    v_policy = PerturbedControl(u_policy, OpenLoopControl(direction, problem.k), 1.0)
    x_v, controls_v = simulate_controlled(problem, v_policy, grid, brownian)

    # backward pair along the optimal state, read from the fitted policy
    n_paths = brownian.n_paths
    h = grid.h
    prefix = np.zeros_like(x_u.values)
    np.cumsum(x_u.values[:, :-1] * h, axis=1, out=prefix[:, 1:])
    ctx = FeatureContext(brownian_values=brownian.values, x_values=x_u.values, x_memint=prefix)

    terminal = np.einsum(
        "pn,pn->p",
        x_v.values[:, grid.idxT] - x_u.values[:, grid.idxT],
        x_u.values[:, grid.idxT] @ problem.Q.T,
    )
    running = np.zeros(n_paths)
    coupling = np.zeros(n_paths)
    for i in range(grid.idx0, grid.idxT):
        fwd = i - grid.idx0
        y_i, z_i = adjoint.policy.values_at(i, ctx)
        dx = x_v.values[:, i] - x_u.values[:, i]
        running += h * np.einsum("pn,pn->p", x_u.values[:, i] @ problem.R.T, dx)
        dv = controls_v[:, fwd] - controls_u[:, fwd]
        coupling += h * np.einsum("pn,pn->p", dv @ problem.C.T, y_i)
        for j in range(problem.d):
            coupling += h * np.einsum("pn,pn->p", dv @ problem.F[j].T, z_i[:, :, j])

    residual = terminal + running - coupling
    n = residual.shape[0]
    se = float(residual.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return abs(float(residual.mean())), se


# ---------------------------------------------------------------------------
# independent Riccati reference (memoryless problems only)
# ---------------------------------------------------------------------------


def riccati_reference(problem: LqProblem, h: float) -> dict:
    """Backward matrix Riccati solution P' = P^T C (N + F^T P F)^{-1} C^T P - R
    from P(T) = Q, integrated by RK4 at one tenth of the solver step.

    Only valid when the memory matrices vanish (A = 0, D = 0), where the
    dynamics are driven by the control alone; OracleInapplicable otherwise.
    Returns the dense path of P and the optimal cost 1/2 <P(0) x0, x0>.
    """
    if np.any(problem.A != 0.0) or np.any(problem.D != 0.0):
        raise OracleInapplicable("the Riccati reference needs A = 0 and D = 0")
    n = problem.n
    q_flat = problem.Q.reshape(-1)

    def rhs_backward(tau, p_flat):
        p = p_flat.reshape(n, n)
        inner = problem.N.copy()
        for j in range(problem.d):
            inner = inner + problem.F[j].T @ p @ problem.F[j]
        gain = np.linalg.solve(inner, problem.C.T @ p)
        return (p.T @ problem.C @ gain - problem.R).reshape(-1)

    n_steps = max(1, int(round(problem.T / (h / 10.0))))
    dense = _rk4(lambda tau, y: -rhs_backward(problem.T - tau, y), q_flat, 0.0, problem.T, n_steps)
    p_path = dense[::-1].reshape(-1, n, n)
    p0 = p_path[0]
    cost = 0.5 * float(problem.x0 @ p0 @ problem.x0)
    return {"P": DensePath(0.0, problem.T, dense[::-1].copy()), "P0": p0, "cost": cost}
