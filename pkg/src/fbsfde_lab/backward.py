"""Regression Monte Carlo for backward equations whose generator reads the
future segment of the solution.

The sweep runs from T down to 0. One step extracts Z by the increment
projection Z_i = E[Y_{i+1} dB^T | F_i] / h, conditions Y_{i+1}, evaluates the
generator explicitly on already-known future values (the unknown left
endpoint of a tail integral is propagated from the next node) and sets
Y_i = E[Y_{i+1} | F_i] + h f_i. Everything the generator needs beyond node
i+1 enters through running tail sums, so the sweep stays single-pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affine import AffineMap
from .errors import (
    DimensionMismatch,
    MissingFuture,
    StabilityViolation,
)
from .features import FeatureContext, FeatureSpec
from .kernel import BrownianEnsemble, ProcessEnsemble, TimeGrid
from .regression import LeastSquaresConditionalExpectation, RegressionPolicy

GENERATOR_KINDS = ("zero", "instantaneous", "f1", "f2", "affine_adjoint")


# ---------------------------------------------------------------------------
# terminal data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimeFn:
    """Deterministic function of node time."""

    fn: object


@dataclass(frozen=True)
class PathFn:
    """Measurable map of the path at T: fn(brownian, x_ensemble) -> (paths, m...)"""

    fn: object


@dataclass(frozen=True)
class TerminalExtension:
    """Prescribed (Y, Z) data on [T, T+K].

    xi and eta may each be a constant (scalar or vector), a TimeFn evaluated
    at the extension nodes, or a PathFn of the path at T (constant in time
    across the extension). Values at node T are functions of the history up
    to T by construction.
    """

    m: int
    d: int
    xi: object = 0.0
    eta: object = 0.0

    def _materialize(self, spec, comp_shape, grid, brownian, x_ens):
        n_ext = grid.n_nodes - grid.idxT
        n_paths = brownian.n_paths
        out = np.zeros((n_paths, n_ext) + comp_shape)
        if isinstance(spec, PathFn):
            vals = np.asarray(spec.fn(brownian, x_ens), dtype=float)
            if vals.shape == (n_paths,) + comp_shape:
                out[:] = vals[:, None]
            elif vals.shape == (n_paths, n_ext) + comp_shape:
                out[:] = vals
            else:
                raise DimensionMismatch(
                    f"path map returned {vals.shape}, expected {(n_paths,) + comp_shape}"
                )
        elif isinstance(spec, TimeFn):
            for k in range(n_ext):
                out[:, k] = np.broadcast_to(
                    np.asarray(spec.fn(grid.time_at(grid.idxT + k)), dtype=float), comp_shape
                )
        else:
            out[:] = np.broadcast_to(np.asarray(spec, dtype=float), comp_shape)
        return out

    def materialize(self, grid: TimeGrid, brownian: BrownianEnsemble, x_ens=None):
        """Arrays (paths, n_ext, m) and (paths, n_ext, m, d) over nodes T..T+K."""
        y_ext = self._materialize(self.xi, (self.m,), grid, brownian, x_ens)
        z_ext = self._materialize(self.eta, (self.m, self.d), grid, brownian, x_ens)
        return y_ext, z_ext


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GeneratorSpec:
    """Drift of the backward equation, restricted to the preset families.

    kind selects how the future segment enters:

    - "zero":            f = 0 (plus the optional x term)
    - "instantaneous":   f = g(y_i, z_i) with the conditioned current values
    - "f1":              f = g(E[int_t^{T+K} y dr | F_t], E[int z dr | F_t])
    - "f2":              f = E[g(int_t^{T+K} y dr, int z dr) | F_t]
    - "affine_adjoint":  f = E[int W_y(s) y_s ds | F_t] + E[int W_z(s) z_s ds | F_t]

    g maps the concatenation (y, z-flattened) to R^m; the adjoint weights are
    linear maps applied inside the tail integral and may vary per node. The
    optional x_map adds an affine term in the forward state at t.
    """

    kind: str
    m: int
    d: int
    g: AffineMap | None = None
    tail_y_weight: AffineMap | None = None
    tail_z_weight: AffineMap | None = None
    x_map: AffineMap | None = None
    lipschitz: float = 0.0

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        width = self.m + self.m * self.d
        if self.kind in ("instantaneous", "f1", "f2"):
            if self.g is None:
                raise DimensionMismatch(f"kind {self.kind!r} needs the affine map g")
            if self.g.in_dim != width or self.g.out_dim != self.m:
                raise DimensionMismatch(
                    f"g must map {width} -> {self.m}, got {self.g.in_dim} -> {self.g.out_dim}"
                )
            if self.g.slope_norm() > self.lipschitz * (1 + 1e-12) + 1e-15:
                raise ValueError(
                    f"declared lipschitz {self.lipschitz} below g slope norm {self.g.slope_norm()}"
                )
        if self.kind == "affine_adjoint":
            for name, w, in_dim in (
                ("tail_y_weight", self.tail_y_weight, self.m),
                ("tail_z_weight", self.tail_z_weight, self.m * self.d),
            ):
                if w is not None and (w.in_dim != in_dim or w.out_dim != self.m):
                    raise DimensionMismatch(f"{name} must map {in_dim} -> {self.m}")

    @property
    def reads_future(self) -> bool:
        return self.kind in ("f1", "f2", "affine_adjoint")

    def tail_weights(self) -> tuple:
        """(w_y, w_z) applied inside the tail integrals; None means identity.
        An absent adjoint weight contributes nothing and becomes a zero map."""
        if self.kind != "affine_adjoint":
            return None, None
        wy = self.tail_y_weight
        if wy is None:
            wy = AffineMap.build(np.zeros((self.m, self.m)))
        wz = self.tail_z_weight
        if wz is None:
            wz = AffineMap.build(np.zeros((self.m, self.m * self.d)))
        return wy, wz

    def scaled(self, c: float) -> "GeneratorSpec":
        return GeneratorSpec(
            kind=self.kind,
            m=self.m,
            d=self.d,
            g=None if self.g is None else self.g.scaled(c),
            tail_y_weight=None if self.tail_y_weight is None else self.tail_y_weight.scaled(c),
            tail_z_weight=None if self.tail_z_weight is None else self.tail_z_weight.scaled(c),
            x_map=None if self.x_map is None else self.x_map.scaled(c),
            lipschitz=abs(c) * self.lipschitz,
        )

    def with_x_map(self, x_map: AffineMap | None) -> "GeneratorSpec":
        return GeneratorSpec(
            kind=self.kind, m=self.m, d=self.d, g=self.g,
            tail_y_weight=self.tail_y_weight, tail_z_weight=self.tail_z_weight,
            x_map=x_map, lipschitz=self.lipschitz,
        )


def zero_generator(m: int, d: int, x_map: AffineMap | None = None) -> GeneratorSpec:
    return GeneratorSpec(kind="zero", m=m, d=d, x_map=x_map)


class _TailSum:
    """Running left-endpoint tail sum S_i = sum_{j>=i} h w_j(v_j) of a process,
    advanced backward one node at a time. The propagated value at node i uses
    the next node's value for the unknown left endpoint."""

    def __init__(self, grid: TimeGrid, weight: AffineMap | None, start: np.ndarray):
        self.grid = grid
        self.weight = weight
        self.s = start  # sum over nodes >= i+1 when queried at node i

    def _apply(self, i: int, values: np.ndarray) -> np.ndarray:
        if self.weight is None:
            return values
        return self.weight(i - self.grid.idx0, values)

    def propagated(self, i: int, next_values: np.ndarray) -> np.ndarray:
        return self.s + self.grid.h * self._apply(i, next_values)

    def push(self, i: int, values_i: np.ndarray) -> None:
        self.s = self.s + self.grid.h * self._apply(i, values_i)


def _extension_tail(grid: TimeGrid, weight: AffineMap | None, ext_flat: np.ndarray) -> np.ndarray:
    """Tail sum over the extension's left nodes T .. T+K-h (empty for K=0)."""
    n_paths = ext_flat.shape[0]
    out_dim = weight.out_dim if weight is not None else ext_flat.shape[2]
    s = np.zeros((n_paths, out_dim))
    for k in range(ext_flat.shape[1] - 1):
        j = grid.idxT + k
        v = ext_flat[:, k]
        s = s + grid.h * (weight(j - grid.idx0, v) if weight is not None else v)
    return s


def eval_anticipated_generator(
    spec: GeneratorSpec,
    i: int,
    y_values: np.ndarray,
    z_values: np.ndarray,
    grid: TimeGrid,
    node_fit,
    x_values: np.ndarray | None = None,
    cond_y: np.ndarray | None = None,
    cond_z: np.ndarray | None = None,
    tails: dict | None = None,
) -> np.ndarray:
    """Per-path generator values at node i, measurable w.r.t. F_{t_i}.

    y_values / z_values are the solution arrays populated at nodes > i (and
    the extension); the conditional expectation engine for node i is passed
    as node_fit. For the instantaneous kind the already-conditioned current
    values must be supplied. Raises MissingFuture if a needed future node is
    unpopulated.
    """
    n_paths = y_values.shape[0]
    f = np.zeros((n_paths, spec.m))

    if spec.kind == "instantaneous":
        if cond_y is None or cond_z is None:
            raise MissingFuture("instantaneous generator needs conditioned current values")
        f = spec.g(i - grid.idx0, np.concatenate([cond_y, cond_z.reshape(n_paths, -1)], axis=1))
    elif spec.reads_future:
        z_flat = z_values.reshape(n_paths, z_values.shape[1], -1)
        if np.isnan(y_values[:, i + 1]).any() or np.isnan(z_flat[:, i + 1]).any():
            raise MissingFuture(f"values at node {i + 1} are not populated")
        if tails is None:
            # stand-alone evaluation: build the tail sums from scratch
            if np.isnan(y_values[:, i + 1 :]).any() or np.isnan(z_flat[:, i + 1 :]).any():
                raise MissingFuture(f"future values beyond node {i} are not populated")
            h = grid.h
            wy, wz = spec.tail_weights()

            def from_scratch(weight, vals):
                apply = (lambda j, v: v) if weight is None else (
                    lambda j, v: weight(j - grid.idx0, v)
                )
                tail = h * apply(i, vals[:, i + 1])
                for j in range(i + 1, vals.shape[1] - 1):
                    tail = tail + h * apply(j, vals[:, j])
                return tail

            tail_y = from_scratch(wy, y_values)
            tail_z = from_scratch(wz, z_flat)
        else:
            tail_y = tails["y"].propagated(i, y_values[:, i + 1])
            tail_z = tails["z"].propagated(i, z_flat[:, i + 1])

        if spec.kind == "f1":
            u, _, _ = node_fit.fit(tail_y)
            v, _, _ = node_fit.fit(tail_z)
            f = spec.g(i - grid.idx0, np.concatenate([u, v], axis=1))
        elif spec.kind == "f2":
            w = spec.g(i - grid.idx0, np.concatenate([tail_y, tail_z], axis=1))
            f, _, _ = node_fit.fit(w)
        else:  # affine_adjoint: weights were applied inside the tails
            ya, _, _ = node_fit.fit(tail_y)
            za, _, _ = node_fit.fit(tail_z)
            f = ya + za

    if spec.x_map is not None:
        if x_values is None:
            raise DimensionMismatch("generator couples to x but no state ensemble was given")
        f = f + spec.x_map(i - grid.idx0, x_values[:, i])
    return f


def backward_step(y_next: np.ndarray, f_value: np.ndarray, d_b: np.ndarray, node_fit, h: float):
    """One explicit backward step.

    Z_i = E[Y_{i+1} dB^T | F_i] / h and Y_i = E[Y_{i+1} | F_i] + h f_value,
    both realized as fits through the node's conditional expectation engine.
    Returns (y_i, z_i, coefficients of the conditioned Y, coefficients of Z,
    mean squared residuals).
    """
    n_paths, m = y_next.shape
    d = d_b.shape[1]
    z_target = (y_next[:, :, None] * d_b[:, None, :]).reshape(n_paths, m * d) / h
    z_flat, coef_z, z_mse = node_fit.fit(z_target)
    y_cond, coef_y, y_mse = node_fit.fit(y_next)
    y_i = y_cond + h * f_value
    return y_i, z_flat.reshape(n_paths, m, d), coef_y, coef_z, (y_mse, z_mse)


# ---------------------------------------------------------------------------
# full sweep
# ---------------------------------------------------------------------------


@dataclass
class BackwardSolution:
    """Converged (Y, Z) ensembles on [0, T+K] plus the fitted policy."""

    y: ProcessEnsemble
    z: ProcessEnsemble
    policy: RegressionPolicy | None
    diagnostics: list = field(default_factory=list)

    @property
    def terminal_residual(self) -> float:
        """Regression residual of the final fitted step (time 0 end is last)."""
        return self.diagnostics[-1]["y_mse"] if self.diagnostics else 0.0


def solve_gabsde(
    generator: GeneratorSpec,
    terminal: TerminalExtension,
    grid: TimeGrid,
    brownian: BrownianEnsemble,
    feature_spec: FeatureSpec | None = None,
    engine=None,
    x_ensemble: ProcessEnsemble | None = None,
    ridge: float = 0.0,
    y_terminal_override: np.ndarray | None = None,
) -> BackwardSolution:
    """Backward induction from T to 0 on a sampled ensemble.

    The terminal data pins (Y, Z) on [T, T+K] bit-exactly (the coupled solver
    overrides the node-T value of Y with its terminal map); every earlier node
    is fitted through the conditional expectation engine, so Y_i and Z_i are
    deterministic functions of the path features at t_i. Requires h * L < 1
    for the declared generator constant (StabilityViolation otherwise).
    """
    m, d = generator.m, generator.d
    if brownian.dim != d:
        raise DimensionMismatch(f"brownian dim {brownian.dim} != generator d {d}")
    if not grid.same_mesh(brownian.grid):
        raise DimensionMismatch("brownian ensemble was sampled on a different grid")
    if grid.h * generator.lipschitz >= 1.0:
        raise StabilityViolation(
            f"explicit step needs h*L < 1, got {grid.h} * {generator.lipschitz}"
        )
    if generator.x_map is not None and x_ensemble is None:
        raise DimensionMismatch("generator couples to x but no state ensemble was given")

    n_paths = brownian.n_paths
    idx0, idxT, h = grid.idx0, grid.idxT, grid.h

    dims = {"brownian": d}
    ctx = FeatureContext(brownian_values=brownian.values)
    if x_ensemble is not None:
        dims["state"] = x_ensemble.values.shape[2]
        dims["memory_integral"] = x_ensemble.values.shape[2]
        ctx.x_values = x_ensemble.values
        prefix = np.zeros_like(x_ensemble.values)
        np.cumsum(x_ensemble.values[:, :-1] * h, axis=1, out=prefix[:, 1:])
        ctx.x_memint = prefix
    if engine is None:
        if feature_spec is None:
            feature_spec = FeatureSpec(degree=1, sources=("brownian",))
        if generator.x_map is not None and "state" not in feature_spec.sources:
            raise ValueError(
                "a generator with an x term needs 'state' among the feature sources "
                "so fitted values stay in the regression span"
            )
        engine = LeastSquaresConditionalExpectation(feature_spec, dims, ridge=ridge)
        policy = RegressionPolicy(feature_spec, dims, m, d)
    else:
        policy = None

    y = np.full((n_paths, grid.n_nodes, m), np.nan)
    z = np.full((n_paths, grid.n_nodes, m, d), np.nan)
    if idx0 > 0:
        y[:, :idx0] = 0.0
        z[:, :idx0] = 0.0
    y_ext, z_ext = terminal.materialize(grid, brownian, x_ensemble)
    y[:, idxT:] = y_ext
    z[:, idxT:] = z_ext
    if y_terminal_override is not None:
        y[:, idxT] = y_terminal_override

    tails = None
    if generator.reads_future:
        wy, wz = generator.tail_weights()
        y_ext_flat = y[:, idxT:, :]
        z_ext_flat = z[:, idxT:].reshape(n_paths, -1, m * d)
        tails = {
            "y": _TailSum(grid, wy, _extension_tail(grid, wy, y_ext_flat)),
            "z": _TailSum(grid, wz, _extension_tail(grid, wz, z_ext_flat)),
        }

    diagnostics = []
    b_vals = brownian.values
    x_values = x_ensemble.values if x_ensemble is not None else None

    for i in range(idxT - 1, idx0 - 1, -1):
        node_fit = engine.at_node(i, ctx)
        d_b = b_vals[:, i + 1] - b_vals[:, i]
        y_next = y[:, i + 1]

        f_kwargs = {}
        if generator.kind == "instantaneous":
            # condition first, then feed the generator the current values
            z_target = (y_next[:, :, None] * d_b[:, None, :]).reshape(n_paths, m * d) / h
            z_flat, coef_z, z_mse = node_fit.fit(z_target)
            y_cond, _, y_mse = node_fit.fit(y_next)
            z_i = z_flat.reshape(n_paths, m, d)
            f_i = eval_anticipated_generator(
                generator, i, y, z, grid, node_fit, x_values, cond_y=y_cond, cond_z=z_i
            )
            y_i = y_cond + h * f_i
        else:
            f_i = eval_anticipated_generator(
                generator, i, y, z, grid, node_fit, x_values, tails=tails
            )
            y_i, z_i, _, coef_z, (y_mse, z_mse) = backward_step(y_next, f_i, d_b, node_fit, h)

        y[:, i] = y_i
        z[:, i] = z_i
        if policy is not None:
            # y_i is affine in the features by construction; refit to store it
            _, coef_y_final, _ = node_fit.fit(y_i)
            policy.store(i, coef_y_final, coef_z)
        if tails is not None:
            tails["y"].push(i, y_i)
            tails["z"].push(i, z_i.reshape(n_paths, m * d))
        diagnostics.append(
            {"i": i, "t": grid.time_at(i), "y_mse": y_mse, "z_mse": z_mse,
             "ill_conditioned": bool(getattr(node_fit, "ill", False))}
        )

    y.setflags(write=False)
    z.setflags(write=False)
    return BackwardSolution(
        y=ProcessEnsemble(grid, y),
        z=ProcessEnsemble(grid, z),
        policy=policy,
        diagnostics=diagnostics,
    )
