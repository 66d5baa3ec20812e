"""Explicit Euler simulation of the memory-dependent forward dynamics.

The drift reads only the path history (plus, in the coupled setting, the
current backward pair through a regression policy), so every step is explicit
and adapted: the state at t_{i+1} is the state at t_i plus drift * h plus
diffusion * Brownian increment, with all functional arguments evaluated at or
before t_i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, NonFiniteState, ZeroDenominator
from .features import FeatureContext
from .functionals import InitialSegment, SfdeCoefficients
from .kernel import BrownianEnsemble, ProcessEnsemble, TimeGrid, WeightedNormSpec, weighted_l2_norm


class _MemoryState:
    """Running left-endpoint integrals of the (possibly frozen) source path.

    Maintains, per path, whatever running quantities the coefficient kinds
    need: the full memory integral I_i = int_{-M}^{t_i}, a trailing window
    integral over [t_i - M, t_i], and running integrals of each inner map for
    the integral_of_p kinds.
    """

    def __init__(self, coeffs: SfdeCoefficients, rho: InitialSegment, grid: TimeGrid, n_paths: int):
        self.grid = grid
        self.h = grid.h
        self.n_mem = grid.idx0
        specs = [coeffs.drift, *coeffs.diffusion]
        kinds = {s.kind for s in specs}
        rho_left = rho.values[:-1]  # left endpoints of the memory segment
        seg = rho_left.sum(axis=0) * grid.h if len(rho_left) else np.zeros(rho.dim)
        # the full memory integral doubles as a regression feature, keep it
        # regardless of which kinds the coefficients use
        self.integral = np.tile(seg, (n_paths, 1))
        self.window = np.tile(seg, (n_paths, 1)) if "windowed_integral" in kinds else None
        self.p_integrals = {}
        for s in specs:
            if s.kind == "integral_of_p" and id(s) not in self.p_integrals:
                if len(rho_left):
                    acc = sum(s.p(0, rho_left[j][None, :]) for j in range(len(rho_left))) * grid.h
                    acc = np.tile(acc[0], (n_paths, 1))
                else:
                    acc = np.zeros((n_paths, s.out_dim))
                self.p_integrals[id(s)] = acc

    def functional_value(self, spec, i: int, source: np.ndarray) -> np.ndarray:
        """Value of one functional at node i for all paths; source holds the
        path the history is read from, filled through node i."""
        fwd = i - self.grid.idx0
        if spec.kind == "instantaneous":
            return spec.p(fwd, source[:, i])
        if spec.kind == "integral_of_state":
            return spec.p(fwd, self.integral)
        if spec.kind == "windowed_integral":
            return spec.p(fwd, self.window)
        return self.p_integrals[id(spec)].copy()

    def push(self, i: int, x_i: np.ndarray, source: np.ndarray, specs) -> None:
        """Advance the running integrals from node i to i+1."""
        self.integral = self.integral + self.h * x_i
        if self.window is not None:
            leaving = source[:, i - self.n_mem] if self.n_mem > 0 else x_i
            self.window = self.window + self.h * (x_i - leaving)
        for s in specs:
            acc = self.p_integrals.get(id(s))
            if acc is not None:
                self.p_integrals[id(s)] = acc + self.h * s.p(0, x_i)


def _materialize_forcing(forcing, grid: TimeGrid, trailing_shape) -> np.ndarray | None:
    if forcing is None:
        return None
    arr = np.asarray(forcing, dtype=float)
    want = (grid.n_forward,) + trailing_shape
    if arr.shape == trailing_shape:
        return np.broadcast_to(arr, want)
    if arr.shape == want:
        return arr
    raise DimensionMismatch(f"forcing must have shape {trailing_shape} or {want}, got {arr.shape}")


def simulate_sfde(
    coeffs: SfdeCoefficients,
    rho: InitialSegment,
    grid: TimeGrid,
    brownian: BrownianEnsemble,
    forcing_drift=None,
    forcing_diffusion=None,
    policy=None,
    _frozen_source: np.ndarray | None = None,
) -> ProcessEnsemble:
    """Euler path ensemble of the forward equation on [-M, T].

    The ensemble equals rho on [-M, 0] bit-exactly and is advanced by
    X_{i+1} = X_i + b_i h + sigma_i dB_i on [0, T]. Optional per-node forcings
    are added to drift and diffusion; a policy object supplies per-path
    (Y_i, Z_i) for the backward couplings. With _frozen_source set, all
    functional arguments are read from that fixed ensemble instead of the
    evolving path (the history-frozen solve map used by the contraction
    diagnostic).

    Raises NonFiniteState (with the step index) if any path blows up.
    """
    n, d = coeffs.n, coeffs.d
    if rho.dim != n:
        raise DimensionMismatch(f"initial segment dim {rho.dim} != coefficient dim {n}")
    if brownian.dim != d:
        raise DimensionMismatch(f"brownian dim {brownian.dim} != diffusion columns {d}")
    if not grid.same_mesh(brownian.grid):
        raise DimensionMismatch("brownian ensemble was sampled on a different grid")
    if coeffs.has_backward_coupling and policy is None:
        raise DimensionMismatch("coefficients couple to (y, z) but no policy was given")

    n_paths = brownian.n_paths
    idx0, idxT, h = grid.idx0, grid.idxT, grid.h
    phi = _materialize_forcing(forcing_drift, grid, (n,))
    psi = _materialize_forcing(forcing_diffusion, grid, (n, d))

    X = np.empty((n_paths, grid.n_nodes, n))
    X[:, : idx0 + 1] = rho.values[None, :, :]
    if grid.n_nodes > idxT + 1:
        X[:, idxT + 1 :] = 0.0  # beyond T the forward state is not defined

    source = _frozen_source if _frozen_source is not None else X
    state = _MemoryState(coeffs, rho, grid, n_paths)
    b_vals = brownian.values
    specs = [coeffs.drift, *coeffs.diffusion]

    for i in range(idx0, idxT):
        fwd = i - idx0
        y_i = z_i = z_flat = None
        if policy is not None:
            ctx = FeatureContext(brownian_values=b_vals, x_values=X, x_memint=state.integral)
            y_i, z_i = policy.values_at(i, ctx)
            z_flat = z_i.reshape(n_paths, -1)

        drift = state.functional_value(coeffs.drift, i, source)
        if coeffs.drift_y is not None and y_i is not None:
            drift = drift + coeffs.drift_y(fwd, y_i)
        if coeffs.drift_z is not None and z_flat is not None:
            drift = drift + coeffs.drift_z(fwd, z_flat)
        if phi is not None:
            drift = drift + phi[fwd]

        dB = b_vals[:, i + 1] - b_vals[:, i]
        incr = drift * h
        for k in range(d):
            col = state.functional_value(coeffs.diffusion[k], i, source)
            if coeffs.diffusion_y is not None and coeffs.diffusion_y[k] is not None:
                col = col + coeffs.diffusion_y[k](fwd, y_i)
            if coeffs.diffusion_z is not None and coeffs.diffusion_z[k] is not None:
                col = col + coeffs.diffusion_z[k](fwd, z_flat)
            if psi is not None:
                col = col + psi[fwd, :, k]
            incr = incr + col * dB[:, k : k + 1]

        X[:, i + 1] = X[:, i] + incr
        if not np.all(np.isfinite(X[:, i + 1])):
            raise NonFiniteState(i + 1)
        state.push(i, source[:, i], source, specs)

    return ProcessEnsemble(grid, X)


@dataclass(frozen=True)
class ContractData:
    """Input/output distances of the history-frozen solve map."""

    norm_in: float
    norm_out: float

    @property
    def ratio(self) -> float:
        return self.norm_out / self.norm_in


def picard_map_diagnostic(
    coeffs: SfdeCoefficients,
    rho: InitialSegment,
    grid: TimeGrid,
    brownian: BrownianEnsemble,
    x_in: ProcessEnsemble,
    x_in_prime: ProcessEnsemble,
    theta: float,
) -> ContractData:
    """Apply the history-frozen solve map to two inputs and report the decay-
    weighted distance ratio ||map(x) - map(x')|| / ||x - x'||.

    Both inputs must agree with rho on [-M, 0]. At theta equal to theta_star
    of the coefficients' Lipschitz constant and a fine mesh, the ratio is
    below 1/sqrt(2) plus discretization slack for the shipped presets.
    """
    if coeffs.has_backward_coupling:
        raise DimensionMismatch("the contraction diagnostic applies to pure path functionals")
    for ens in (x_in, x_in_prime):
        seg = ens.values[:, : grid.idx0 + 1]
        if not np.array_equal(seg, np.broadcast_to(rho.values, seg.shape)):
            raise ValueError("diagnostic inputs must agree with rho on the memory segment")

    out = simulate_sfde(coeffs, rho, grid, brownian, _frozen_source=x_in.values)
    out_prime = simulate_sfde(coeffs, rho, grid, brownian, _frozen_source=x_in_prime.values)

    spec = WeightedNormSpec(theta=theta, sign="decay", t_lo=-grid.M, t_hi=grid.T)
    diff_in = ProcessEnsemble(grid, x_in.values - x_in_prime.values)
    diff_out = ProcessEnsemble(grid, out.values - out_prime.values)
    norm_in = weighted_l2_norm(diff_in, spec)
    if norm_in == 0.0:
        raise ZeroDenominator("diagnostic inputs are identical")
    return ContractData(norm_in=norm_in, norm_out=weighted_l2_norm(diff_out, spec))
