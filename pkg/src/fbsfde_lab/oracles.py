"""Independent desk-scale references used to validate the stochastic solvers.

The deterministic integrators here are plain fixed-step RK4 with the memory
or anticipation integral carried as an auxiliary state variable; the binomial
tree computes conditional expectations as exact child averages. None of them
shares code with the Monte Carlo solvers they are used to check.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DepthExceeded, UnsupportedKernel
from .kernel import BrownianEnsemble, TimeGrid, build_time_grid

_MAX_DEPTH = 20


# ---------------------------------------------------------------------------
# deterministic integro-ODE reference
# ---------------------------------------------------------------------------


def _rk4(f, y0: np.ndarray, t0: float, t1: float, n_steps: int) -> np.ndarray:
    """Dense classic RK4 solution, shape (n_steps+1, len(y0))."""
    dt = (t1 - t0) / n_steps
    out = np.empty((n_steps + 1, len(y0)))
    out[0] = y0
    y = np.array(y0, dtype=float)
    t = t0
    for i in range(n_steps):
        k1 = f(t, y)
        k2 = f(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = f(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = f(t + dt, y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t0 + (i + 1) * dt
        out[i + 1] = y
    return out


@dataclass(frozen=True)
class DensePath:
    """Deterministic path sampled at uniform fine resolution on [t0, t1]."""

    t0: float
    t1: float
    values: np.ndarray = field(repr=False)

    @property
    def fine_step(self) -> float:
        return (self.t1 - self.t0) / (len(self.values) - 1)

    def value_at(self, t: float) -> np.ndarray:
        """Value at a time commensurate with the fine step (nearest sample)."""
        idx = int(round((t - self.t0) / self.fine_step))
        idx = min(max(idx, 0), len(self.values) - 1)
        return self.values[idx]


def _segment_integral(rho, M: float, n_dim: int, fn=None, n_quad: int = 4096) -> np.ndarray:
    """int_{-M}^0 fn(r, rho(r)) dr by trapezoid; exact shortcut for constants."""
    if M == 0.0:
        return np.zeros(n_dim)
    if not callable(rho) and fn is None:
        return M * np.broadcast_to(np.asarray(rho, dtype=float), (n_dim,)).copy()
    ts = np.linspace(-M, 0.0, n_quad + 1)
    vals = np.empty((n_quad + 1, n_dim))
    for i, r in enumerate(ts):
        x = rho(r) if callable(rho) else np.asarray(rho, dtype=float)
        vals[i] = fn(r, np.broadcast_to(x, (n_dim,))) if fn is not None else x
    return np.trapz(vals, ts, axis=0)


def integro_ode_rk4(kind, p_slope, p_intercept, rho, M, T, fine_step) -> DensePath:
    """Reference solution of the noise-free memory dynamics on [0, T].

    kind selects the drift functional applied to the running path x:

    - "integral_of_state": x'(t) = p(t, int_{-M}^t x dr)
    - "integral_of_p":     x'(t) = int_{-M}^t p(r, x_r) dr
    - "instantaneous":     x'(t) = p(t, x_t)

    with the affine inner map p(t, u) = p_slope @ u + p_intercept. rho is the
    initial segment on [-M, 0], a constant vector or a callable of time. The
    memory integral is carried as an auxiliary RK4 state, which is an exact
    reduction for these kinds; windowed kernels need the delayed state itself
    and are not supported (UnsupportedKernel).
    """
    slope = np.atleast_2d(np.asarray(p_slope, dtype=float))
    n = slope.shape[0]
    intercept = np.zeros(n) if p_intercept is None else np.broadcast_to(
        np.asarray(p_intercept, dtype=float), (n,)
    )
    x0 = np.broadcast_to(
        np.asarray(rho(0.0) if callable(rho) else rho, dtype=float), (n,)
    ).astype(float)
    n_steps = max(1, int(round(T / fine_step)))

    if kind == "instantaneous":
        def f(t, y):
            return slope @ y + intercept

        dense = _rk4(f, x0, 0.0, T, n_steps)
        return DensePath(0.0, T, dense)

    if kind == "integral_of_state":
        i0 = _segment_integral(rho, M, n)

        def f(t, y):
            x, integ = y[:n], y[n:]
            return np.concatenate([slope @ integ + intercept, x])

        dense = _rk4(f, np.concatenate([x0, i0]), 0.0, T, n_steps)
        return DensePath(0.0, T, dense[:, :n])

    if kind == "integral_of_p":
        j0 = _segment_integral(rho, M, n, fn=lambda r, x: slope @ x + intercept)

        def f(t, y):
            x, accum = y[:n], y[n:]
            return np.concatenate([accum, slope @ x + intercept])

        dense = _rk4(f, np.concatenate([x0, j0]), 0.0, T, n_steps)
        return DensePath(0.0, T, dense[:, :n])

    raise UnsupportedKernel(f"no deterministic reference for kind {kind!r}")


def ode_anticipated_backward(T: float, K: float, fine_step: float) -> DensePath:
    """Reference for the deterministic tail-integral backward equation.

    y is pinned to 1 on [T, T+K] and satisfies y'(t) = -int_t^{T+K} y(r) dr on
    [0, T]. The tail integral S(t) = int_t^{T+K} y dr is carried as auxiliary
    state (S' = -y, S(T) = K) and the pair is integrated backward from T by
    RK4. Returns the dense path of y on [0, T] (index 0 is t=0).
    """
    n_steps = max(1, int(round(T / fine_step)))

    def f(t, state):
        y, s = state
        return np.array([-s, -y])

    # integrate in the backward direction: tau = T - t runs forward
    def g(tau, state):
        return -f(T - tau, state)

    dense = _rk4(g, np.array([1.0, K]), 0.0, T, n_steps)
    # dense[i] is the state at tau = i*dt, i.e. t = T - i*dt; flip to t order
    return DensePath(0.0, T, dense[::-1, :1].copy())


# ---------------------------------------------------------------------------
# binomial tree with exact conditional expectations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TreeGenerator:
    """Scalar tail-integral generator description for the tree induction:
    f = slope_y * E[int y] + slope_z * E[int z] + intercept."""

    slope_y: float = 0.0
    slope_z: float = 0.0
    intercept: float = 0.0
    kind: str = "f1"


@dataclass(frozen=True)
class BinomialDriver:
    """Binary +-sqrt(h) increment tree over [0, T], all 2^depth paths enumerated.

    Path j takes the step-s increment +sqrt(h) when bit (depth-1-s) of j is
    set, so paths sharing their first i increments form contiguous blocks of
    size 2^(depth-i). Every path has probability 2^-depth.
    """

    depth: int
    h: float

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.depth > _MAX_DEPTH:
            raise DepthExceeded(f"depth {self.depth} exceeds table limit {_MAX_DEPTH}")
        if self.h <= 0:
            raise ValueError(f"h must be positive, got {self.h}")

    @property
    def n_paths(self) -> int:
        return 2 ** self.depth

    @property
    def T(self) -> float:
        return self.depth * self.h

    def probabilities(self) -> np.ndarray:
        return np.full(self.n_paths, 2.0 ** (-self.depth))

    def increment_signs(self) -> np.ndarray:
        """Signs (+-1) of each step, shape (n_paths, depth)."""
        j = np.arange(self.n_paths, dtype=np.int64)[:, None]
        bits = (j >> np.arange(self.depth - 1, -1, -1)[None, :]) & 1
        return 2.0 * bits - 1.0

    def grid(self, K: float = 0.0) -> TimeGrid:
        return build_time_grid(M=0.0, T=self.T, K=K, h=self.h)

    def to_brownian(self, K: float = 0.0) -> BrownianEnsemble:
        """Present the path table as a Brownian ensemble on [0, T+K].

        Values on (T, T+K] stay at the time-T value; the extension segment
        carries prescribed data only and is never used as a noise source.
        """
        grid = self.grid(K)
        values = np.zeros((self.n_paths, grid.n_nodes, 1))
        walk = np.cumsum(self.increment_signs() * math.sqrt(self.h), axis=1)
        values[:, 1 : self.depth + 1, 0] = walk
        if grid.n_nodes > self.depth + 1:
            values[:, self.depth + 1 :, 0] = walk[:, -1:]
        values.setflags(write=False)
        return BrownianEnsemble(grid=grid, n_paths=self.n_paths, dim=1, seed=0, values=values)


def binomial_exact_backward(driver: BinomialDriver, generator, terminal_y, terminal_z=None, K: float = 0.0):
    """Exact backward induction on the tree for scalar generators.

    generator is None (f = 0) or a duck-typed object with attributes
    kind in {"zero", "f1"}, slope_y, slope_z, intercept describing the affine
    map applied by the tail-integral generator; terminal_y / terminal_z give
    the prescribed values on [T, T+K] as callables mapping the per-path value
    of B_T to per-path arrays, or constants.

    Returns (Y_levels, Z_levels): Y_levels[i] and Z_levels[i] are arrays over
    the 2^i tree nodes at step i, for i = 0..depth (Z has levels 0..depth-1).
    Conditional expectations are exact child averages and the tail integrals
    use left-endpoint sums with the unknown left value propagated from the
    next node, mirroring the time discretization contract of the solvers.
    """
    depth, h = driver.depth, driver.h
    sqrt_h = math.sqrt(h)
    n_ext = int(round(K / h))  # extension nodes beyond T: T+h .. T+K

    b_T = np.cumsum(driver.increment_signs() * sqrt_h, axis=1)[:, -1]
    # leaf-level node values of B_T: leaves are exactly the paths
    def materialize(spec, default=0.0):
        if spec is None:
            return np.full((driver.n_paths, n_ext + 1), default)
        if callable(spec):
            ext = np.asarray(spec(b_T), dtype=float)
            if ext.ndim == 1:
                ext = np.repeat(ext[:, None], n_ext + 1, axis=1)
            return ext
        return np.full((driver.n_paths, n_ext + 1), float(spec))

    xi = materialize(terminal_y)
    eta = materialize(terminal_z)

    kind = "zero" if generator is None else generator.kind
    if kind not in ("zero", "f1"):
        raise UnsupportedKernel(f"tree induction supports zero/f1 generators, got {kind!r}")
    if kind == "f1":
        gy = float(np.asarray(generator.slope_y).reshape(()))
        gz = float(np.asarray(generator.slope_z).reshape(()))
        gc = float(np.asarray(generator.intercept).reshape(()))

    # level arrays, walked from the leaves to the root one level at a time
    y_levels = [None] * (depth + 1)
    z_levels = [None] * depth
    y_levels[depth] = xi[:, 0].copy()

    # per-node conditional tail sums S(i) = sum_{j>=i} h E[value_j | node_i];
    # at the leaf level these are the pathwise sums over the extension segment
    s_y_next = h * xi[:, :-1].sum(axis=1) if n_ext > 0 else np.zeros(driver.n_paths)
    s_z_next = h * eta[:, :-1].sum(axis=1) if n_ext > 0 else np.zeros(driver.n_paths)

    y_next = y_levels[depth]
    z_next_for_tail = eta[:, 0]
    for i in range(depth - 1, -1, -1):
        # children of node k sit at positions 2k (down) and 2k+1 (up)
        y_dn, y_up = y_next[0::2], y_next[1::2]
        cond_y = 0.5 * (y_dn + y_up)
        z_i = (y_up - y_dn) / (2.0 * sqrt_h)
        cond_sy = 0.5 * (s_y_next[0::2] + s_y_next[1::2])
        cond_sz = 0.5 * (s_z_next[0::2] + s_z_next[1::2])
        if kind == "f1":
            # E[tail | node] with the unknown left endpoint propagated one step
            u = cond_sy + h * cond_y
            v = cond_sz + h * 0.5 * (z_next_for_tail[0::2] + z_next_for_tail[1::2])
            f_i = gy * u + gz * v + gc
        else:
            f_i = 0.0
        y_i = cond_y + h * f_i
        y_levels[i] = y_i
        z_levels[i] = z_i
        # tower property: S(i) = h * value_i + E[S(i+1) | node_i]
        s_y_next = cond_sy + h * y_i
        s_z_next = cond_sz + h * z_i
        z_next_for_tail = z_i
        y_next = y_i
    return y_levels, z_levels


# ---------------------------------------------------------------------------
# fixture emission
# ---------------------------------------------------------------------------


def _input_hash(desc: str) -> str:
    return hashlib.sha256(desc.encode()).hexdigest()[:12]


def emit_fixtures(directory) -> Path:
    """Write the reference-value table as lines of `name, input-hash, value`."""
    rows = []

    def add(name, desc, value):
        rows.append(f"{name}, {_input_hash(desc)}, {value:.17g}")

    cosh = integro_ode_rk4("integral_of_state", 1.0, 0.0, 1.0, M=0.0, T=1.0, fine_step=1e-3)
    add("cosh_growth_at_T", "integral_of_state;slope=1;rho=1;M=0;T=1", float(cosh.value_at(1.0)[0]))

    decay = integro_ode_rk4("instantaneous", -1.0, 0.0, 1.0, M=0.0, T=1.0, fine_step=1e-3)
    add("exp_decay_at_T", "instantaneous;slope=-1;rho=1;T=1", float(decay.value_at(1.0)[0]))

    antic = ode_anticipated_backward(T=1.0, K=0.5, fine_step=1e-3)
    add("anticipated_tail_at_0", "tail_ode;T=1;K=0.5", float(antic.value_at(0.0)[0]))

    drv = BinomialDriver(depth=4, h=0.125)
    y_lv, z_lv = binomial_exact_backward(drv, None, terminal_y=lambda bT: bT)
    add("tree_martingale_root_y", "tree;depth=4;h=0.125;f=0;xi=B_T", float(y_lv[0][0]))
    add("tree_martingale_root_z", "tree;depth=4;h=0.125;f=0;xi=B_T", float(z_lv[0][0]))

    out_dir = Path(directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    out = out_dir / "oracle_fixtures.txt"
    out.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out
