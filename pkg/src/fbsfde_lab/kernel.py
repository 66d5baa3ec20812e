"""Time discretization, Brownian path ensembles and weighted L2 norms.

Times are represented internally as integer step counts times h, so the
segment boundaries 0 and T are hit exactly and segment indexing never relies
on float comparisons. All time integrals in the package use left-endpoint
quadrature: the integrand value at t_i is measurable w.r.t. the path history
up to t_i, which is the discretization consistent with Ito integrals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NegativeLipschitz, NonDivisibleHorizon, RangeMismatch
from .runtime import run_chunked

_REL_TOL = 1e-9


def _steps_of(horizon: float, h: float, name: str) -> int:
    ratio = horizon / h
    n = int(round(ratio))
    if abs(ratio - n) > _REL_TOL * max(1.0, abs(ratio)):
        raise NonDivisibleHorizon(
            f"{name}={horizon} is not an integer multiple of h={h} (ratio {ratio})"
        )
    return n


@dataclass(frozen=True)
class TimeGrid:
    """Uniform mesh over [-M, T+K] with marked segments [-M,0], [0,T], (T,T+K].

    steps holds the integer step count of every node (node time = step * h);
    idx0 and idxT are the array indices of times 0 and T.
    """

    M: float
    T: float
    K: float
    h: float
    steps: np.ndarray = field(repr=False)
    idx0: int
    idxT: int

    @property
    def nodes(self) -> np.ndarray:
        return self.steps * self.h

    @property
    def n_nodes(self) -> int:
        return len(self.steps)

    @property
    def n_memory(self) -> int:
        return self.idx0

    @property
    def n_forward(self) -> int:
        return self.idxT - self.idx0

    def time_at(self, i: int) -> float:
        return self.steps[i] * self.h

    def index_at(self, t: float) -> int:
        """Array index of the node at time t; RangeMismatch if t is not a node."""
        ratio = t / self.h
        s = int(round(ratio))
        if abs(ratio - s) > _REL_TOL * max(1.0, abs(ratio)):
            raise RangeMismatch(f"time {t} is not a node of the grid (h={self.h})")
        i = s - int(self.steps[0])
        if i < 0 or i >= self.n_nodes:
            raise RangeMismatch(f"time {t} lies outside the grid [{-self.M}, {self.T + self.K}]")
        return i

    def same_mesh(self, other: "TimeGrid") -> bool:
        return (
            self.h == other.h
            and self.n_nodes == other.n_nodes
            and int(self.steps[0]) == int(other.steps[0])
        )


def build_time_grid(M: float, T: float, K: float, h: float) -> TimeGrid:
    """Build the uniform grid covering [-M, T+K].

    M, T, K must be integer multiples of h within relative tolerance 1e-9,
    otherwise NonDivisibleHorizon is raised.
    """
    if T <= 0:
        raise ValueError(f"terminal time must be positive, got T={T}")
    if M < 0 or K < 0:
        raise ValueError(f"memory and anticipation horizons must be >= 0, got M={M}, K={K}")
    if h <= 0:
        raise ValueError(f"step size must be positive, got h={h}")
    n_mem = _steps_of(M, h, "M")
    n_fwd = _steps_of(T, h, "T")
    n_ant = _steps_of(K, h, "K")
    steps = np.arange(-n_mem, n_fwd + n_ant + 1, dtype=np.int64)
    steps.setflags(write=False)
    return TimeGrid(M=M, T=T, K=K, h=h, steps=steps, idx0=n_mem, idxT=n_mem + n_fwd)


@dataclass(frozen=True)
class ProcessEnsemble:
    """Sampled process values, shape (n_paths, n_nodes, *component_shape)."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        if self.values.shape[1] != self.grid.n_nodes:
            raise RangeMismatch(
                f"ensemble has {self.values.shape[1]} time slices, grid has {self.grid.n_nodes} nodes"
            )

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def component_shape(self) -> tuple:
        return self.values.shape[2:]


@dataclass(frozen=True)
class BrownianEnsemble:
    """Brownian motion sampled on the grid; zero at every node <= 0.

    Path j is drawn from a counter-based substream keyed by (seed, j), so the
    ensemble is bit-identical no matter how paths are chunked across workers.
    """

    grid: TimeGrid
    n_paths: int
    dim: int
    seed: int
    values: np.ndarray = field(repr=False)

    def increments(self) -> np.ndarray:
        """Increments over [t_i, t_{i+1}], shape (n_paths, n_nodes-1, dim)."""
        return np.diff(self.values, axis=1)

    def as_ensemble(self) -> ProcessEnsemble:
        return ProcessEnsemble(self.grid, self.values)


def sample_brownian(grid: TimeGrid, n_paths: int, d: int, seed: int) -> BrownianEnsemble:
    """Sample n_paths d-dimensional Brownian paths on the grid.

    Increments are N(0, h) from t=0 onward; the path is identically zero on
    the memory segment. Regenerating with the same (seed, n_paths, grid) is
    bit-identical and path j depends only on (seed, j).
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1, got {n_paths}")
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    n_random = grid.n_nodes - 1 - grid.idx0  # steps from 0 to T+K
    values = np.zeros((n_paths, grid.n_nodes, d))
    sqrt_h = math.sqrt(grid.h)
    key_hi = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)

    def fill(start, stop):
        for j in range(start, stop):
            bitgen = np.random.Philox(key=np.array([key_hi, j], dtype=np.uint64))
            inc = np.random.Generator(bitgen).standard_normal((n_random, d))
            np.cumsum(inc, axis=0, out=inc)
            values[j, grid.idx0 + 1 :, :] = inc * sqrt_h

    run_chunked(fill, n_paths)
    values.setflags(write=False)
    return BrownianEnsemble(grid=grid, n_paths=n_paths, dim=d, seed=int(seed), values=values)


@dataclass(frozen=True)
class WeightedNormSpec:
    """Exponentially weighted L2(paths x time) norm over a grid sub-interval.

    sign "decay" uses weight exp(-theta*s), "growth" uses exp(+theta*s).
    """

    theta: float
    sign: str = "decay"
    t_lo: float | None = None
    t_hi: float | None = None

    def __post_init__(self):
        if self.theta < 0:
            raise ValueError(f"theta must be >= 0, got {self.theta}")
        if self.sign not in ("decay", "growth"):
            raise ValueError(f"sign must be 'decay' or 'growth', got {self.sign!r}")


def weighted_l2_norm(ensemble: ProcessEnsemble, spec: WeightedNormSpec) -> float:
    """(E int_range w(s) |v_s|^2 ds)^(1/2) with left-endpoint quadrature.

    With theta=0 this is the plain discrete L2 norm over paths and the range.
    Raises RangeMismatch if the range endpoints are not nodes of the grid.
    """
    grid = ensemble.grid
    t_lo = -grid.M if spec.t_lo is None else spec.t_lo
    t_hi = grid.T + grid.K if spec.t_hi is None else spec.t_hi
    i_lo = grid.index_at(t_lo)
    i_hi = grid.index_at(t_hi)
    if i_lo > i_hi:
        raise RangeMismatch(f"norm range [{t_lo}, {t_hi}] is reversed")
    if i_lo == i_hi:
        return 0.0
    times = grid.nodes[i_lo:i_hi]
    sgn = -1.0 if spec.sign == "decay" else 1.0
    weights = np.exp(sgn * spec.theta * times)
    sq = ensemble.values[:, i_lo:i_hi]
    sq = (sq * sq).reshape(sq.shape[0], sq.shape[1], -1).sum(axis=2)
    per_path = sq @ weights * grid.h
    return float(np.sqrt(per_path.mean()))


def theta_star(L: float) -> float:
    """Weight exponent 2L^2 + 2L*sqrt(L^2+2) making the history-frozen solve map
    a strict contraction in the decay-weighted norm."""
    if L < 0:
        raise NegativeLipschitz(f"Lipschitz constant must be >= 0, got {L}")
    return 2.0 * L * L + 2.0 * L * math.sqrt(L * L + 2.0)
