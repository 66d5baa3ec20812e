"""Preset algebra of path functionals for the forward dynamics.

The drift and diffusion read the path history only through one of four
functional shapes: an affine map of the running memory integral, a running
integral of an affine map, an affine map of a trailing-window integral, or an
affine map of the current state. These are composable enough to express every
coefficient family shipped with the package while staying configurable from
flat numeric data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .affine import AffineMap
from .errors import DimensionMismatch, IndexOrder
from .kernel import TimeGrid

KINDS = ("integral_of_state", "integral_of_p", "windowed_integral", "instantaneous")


@dataclass(frozen=True)
class InitialSegment:
    """Deterministic start segment on [-M, 0], one value per memory node."""

    grid: TimeGrid
    values: np.ndarray  # (idx0 + 1, n)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 2 or vals.shape[0] != self.grid.idx0 + 1:
            raise DimensionMismatch(
                f"initial segment must have shape ({self.grid.idx0 + 1}, n), got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("initial segment contains non-finite values")
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "InitialSegment":
        v = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.tile(v, (grid.idx0 + 1, 1)))

    @classmethod
    def from_function(cls, grid: TimeGrid, fn) -> "InitialSegment":
        times = grid.nodes[: grid.idx0 + 1]
        return cls(grid, np.stack([np.atleast_1d(fn(t)) for t in times]))

    @property
    def dim(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class MemoryFunctionalSpec:
    """One functional coordinate of the coefficient presets.

    kind picks how the path history is summarized before the affine inner map
    p is applied; lipschitz is the declared constant and must dominate the
    slope's operator norm.
    """

    kind: str
    p: AffineMap
    lipschitz: float

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown functional kind {self.kind!r}; expected one of {KINDS}")
        if self.lipschitz < 0:
            raise ValueError(f"lipschitz must be >= 0, got {self.lipschitz}")
        norm = self.p.slope_norm()
        if norm > self.lipschitz * (1.0 + 1e-12) + 1e-15:
            raise ValueError(
                f"declared lipschitz {self.lipschitz} is below the slope norm {norm}"
            )
        if self.kind == "integral_of_p" and not self.p.time_constant:
            raise ValueError("integral_of_p needs a time-constant inner map (it is "
                             "evaluated on the memory segment as well)")

    @property
    def out_dim(self) -> int:
        return self.p.out_dim

    @property
    def in_dim(self) -> int:
        return self.p.in_dim

    def scaled(self, c: float) -> "MemoryFunctionalSpec":
        return MemoryFunctionalSpec(self.kind, self.p.scaled(c), abs(c) * self.lipschitz)


def affine_functional(kind: str, slope, intercept=None, lipschitz=None) -> MemoryFunctionalSpec:
    p = AffineMap.build(slope, intercept)
    return MemoryFunctionalSpec(kind, p, p.slope_norm() if lipschitz is None else lipschitz)


@dataclass(frozen=True)
class SfdeCoefficients:
    """Drift and per-column diffusion functionals, with optional affine
    couplings to the backward pair used by the coupled system.

    Couplings map the current (y, z) values into state space; z enters
    flattened row-major as a length m*d vector.
    """

    drift: MemoryFunctionalSpec
    diffusion: tuple
    drift_y: AffineMap | None = None
    drift_z: AffineMap | None = None
    diffusion_y: tuple | None = None
    diffusion_z: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "diffusion", tuple(self.diffusion))
        for name in ("diffusion_y", "diffusion_z"):
            cols = getattr(self, name)
            if cols is not None:
                object.__setattr__(self, name, tuple(cols))
        n = self.drift.out_dim
        for k, col in enumerate(self.diffusion):
            if col.out_dim != n:
                raise DimensionMismatch(
                    f"diffusion column {k} outputs dim {col.out_dim}, drift outputs {n}"
                )
        for name in ("diffusion_y", "diffusion_z"):
            cols = getattr(self, name)
            if cols is not None and len(cols) != self.d:
                raise DimensionMismatch(f"{name} needs one entry per Brownian column")

    @property
    def n(self) -> int:
        return self.drift.out_dim

    @property
    def d(self) -> int:
        return len(self.diffusion)

    @property
    def has_backward_coupling(self) -> bool:
        if self.drift_y is not None or self.drift_z is not None:
            return True
        for cols in (self.diffusion_y, self.diffusion_z):
            if cols is not None and any(c is not None for c in cols):
                return True
        return False

    def lipschitz(self) -> float:
        """Largest declared constant across drift and diffusion functionals."""
        return max([self.drift.lipschitz] + [c.lipschitz for c in self.diffusion])


def memory_integral(values: np.ndarray, grid: TimeGrid, from_idx: int, to_idx: int) -> np.ndarray:
    """Left Riemann sum of path values over nodes [from_idx, to_idx).

    values has shape (n_paths, n_nodes, n); the result is (n_paths, n).
    Exact for constants over the covered interval; an empty interval gives 0.
    """
    if from_idx > to_idx:
        raise IndexOrder(f"from_idx {from_idx} > to_idx {to_idx}")
    if not (0 <= from_idx and to_idx <= grid.n_nodes):
        raise IndexOrder(f"[{from_idx}, {to_idx}) outside the grid's {grid.n_nodes} nodes")
    if from_idx == to_idx:
        return np.zeros((values.shape[0], values.shape[2]))
    return values[:, from_idx:to_idx].sum(axis=1) * grid.h
