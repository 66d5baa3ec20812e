"""Cross-sectional regression features built from the path history at a node.

A feature matrix always starts with a constant column, followed by the
requested source components and their powers up to the configured degree.
Every feature is a function of the history up to the node, so policies fitted
on them are adapted by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch

SOURCES = ("state", "memory_integral", "brownian")


@dataclass(frozen=True)
class FeatureSpec:
    """Which history summaries enter the basis and up to which power."""

    degree: int = 1
    sources: tuple = ("state",)

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError(f"degree must be >= 1, got {self.degree}")
        object.__setattr__(self, "sources", tuple(self.sources))
        for s in self.sources:
            if s not in SOURCES:
                raise ValueError(f"unknown feature source {s!r}; expected subset of {SOURCES}")
        if not self.sources:
            raise ValueError("at least one feature source is required")


@dataclass
class FeatureContext:
    """Arrays a feature matrix can be built from at a given node.

    Each source is stored either as a full (paths, nodes, dim) array or, in
    the streaming forward loop, as the current (paths, dim) slice only.
    """

    brownian_values: np.ndarray | None = None
    x_values: np.ndarray | None = None
    x_memint: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        for arr in (self.brownian_values, self.x_values, self.x_memint):
            if arr is not None:
                return arr.shape[0]
        raise DimensionMismatch("empty feature context")

    @staticmethod
    def _at(arr: np.ndarray | None, i: int, source: str) -> np.ndarray:
        if arr is None:
            raise DimensionMismatch(f"feature source {source!r} has no data")
        return arr[:, i, :] if arr.ndim == 3 else arr

    def state_at(self, i: int) -> np.ndarray:
        return self._at(self.x_values, i, "state")

    def memint_at(self, i: int) -> np.ndarray:
        return self._at(self.x_memint, i, "memory_integral")

    def brownian_at(self, i: int) -> np.ndarray:
        return self._at(self.brownian_values, i, "brownian")


class FeatureMap:
    """Materializes (paths, n_features) matrices for a fixed source layout."""

    def __init__(self, spec: FeatureSpec, dims: dict):
        self.spec = spec
        self.dims = dict(dims)
        missing = [s for s in spec.sources if s not in self.dims]
        if missing:
            raise DimensionMismatch(f"no dimensions known for feature sources {missing}")
        self.base_dim = sum(self.dims[s] for s in spec.sources)
        self.n_features = 1 + self.base_dim * spec.degree
        # column offsets of the degree-1 block per source, used to read raw
        # state components straight out of a feature matrix
        self._offsets = {}
        off = 1
        for s in spec.sources:
            self._offsets[s] = off
            off += self.dims[s]

    def columns_of(self, source: str) -> slice:
        off = self._offsets[source]
        return slice(off, off + self.dims[source])

    def build(self, i: int, ctx: FeatureContext) -> np.ndarray:
        blocks = []
        for s in self.spec.sources:
            if s == "brownian":
                blocks.append(ctx.brownian_at(i))
            elif s == "state":
                blocks.append(ctx.state_at(i))
            else:
                blocks.append(ctx.memint_at(i))
        base = np.concatenate(blocks, axis=1)
        n_paths = base.shape[0]
        out = np.empty((n_paths, self.n_features))
        out[:, 0] = 1.0
        out[:, 1 : 1 + self.base_dim] = base
        power = base
        for k in range(2, self.spec.degree + 1):
            power = power * base
            lo = 1 + (k - 1) * self.base_dim
            out[:, lo : lo + self.base_dim] = power
        return out
