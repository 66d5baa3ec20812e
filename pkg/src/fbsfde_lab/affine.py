"""Affine coefficient pieces, optionally piecewise-constant on the grid.

Every configurable coefficient in the preset algebra (inner maps of the
memory functionals, generator maps, terminal maps, couplings, the quadratic
control matrices) is an affine map with a matrix slope and vector intercept;
either may carry a leading axis indexed by forward node.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch


def _as_piece(data, base_ndim: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(data, dtype=float)
    if arr.ndim == base_ndim:
        return arr, False
    if arr.ndim == base_ndim + 1:
        return arr, True
    raise DimensionMismatch(
        f"expected array of ndim {base_ndim} (constant) or {base_ndim + 1} (per node), got shape {arr.shape}"
    )


@dataclass(frozen=True)
class AffineMap:
    """x -> slope @ x + intercept with slope (out, in) and intercept (out,).

    slope / intercept may carry a leading per-node axis; `at` style accessors
    take the forward node index (0 at time 0). Negative indices are only valid
    for time-constant pieces.
    """

    slope: np.ndarray
    intercept: np.ndarray
    slope_per_node: bool = False
    intercept_per_node: bool = False

    @classmethod
    def build(cls, slope, intercept=None, out_dim=None, in_dim=None) -> "AffineMap":
        s, s_pn = _as_piece(np.atleast_2d(slope) if np.ndim(slope) < 2 else slope, 2)
        out = s.shape[-2] if out_dim is None else out_dim
        if s.shape[-2:] != (out, s.shape[-1]):
            raise DimensionMismatch(f"slope shape {s.shape} inconsistent with out_dim {out}")
        if in_dim is not None and s.shape[-1] != in_dim:
            raise DimensionMismatch(f"slope shape {s.shape} inconsistent with in_dim {in_dim}")
        if intercept is None:
            c, c_pn = np.zeros(out), False
        else:
            c, c_pn = _as_piece(np.atleast_1d(intercept), 1)
            if c.shape[-1] != out:
                raise DimensionMismatch(f"intercept shape {c.shape} inconsistent with out_dim {out}")
        return cls(s, c, s_pn, c_pn)

    @property
    def out_dim(self) -> int:
        return self.slope.shape[-2]

    @property
    def in_dim(self) -> int:
        return self.slope.shape[-1]

    @property
    def time_constant(self) -> bool:
        return not (self.slope_per_node or self.intercept_per_node)

    def slope_at(self, fwd_i: int) -> np.ndarray:
        if self.slope_per_node:
            if fwd_i < 0:
                raise DimensionMismatch("per-node slope evaluated before time 0")
            return self.slope[fwd_i]
        return self.slope

    def intercept_at(self, fwd_i: int) -> np.ndarray:
        if self.intercept_per_node:
            if fwd_i < 0:
                raise DimensionMismatch("per-node intercept evaluated before time 0")
            return self.intercept[fwd_i]
        return self.intercept

    def __call__(self, fwd_i: int, x: np.ndarray) -> np.ndarray:
        """Apply at forward node fwd_i to a batch x of shape (paths, in_dim)."""
        return x @ self.slope_at(fwd_i).T + self.intercept_at(fwd_i)

    def slope_norm(self) -> float:
        """Largest operator 2-norm of the slope over nodes."""
        s = self.slope if self.slope_per_node else self.slope[None]
        return float(max(np.linalg.norm(m, 2) for m in s))

    def scaled(self, c: float) -> "AffineMap":
        return AffineMap(c * self.slope, c * self.intercept, self.slope_per_node, self.intercept_per_node)

    def with_intercept_offset(self, offset) -> "AffineMap":
        off, off_pn = _as_piece(np.atleast_1d(offset), 1)
        if self.intercept_per_node or off_pn:
            base = self.intercept if self.intercept_per_node else self.intercept[None]
            off_b = off if off_pn else off[None]
            return AffineMap(self.slope, base + off_b, self.slope_per_node, True)
        return AffineMap(self.slope, self.intercept + off, self.slope_per_node, False)

    def plus(self, other: "AffineMap") -> "AffineMap":
        if (self.out_dim, self.in_dim) != (other.out_dim, other.in_dim):
            raise DimensionMismatch("cannot add affine maps of different shapes")
        s_pn = self.slope_per_node or other.slope_per_node
        a = self.slope if self.slope_per_node else self.slope[None] if s_pn else self.slope
        b = other.slope if other.slope_per_node else other.slope[None] if s_pn else other.slope
        c_pn = self.intercept_per_node or other.intercept_per_node
        ca = self.intercept if self.intercept_per_node else self.intercept[None] if c_pn else self.intercept
        cb = other.intercept if other.intercept_per_node else other.intercept[None] if c_pn else other.intercept
        return AffineMap(a + b, ca + cb, s_pn, c_pn)


def zero_map(out_dim: int, in_dim: int) -> AffineMap:
    return AffineMap.build(np.zeros((out_dim, in_dim)))


def identity_map(dim: int, scale: float = 1.0) -> AffineMap:
    return AffineMap.build(scale * np.eye(dim))
