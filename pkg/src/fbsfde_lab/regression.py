"""Cross-sectional least squares standing in for conditional expectations.

The default engine projects per-path targets onto polynomial features of the
path history; the tree engine computes exact group means on an enumerated
binomial filtration and is used to validate the regression machinery at desk
scale. Both expose the same per-node fitting interface, so the backward
solver is agnostic to which one it runs on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, IllConditionedWarning, TooFewPaths
from .features import FeatureContext, FeatureMap, FeatureSpec

SV_CUTOFF = 1e-10
RIDGE_FLOOR = 1e-8
MIN_PATHS_FACTOR = 10


@dataclass(frozen=True)
class RegressionResult:
    coefficients: np.ndarray  # (n_features, n_targets)
    fitted: np.ndarray  # (n_paths, n_targets)
    residual_mse: float
    ill_conditioned: bool


def regress_condexp(targets, features, ridge: float = 0.0) -> RegressionResult:
    """Ridge least squares of per-path targets on a feature matrix.

    Minimizes |target - features @ c|^2 + ridge |c|^2 column by column. A
    rank-deficient design (smallest singular value below 1e-10 of the largest)
    is reported through IllConditionedWarning and resolved by raising the
    ridge to the floor and cutting the degenerate singular values, i.e. the
    minimum-norm pseudo-inverse solution.

    Requires at least 10 paths per feature (TooFewPaths otherwise).
    """
    phi = np.asarray(features, dtype=float)
    y = np.asarray(targets, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    if phi.ndim != 2 or y.shape[0] != phi.shape[0]:
        raise DimensionMismatch(f"features {phi.shape} and targets {y.shape} are misaligned")
    n_paths, p = phi.shape
    if n_paths < MIN_PATHS_FACTOR * p:
        raise TooFewPaths(f"{n_paths} paths for {p} features; need at least {MIN_PATHS_FACTOR * p}")
    if not np.all(np.isfinite(phi)):
        raise ValueError("feature matrix contains non-finite entries")

    u, s, vt = np.linalg.svd(phi, full_matrices=False)
    ill = bool(s[-1] <= SV_CUTOFF * s[0])
    if ill:
        warnings.warn(
            f"rank-deficient regression design (sv ratio {s[-1] / s[0]:.2e}); "
            "applying ridge floor and singular-value cutoff",
            IllConditionedWarning,
            stacklevel=2,
        )
        ridge = max(ridge, RIDGE_FLOOR)
    keep = s > SV_CUTOFF * s[0]
    factors = np.where(keep, s / (s * s + ridge), 0.0)
    uty = u.T @ y
    coef = vt.T @ (factors[:, None] * uty)
    fitted = phi @ coef
    mse = float(np.mean((fitted - y) ** 2))
    if squeeze:
        coef, fitted = coef[:, 0], fitted[:, 0]
    return RegressionResult(coef, fitted, mse, ill)


class _LstsqNodeFit:
    """All fits at one node reuse a single factorization of the features.

    Columns are centered and scaled before factorizing, and columns with no
    real cross-sectional variation are dropped from the fit (their
    coefficients are zero in the raw basis). Without this, a near-constant
    feature (e.g. the state before any noise has entered a coupled solve)
    picks up enormous coefficients from in-sample noise and the stored policy
    extrapolates catastrophically on the next iterate's paths. Rank
    deficiency is resolved as in regress_condexp but reported through the
    solver's per-step diagnostics rather than a warning.
    """

    STD_FLOOR = 1e-7

    def __init__(self, phi: np.ndarray, ridge: float):
        n_paths, p = phi.shape
        if n_paths < MIN_PATHS_FACTOR * p:
            raise TooFewPaths(f"{n_paths} paths for {p} features; need at least {MIN_PATHS_FACTOR * p}")
        self.p = p
        means = phi.mean(axis=0)
        stds = phi.std(axis=0)
        active = stds > self.STD_FLOOR * (1.0 + np.abs(means))
        active[0] = False  # the constant column is the centering itself
        self._active = active
        self._means = means
        self._stds = np.where(active, stds, 1.0)
        design = np.empty((n_paths, 1 + int(active.sum())))
        design[:, 0] = 1.0
        design[:, 1:] = (phi[:, active] - means[active]) / self._stds[active]
        self._design = design
        u, s, vt = np.linalg.svd(design, full_matrices=False)
        self.ill = bool(s[-1] <= SV_CUTOFF * s[0]) or not bool(active[1:].all())
        if s[-1] <= SV_CUTOFF * s[0]:
            ridge = max(ridge, RIDGE_FLOOR)
        keep = s > SV_CUTOFF * s[0]
        self._u = u
        self._proj = vt.T * np.where(keep, s / (s * s + ridge), 0.0)[None, :]

    def fit(self, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        """Project targets (paths, k); returns (values, raw-basis coefficients, mse)."""
        flat = targets.reshape(targets.shape[0], -1)
        scaled_coef = self._proj @ (self._u.T @ flat)
        values = self._design @ scaled_coef
        mse = float(np.mean((values - flat) ** 2))
        # map back to the raw feature basis so policies stay affine in it
        coef = np.zeros((self.p, flat.shape[1]))
        slopes = scaled_coef[1:] / self._stds[self._active][:, None]
        coef[self._active] = slopes
        coef[0] = scaled_coef[0] - self._means[self._active] @ slopes
        return values.reshape(targets.shape), coef, mse


class LeastSquaresConditionalExpectation:
    """Pluggable engine: polynomial-in-features projection per node."""

    def __init__(self, feature_spec: FeatureSpec, dims: dict, ridge: float = 0.0):
        self.feature_map = FeatureMap(feature_spec, dims)
        self.ridge = ridge

    def at_node(self, i: int, ctx: FeatureContext) -> _LstsqNodeFit:
        return _LstsqNodeFit(self.feature_map.build(i, ctx), self.ridge)


class _TreeNodeFit:
    """Exact conditional expectation on the enumerated binomial filtration:
    the indicator-basis projection, computed as block means."""

    def __init__(self, n_paths: int, level: int):
        self.block = n_paths >> level
        if self.block < 1 or n_paths % (1 << level):
            raise DimensionMismatch(f"{n_paths} paths do not form a depth-{level} tree level")
        self.ill = False

    def fit(self, targets: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
        flat = targets.reshape(targets.shape[0], -1)
        groups = flat.reshape(-1, self.block, flat.shape[1])
        means = groups.mean(axis=1)
        values = np.repeat(means, self.block, axis=0)
        mse = float(np.mean((values - flat) ** 2))
        return values.reshape(targets.shape), means, mse


class TreeConditionalExpectation:
    """Exact engine for ensembles produced by the binomial driver.

    Requires the ensemble's path order to follow the driver's first-step-major
    binary layout, in which the paths through a tree node are contiguous.
    """

    def __init__(self, n_paths: int):
        if n_paths & (n_paths - 1):
            raise DimensionMismatch(f"tree engine needs a power-of-two path count, got {n_paths}")
        self.n_paths = n_paths

    def at_node(self, i: int, ctx: FeatureContext) -> _TreeNodeFit:
        return _TreeNodeFit(self.n_paths, i)


@dataclass
class RegressionPolicy:
    """Per-node affine maps from features to (Y, Z) values.

    Nodes without stored coefficients evaluate to zero, which doubles as the
    cold-start policy of the coupled solver.
    """

    feature_spec: FeatureSpec
    dims: dict
    m: int
    d: int
    coef_y: dict = field(default_factory=dict)  # i -> (n_features, m)
    coef_z: dict = field(default_factory=dict)  # i -> (n_features, m*d)

    def __post_init__(self):
        self._map = FeatureMap(self.feature_spec, self.dims)

    def store(self, i: int, coef_y: np.ndarray, coef_z: np.ndarray) -> None:
        self.coef_y[i] = coef_y
        self.coef_z[i] = coef_z

    def values_at(self, i: int, ctx: FeatureContext) -> tuple[np.ndarray, np.ndarray]:
        cy = self.coef_y.get(i)
        if cy is None:
            n_paths = ctx.n_paths
            return np.zeros((n_paths, self.m)), np.zeros((n_paths, self.m, self.d))
        phi = self._map.build(i, ctx)
        y = phi @ cy
        z = (phi @ self.coef_z[i]).reshape(-1, self.m, self.d)
        return y, z

    def perturbed(self, rng: np.random.Generator, scale: float) -> "RegressionPolicy":
        """Copy with noise added to every stored coefficient (warm-start study)."""
        out = RegressionPolicy(self.feature_spec, self.dims, self.m, self.d)
        for i, cy in self.coef_y.items():
            out.coef_y[i] = cy + scale * rng.standard_normal(cy.shape)
            cz = self.coef_z[i]
            out.coef_z[i] = cz + scale * rng.standard_normal(cz.shape)
        return out


def zero_policy(feature_spec: FeatureSpec, dims: dict, m: int, d: int) -> RegressionPolicy:
    return RegressionPolicy(feature_spec, dims, m, d)
