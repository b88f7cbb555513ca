"""Weighted IV for instruments with finite support beyond the binary case.

A discrete instrument with J+1 support points admits J orthonormal score
functions g_j (mean zero, unit variance, mutually orthogonal under the
instrument distribution); every valid covariate-augmented instrument is a
combination sum_j g_j(z) w_j(x).  The combined estimator below aggregates
the per-score weighted IV ratios with first-stage covariances as mixing
weights, which collapses to a ratio of summed covariances.

The basis is built from nested centered indicators 1{z=z_j} -
P(Z=z_j | Z<=z_j) 1{z<=z_j}, orthonormalized by (twice-iterated)
Gram-Schmidt in the probs inner product; it depends only on the instrument
distribution.  For a binary instrument the single score is the closed form
(1{z=z_1} - p) / sqrt(p(1-p)).

No standard error is reported for the combined estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import WeakFirstStageError, WeightError
from .estimators import FIRST_STAGE_RTOL, _span_residuals
from .mathcore import weighted_cov

__all__ = [
    "FiniteSupportInstrument",
    "OrthonormalBasis",
    "MultiIvEstimate",
    "build_orthonormal_basis",
    "residualize_on_weights",
    "generalized_weighted_iv",
]


@dataclass(frozen=True)
class FiniteSupportInstrument:
    """Distinct support values (ascending) with strictly positive probabilities."""

    support: np.ndarray
    probs: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "support", np.asarray(self.support, dtype=float))
        object.__setattr__(self, "probs", np.asarray(self.probs, dtype=float))
        if self.support.ndim != 1 or self.support.shape != self.probs.shape:
            raise ValueError("support and probs must be 1-D arrays of equal length")
        if self.support.size < 2:
            raise ValueError("instrument needs at least two support points")
        if np.any(np.diff(self.support) <= 0):
            raise ValueError("support must be strictly increasing")
        if np.any(self.probs <= 0.0):
            raise ValueError("all support probabilities must be strictly positive")
        if abs(self.probs.sum() - 1.0) > 1e-12:
            raise ValueError("probabilities must sum to one")

    @classmethod
    def from_data(cls, z: np.ndarray) -> "FiniteSupportInstrument":
        values, counts = np.unique(np.asarray(z, dtype=float), return_counts=True)
        return cls(support=values, probs=counts / counts.sum())


@dataclass(frozen=True)
class OrthonormalBasis:
    """Table of score values: table[i, j] = g_{j+1}(support[i])."""

    support: np.ndarray
    probs: np.ndarray
    table: np.ndarray

    @property
    def n_scores(self) -> int:
        return self.table.shape[1]

    def evaluate(self, z: np.ndarray, j: int) -> np.ndarray:
        """Values of score j (1-based) at the data points z."""
        if not 1 <= j <= self.n_scores:
            raise ValueError(f"score index must lie in [1, {self.n_scores}]")
        z = np.asarray(z, dtype=float)
        pos = np.searchsorted(self.support, z)
        pos = np.clip(pos, 0, self.support.size - 1)
        if not np.allclose(self.support[pos], z, rtol=0.0, atol=1e-9):
            bad = z[~np.isclose(self.support[pos], z, rtol=0.0, atol=1e-9)][0]
            raise ValueError(f"instrument value {bad!r} is not in the declared support")
        return self.table[pos, j - 1]


def build_orthonormal_basis(inst: FiniteSupportInstrument) -> OrthonormalBasis:
    """Orthonormal mean-zero scores of the instrument distribution.

    Binary support uses the closed form directly; larger supports start from
    the nested centered indicators and re-orthogonalize once for accuracy to
    well below 1e-10 in the orthonormality identities.
    """
    support, probs = inst.support, inst.probs
    n_support = support.size
    n_scores = n_support - 1
    if n_scores == 1:
        p = probs[1]
        g = (np.array([0.0, 1.0]) - p) / np.sqrt(p * (1.0 - p))
        return OrthonormalBasis(support=support, probs=probs, table=g[:, None])

    cum = np.cumsum(probs)
    basis = np.empty((n_support, n_scores))
    for j in range(1, n_support):
        v = np.zeros(n_support)
        v[j] = 1.0
        v[: j + 1] -= probs[j] / cum[j]
        basis[:, j - 1] = v

    def inner(a, b):
        return float(np.sum(probs * a * b))

    for _ in range(2):  # twice-iterated Gram-Schmidt
        for j in range(n_scores):
            v = basis[:, j]
            for k in range(j):
                v = v - inner(v, basis[:, k]) * basis[:, k]
            v = v - inner(v, np.ones(n_support)) * np.ones(n_support)
            norm = np.sqrt(inner(v, v))
            if norm < 1e-12:
                raise ValueError(f"degenerate basis direction at score {j + 1}")
            basis[:, j] = v / norm
    return OrthonormalBasis(support=support, probs=probs, table=basis)


def residualize_on_weights(
    y: np.ndarray, d: np.ndarray, weight_list: list[np.ndarray], controls: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """OLS-residualize y and d on an intercept, all weight vectors, and controls."""
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    cols = [np.ones(y.shape[0])] + [np.asarray(w, dtype=float) for w in weight_list]
    if controls is not None:
        cols.extend(np.atleast_2d(np.asarray(controls, dtype=float)).T)
    design = np.column_stack(cols)
    ry, rd = _span_residuals(design, [y, d], n_weight_cols=len(weight_list))
    return ry, rd


@dataclass(frozen=True)
class MultiIvEstimate:
    """Combined estimate for a finitely supported instrument (no SE available)."""

    tau_hat: float
    first_stage: float
    per_score_first_stage: tuple[float, ...]
    n: int


def generalized_weighted_iv(
    y: np.ndarray,
    d: np.ndarray,
    z: np.ndarray,
    weight_fns: list[np.ndarray],
    basis: OrthonormalBasis,
) -> MultiIvEstimate:
    """First-stage-weighted combination of per-score weighted IV estimators.

    ``weight_fns`` holds one nonnegative weight vector per score, evaluated
    at the observations; y and d are expected to be residualized on an
    intercept and all weight vectors (see :func:`residualize_on_weights`).
    The estimate is sum_j cov_{w_j}(y, g_j(z)) / sum_j cov_{w_j}(d, g_j(z)),
    a convex combination of the per-score ratios with first-stage weights.
    """
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    z = np.asarray(z, dtype=float)
    if len(weight_fns) != basis.n_scores:
        raise ValueError(f"need {basis.n_scores} weight vectors, got {len(weight_fns)}")
    num = 0.0
    den = 0.0
    per_score = []
    for j in range(1, basis.n_scores + 1):
        w = np.asarray(weight_fns[j - 1], dtype=float)
        if np.any(w < 0) or not w.sum() > 0:
            raise WeightError(f"weight vector {j} must be nonnegative with positive sum")
        gz = basis.evaluate(z, j)
        cov_d = weighted_cov(d, gz, w)
        cov_y = weighted_cov(y, gz, w)
        per_score.append(cov_d)
        num += cov_y
        den += cov_d
    tol = FIRST_STAGE_RTOL * float(np.std(d)) * max(float(np.std(basis.evaluate(z, j))) for j in range(1, basis.n_scores + 1))
    if abs(den) <= tol:
        raise WeakFirstStageError(f"combined first stage {den:.3e} is below tolerance", first_stage=den)
    return MultiIvEstimate(
        tau_hat=num / den,
        first_stage=den,
        per_score_first_stage=tuple(per_score),
        n=y.shape[0],
    )
