"""Instrumental-variables point estimators and robust inference.

Implements the unweighted Wald estimator, the weighted and interacted IV
estimators (equivalent after residualization on the weight), the shrinkage
weight transform, and a heteroscedasticity-robust variance estimator for the
weighted case with the weight itself included among the controls.

All estimators are pure functions over immutable inputs.  Weighted
quantities use the empirical measure reweighted by w, so every estimator is
invariant to positive rescaling of the weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import (
    DegenerateInstrumentError,
    RankError,
    WeakFirstStageError,
    WeightError,
)
from .mathcore import std_normal_quantile, weighted_cov, weighted_mean

__all__ = [
    "IvData",
    "WeightVector",
    "IvEstimate",
    "residualize",
    "wald_iv",
    "weighted_iv",
    "interacted_iv",
    "shrinkage_weights",
    "robust_variance",
    "confidence_interval",
    "FIRST_STAGE_RTOL",
]

# Relative tolerance below which the (weighted) first-stage covariance is
# treated as zero; scaled by sd(d) * sd(z) so the check is unit free.
FIRST_STAGE_RTOL = 1e-12

PROVENANCES = ("oracle", "in_sample", "cross_fitted")


@dataclass
class IvData:
    """One observation set: outcome y, treatment d, binary instrument z.

    ``controls`` (optional, n x m) holds pre-assignment control variables and
    must not include an intercept; one is added internally wherever controls
    enter a regression.
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    controls: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.y = np.asarray(self.y, dtype=float)
        self.d = np.asarray(self.d, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        n = self.y.shape[0]
        if self.y.ndim != 1 or self.d.shape != (n,) or self.z.shape != (n,):
            raise ValueError("y, d, z must be 1-D arrays of equal length")
        zvals = np.unique(self.z)
        if not np.all(np.isin(zvals, (0.0, 1.0))):
            raise DegenerateInstrumentError("instrument must be binary 0/1")
        if zvals.size < 2:
            raise DegenerateInstrumentError("instrument must take both values 0 and 1")
        if self.controls is not None:
            self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
            if self.controls.shape[0] != n:
                if self.controls.shape[1] == n:
                    self.controls = self.controls.T
                else:
                    raise ValueError("controls row count must match n")
            col_sd = self.controls.std(axis=0)
            if np.any(col_sd == 0.0):
                raise ValueError("controls must not contain a constant column (intercept is implicit)")

    @property
    def n(self) -> int:
        return self.y.shape[0]


@dataclass
class WeightVector:
    """Per-observation nonnegative weights plus provenance metadata.

    provenance is one of 'oracle' (analytically specified), 'in_sample', or
    'cross_fitted'; learner_id labels the producing learner or transform;
    fold_of records the cross-fitting fold of each observation (1-based)
    when applicable.
    """

    w: np.ndarray
    provenance: str
    learner_id: str = ""
    fold_of: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.w = np.asarray(self.w, dtype=float)
        if self.w.ndim != 1:
            raise ValueError("weights must be a 1-D array")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}, got {self.provenance!r}")
        if np.any(self.w < 0.0):
            raise WeightError("weights must be nonnegative")
        if not self.w.sum() > 0.0:
            raise WeightError("weights must have a positive sum")
        if self.fold_of is not None:
            self.fold_of = np.asarray(self.fold_of, dtype=np.int64)
            if self.fold_of.shape != self.w.shape:
                raise ValueError("fold_of length must match the weights")

    @property
    def n(self) -> int:
        return self.w.shape[0]


@dataclass(frozen=True)
class IvEstimate:
    """Point estimate with robust standard error and confidence interval.

    first_stage is the weighted first-stage covariance (the Wald
    denominator); p_hat is the weighted instrument mean.
    """

    tau_hat: float
    se: float
    ci: tuple[float, float]
    first_stage: float
    p_hat: float
    n: int

    def __post_init__(self) -> None:
        if self.se < 0:
            raise ValueError("standard error must be nonnegative")
        if not self.ci[0] <= self.tau_hat <= self.ci[1]:
            raise ValueError("point estimate must lie inside its interval")


def _design_with_weight(n: int, w: np.ndarray | None, controls: np.ndarray | None) -> np.ndarray:
    cols = [np.ones(n)]
    if w is not None:
        cols.append(w)
    if controls is not None:
        cols.extend(controls.T)
    return np.column_stack(cols)


def _qr_rank(mat: np.ndarray) -> tuple[np.ndarray, int]:
    """Pivoted economic QR; returns (Q, numerical rank)."""
    q, r, _ = scipy.linalg.qr(mat, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    thresh = max(diag[0] * max(mat.shape) * np.finfo(float).eps, 1e-12) if diag.size else 0.0
    return q, int(np.sum(diag > thresh))


def _span_residuals(design: np.ndarray, targets: list[np.ndarray], n_weight_cols: int) -> list[np.ndarray]:
    """Residualize each target on the column span of ``design``.

    Rank handling: weight columns (positions 1..n_weight_cols) may be
    collinear with the intercept (constant weights) and are then silently
    dropped from the span.  A dependent *control* column is an error, named
    by its 0-based index among the controls.
    """
    q, rank = _qr_rank(design)
    if rank < design.shape[1]:
        # The deficiency is only acceptable if removing the weight columns
        # restores full rank; otherwise a control is genuinely collinear.
        reduced = np.delete(design, np.s_[1 : 1 + n_weight_cols], axis=1)
        if reduced.shape[1] > 0:
            _, rank_reduced = _qr_rank(reduced)
            if rank_reduced < reduced.shape[1]:
                _, r2 = np.linalg.qr(reduced, mode="reduced")
                diag2 = np.abs(np.diag(r2))
                norms = np.maximum(np.linalg.norm(reduced, axis=0), 1e-300)
                j = int(np.argmax(diag2 <= 1e-10 * norms))
                raise RankError(
                    f"control column {j - 1} is collinear with the design", column=j - 1
                )
    q1 = q[:, :rank]
    return [t - q1 @ (q1.T @ t) for t in targets]


def residualize(data: IvData, w: WeightVector) -> IvData:
    """Residualize y and d on an intercept, the weight, and any controls.

    Returns a new IvData whose outcome and treatment are the least-squares
    residuals; the instrument and controls pass through unchanged.  With
    constant weights the weight column is dropped as collinear with the
    intercept, so the operation reduces to (control-adjusted) demeaning.
    """
    if w.n != data.n:
        raise ValueError("weight length must match the data")
    design = _design_with_weight(data.n, w.w, data.controls)
    ry, rd = _span_residuals(design, [data.y, data.d], n_weight_cols=1)
    return IvData(y=ry, d=rd, z=data.z, controls=data.controls)


def _check_first_stage(cov_dz: float, d: np.ndarray, z: np.ndarray) -> None:
    tol = FIRST_STAGE_RTOL * float(np.std(d)) * float(np.std(z))
    if abs(cov_dz) <= tol:
        raise WeakFirstStageError(
            f"first-stage covariance {cov_dz:.3e} is below tolerance {tol:.3e}",
            first_stage=cov_dz,
        )


def confidence_interval(tau_hat: float, se: float, level: float = 0.95) -> tuple[float, float]:
    """Normal-approximation interval tau_hat +/- z_{(1+level)/2} * se."""
    if se < 0:
        raise ValueError("standard error must be nonnegative")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    zq = std_normal_quantile(0.5 * (1.0 + level))
    return (tau_hat - zq * se, tau_hat + zq * se)


def robust_variance(data: IvData, w: WeightVector, tau_hat: float) -> tuple[float, float]:
    """Heteroscedasticity-robust variance for the weighted IV estimator.

    Let eps be the residuals of y - tau_hat * d regressed on an intercept,
    the weight, and any controls.  The estimator is

        V = [ E_n[w^2 eps^2 | z=1] / (p1 * mean(w)^2)
            + E_n[w^2 eps^2 | z=0] / (p0 * mean(w)^2) ] * var_w(z)^2
            / cov_w(z, d)^2

    with p1, p0 and var_w(z) computed under the w-weighted empirical measure
    and the conditional means under the plain empirical measure.  This is
    the standard sandwich for weighted IV after residualization: with
    constant weights it reduces exactly to the textbook robust IV variance.
    Returns (V, se) with se = sqrt(V / n).
    """
    if w.n != data.n:
        raise ValueError("weight length must match the data")
    z = data.z
    if not (np.any(z == 1.0) and np.any(z == 0.0)):
        raise DegenerateInstrumentError("both instrument arms are required")
    wv = w.w
    u = data.y - tau_hat * data.d
    design = _design_with_weight(data.n, wv, data.controls)
    (eps,) = _span_residuals(design, [u], n_weight_cols=1)

    p1 = weighted_mean(z, wv)
    p0 = 1.0 - p1
    if p1 <= 0.0 or p0 <= 0.0:
        raise DegenerateInstrumentError("an instrument arm carries zero total weight")
    var_z = p1 * p0
    mean_w = float(wv.mean())
    wsq_eps2 = (wv * eps) ** 2
    mask1 = z == 1.0
    a1 = float(wsq_eps2[mask1].mean())
    a0 = float(wsq_eps2[~mask1].mean())
    cov_dz = weighted_cov(z, data.d, wv)
    _check_first_stage(cov_dz, data.d, z)
    v_hat = (a1 / (p1 * mean_w**2) + a0 / (p0 * mean_w**2)) * var_z**2 / cov_dz**2
    return v_hat, float(np.sqrt(v_hat / data.n))


def wald_iv(data: IvData, level: float = 0.95) -> IvEstimate:
    """Unweighted Wald/IV estimator cov_n(y, z) / cov_n(d, z)."""
    ones = np.ones(data.n)
    cov_dz = weighted_cov(data.z, data.d, ones)
    _check_first_stage(cov_dz, data.d, data.z)
    cov_yz = weighted_cov(data.y, data.z, ones)
    tau = cov_yz / cov_dz
    w = WeightVector(ones, provenance="oracle", learner_id="constant")
    _, se = robust_variance(data, w, tau)
    return IvEstimate(
        tau_hat=tau,
        se=se,
        ci=confidence_interval(tau, se, level),
        first_stage=cov_dz,
        p_hat=float(data.z.mean()),
        n=data.n,
    )


def weighted_iv(data: IvData, w: WeightVector, level: float = 0.95) -> IvEstimate:
    """Weighted IV estimator cov_w(y, z) / cov_w(d, z).

    Expects ``data`` to have been passed through :func:`residualize` with
    the same weights (the equivalence with :func:`interacted_iv` holds under
    that convention).  Invariant to positive rescaling of w.
    """
    if w.n != data.n:
        raise ValueError("weight length must match the data")
    cov_dz = weighted_cov(data.z, data.d, w.w)
    _check_first_stage(cov_dz, data.d, data.z)
    cov_yz = weighted_cov(data.y, data.z, w.w)
    tau = cov_yz / cov_dz
    _, se = robust_variance(data, w, tau)
    return IvEstimate(
        tau_hat=tau,
        se=se,
        ci=confidence_interval(tau, se, level),
        first_stage=cov_dz,
        p_hat=weighted_mean(data.z, w.w),
        n=data.n,
    )


def interacted_iv(data: IvData, w: WeightVector, level: float = 0.95) -> IvEstimate:
    """IV estimator using the interacted instrument (z - mean(z)) * w.

    After :func:`residualize` this coincides with :func:`weighted_iv` on the
    same data and weights; without residualization the two handle baseline
    variation differently.
    """
    if w.n != data.n:
        raise ValueError("weight length must match the data")
    p_hat = float(data.z.mean())
    h = (data.z - p_hat) * w.w
    ones = np.ones(data.n)
    cov_dh = weighted_cov(data.d, h, ones)
    tol = FIRST_STAGE_RTOL * float(np.std(data.d)) * float(np.std(h))
    if abs(cov_dh) <= tol:
        raise WeakFirstStageError(
            f"interacted first stage {cov_dh:.3e} is below tolerance {tol:.3e}",
            first_stage=cov_dh,
        )
    cov_yh = weighted_cov(data.y, h, ones)
    tau = cov_yh / cov_dh
    _, se = robust_variance(data, w, tau)
    return IvEstimate(
        tau_hat=tau,
        se=se,
        ci=confidence_interval(tau, se, level),
        first_stage=cov_dh,
        p_hat=p_hat,
        n=data.n,
    )


def shrinkage_weights(alpha_hat: WeightVector, lam: float) -> WeightVector:
    """Interpolate between equal weighting (lam=0) and the given weights (lam=1).

    The transform is w_i = (1 - lam) * mean(a^2)/mean(a) + lam * a_i, clipped
    at zero; the constant is the compliance-weighted mean of the weights, so
    lam=0 reproduces plain IV and lam=1 returns the input unchanged.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    a = alpha_hat.w
    mean_a = float(a.mean())
    if mean_a == 0.0:
        raise ValueError("weights have zero mean; shrinkage target undefined")
    const = float((a * a).mean()) / mean_a
    w = np.maximum((1.0 - lam) * const + lam * a, 0.0)
    label = f"shrink(lam={lam:g})" + (f"+{alpha_hat.learner_id}" if alpha_hat.learner_id else "")
    return WeightVector(w, provenance=alpha_hat.provenance, learner_id=label, fold_of=alpha_hat.fold_of)
