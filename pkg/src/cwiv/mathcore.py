"""Deterministic numerical primitives.

Normal distribution functions, positive-semidefinite Cholesky factorization,
multivariate normal sampling, weighted moments, least squares, and
empirical-quantile binning.  Everything here is pure: given the same inputs
(including the same :class:`RngStream`) the outputs are bit-identical on
every run, which is what makes parallel Monte Carlo replications
reproducible.

Dense matrices are plain 2-D ``numpy.ndarray`` objects (row-major); vectors
are 1-D arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox, SeedSequence
from scipy import special

from .errors import FactorizationError, RankError, WeightError

__all__ = [
    "RngStream",
    "std_normal_cdf",
    "std_normal_pdf",
    "std_normal_quantile",
    "cholesky",
    "mvn_sample",
    "weighted_mean",
    "weighted_cov",
    "ols_fit",
    "ecdf_bins",
]


@dataclass(frozen=True)
class RngStream:
    """Descriptor of a reproducible, splittable random stream.

    The underlying generator is Philox (counter-based), keyed through
    ``numpy.random.SeedSequence(seed, spawn_key=path)``.  Streams with
    distinct derivation paths are statistically independent by construction,
    so replications, folds, and trees can each own a substream without any
    shared mutable state.

    Instances are immutable and cheap to send between worker processes;
    mutable generator state is only ever created locally via
    :meth:`generator`.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if any((not isinstance(p, (int, np.integer))) or p < 0 for p in self.path):
            raise ValueError("derivation path entries must be non-negative integers")
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))

    def child(self, *indices: int) -> "RngStream":
        """Derive a substream by extending the path."""
        return RngStream(self.seed, self.path + tuple(int(i) for i in indices))

    def generator(self) -> Generator:
        """Instantiate a fresh generator positioned at the stream's origin."""
        return Generator(Philox(SeedSequence(self.seed, spawn_key=self.path)))


def std_normal_cdf(x):
    """Standard normal CDF, accurate to full double precision.

    Backed by the erfc-based ``scipy.special.ndtr`` (Cody's rational
    approximations), whose absolute error is below 1e-15 -- well inside the
    1e-12 requirement here.  Accepts scalars or arrays.
    """
    return special.ndtr(x)


def std_normal_pdf(x):
    """Standard normal density."""
    x = np.asarray(x, dtype=float)
    return np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)


def std_normal_quantile(p):
    """Inverse standard normal CDF for p in (0, 1).

    Uses ``scipy.special.ndtri`` (Wichura's AS 241 rational approximation),
    which is accurate to ~1e-15 so the cdf/quantile roundtrip holds to
    well below 1e-10.

    Raises
    ------
    ValueError
        If ``p`` is outside the open unit interval.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(~np.isfinite(p_arr)) or np.any(p_arr <= 0.0) or np.any(p_arr >= 1.0):
        raise ValueError(f"quantile argument must lie strictly inside (0, 1), got {p!r}")
    out = special.ndtri(p_arr)
    return float(out) if np.isscalar(p) or p_arr.ndim == 0 else out


def cholesky(sigma: np.ndarray) -> np.ndarray:
    """Lower-triangular factor L with L @ L.T == sigma.

    Tolerates positive *semi*definite input: a pivot that vanishes (relative
    to the matrix scale) produces a zero column in L, provided the remaining
    entries of that column are consistent with rank deficiency.  A genuinely
    negative pivot raises :class:`FactorizationError` naming its index.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {sigma.shape}")
    if not np.allclose(sigma, sigma.T, atol=1e-12, rtol=1e-12):
        raise ValueError("matrix is not symmetric")
    k = sigma.shape[0]
    scale = max(np.max(np.abs(np.diag(sigma))), 1.0)
    tol = 1e-12 * scale
    lower = np.zeros_like(sigma)
    for j in range(k):
        pivot = sigma[j, j] - lower[j, :j] @ lower[j, :j]
        if pivot < -tol:
            raise FactorizationError(
                f"matrix is not positive semidefinite: pivot {j} is {pivot:.3e}",
                pivot=j,
            )
        if pivot <= tol:
            # Semidefinite direction: the rest of the column must vanish too.
            resid = sigma[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]
            if np.any(np.abs(resid) > 1e-8 * scale):
                raise FactorizationError(
                    f"matrix is not positive semidefinite: pivot {j} is "
                    f"{pivot:.3e} but its column is nonzero",
                    pivot=j,
                )
            lower[j, j] = 0.0
            continue
        lower[j, j] = np.sqrt(pivot)
        lower[j + 1 :, j] = (sigma[j + 1 :, j] - lower[j + 1 :, :j] @ lower[j, :j]) / lower[j, j]
    return lower


def mvn_sample(mean: np.ndarray, sigma: np.ndarray, n: int, rng: RngStream) -> np.ndarray:
    """Draw n i.i.d. rows from N(mean, sigma).

    Sampling is mean + Z @ L.T for standard normal Z and the
    positive-semidefinite Cholesky factor L, so degenerate components are
    handled exactly.  Output bits depend only on (rng.seed, rng.path).
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if n < 1:
        raise ValueError("sample size must be at least 1")
    lower = cholesky(sigma)
    if lower.shape[0] != mean.shape[0]:
        raise ValueError("mean and covariance dimensions disagree")
    z = rng.generator().standard_normal((n, mean.shape[0]))
    return mean + z @ lower.T


def weighted_mean(a: np.ndarray, w: np.ndarray) -> float:
    """Mean of ``a`` under weights ``w`` (normalized internally)."""
    a = np.asarray(a, dtype=float)
    w = np.asarray(w, dtype=float)
    total = w.sum()
    if not total > 0.0:
        raise WeightError("weights must have a positive sum")
    return float((w * a).sum() / total)


def weighted_cov(a: np.ndarray, b: np.ndarray, w: np.ndarray) -> float:
    """Weighted empirical covariance of ``a`` and ``b``.

    Computes  sum_i w_i (a_i - m_a)(b_i - m_b) / sum_i w_i  with the weighted
    means m_a, m_b, i.e. the covariance under the empirical measure
    reweighted by w.  Invariant to positive rescaling of the weights.

    Raises
    ------
    WeightError
        If the weights contain a negative entry or sum to zero.
    ValueError
        On length mismatch or fewer than two observations.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    if a.shape != b.shape or a.shape != w.shape or a.ndim != 1:
        raise ValueError("a, b, w must be 1-D arrays of equal length")
    if a.size < 2:
        raise ValueError("need at least two observations")
    if np.any(w < 0.0):
        raise WeightError("weights must be nonnegative")
    total = w.sum()
    if not total > 0.0:
        raise WeightError("weights must have a positive sum")
    wn = w / total
    ma = wn @ a
    mb = wn @ b
    return float(wn @ ((a - ma) * (b - mb)))


def ols_fit(design: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares fit of y on the columns of design via Householder QR.

    Returns (coefficients, residuals).  QR is used instead of the normal
    equations to keep near-collinear controls well conditioned.  A column
    whose R-diagonal collapses relative to its norm triggers a
    :class:`RankError` naming the offending (0-based) column.
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(y, dtype=float)
    if design.ndim != 2:
        raise ValueError("design must be 2-D")
    if design.shape[0] != y.shape[0]:
        raise ValueError("design and response lengths disagree")
    if design.shape[0] < design.shape[1]:
        raise RankError(
            f"more columns ({design.shape[1]}) than rows ({design.shape[0]})",
            column=design.shape[0],
        )
    q, r = np.linalg.qr(design, mode="reduced")
    col_norms = np.linalg.norm(design, axis=0)
    diag = np.abs(np.diag(r))
    bad = diag <= 1e-10 * np.maximum(col_norms, 1e-300)
    if np.any(bad):
        j = int(np.argmax(bad))
        raise RankError(f"design column {j} is collinear with earlier columns", column=j)
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - design @ coef
    return coef, resid


def ecdf_bins(x: np.ndarray, n_bins: int) -> np.ndarray:
    """Assign each observation to one of ``n_bins`` equal-size rank bins.

    Observations are ranked by (value, original index) -- a stable sort -- so
    ties resolve deterministically.  Bin b (1-based) collects ranks r with
    floor(r * n_bins / n) == b - 1, which makes bin sizes differ by at most
    one.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("x must be 1-D")
    n = x.size
    if not 1 <= n_bins <= n:
        raise ValueError(f"n_bins must be in [1, {n}], got {n_bins}")
    order = np.argsort(x, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    return (ranks * n_bins) // n + 1
