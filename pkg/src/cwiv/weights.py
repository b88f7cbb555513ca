"""Compliance-weight learners and cross-fitting.

A weight learner estimates the conditional effect of the instrument on
treatment, alpha(x) = E[d | z=1, x] - E[d | z=0, x], from (x, z, d) only --
the outcome never enters, which is what keeps estimated weights valid.
Learners here: a binned difference-of-means (equivalent to OLS of d on z
interacted with quantile-bin dummies), an honest causal forest, and the
exact oracle for the built-in simulation designs.

``crossfit_weights`` gives each observation the clipped prediction of a
model fitted on the other folds; ``insample_weights`` uses a single fit on
the full sample.  Raw predictions may be negative and are clipped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, runtime_checkable

import numpy as np

from . import _forest
from .dgp import DgpConfig, oracle_alpha_of_x
from .errors import DegenerateFitError
from .estimators import WeightVector
from .mathcore import RngStream, ecdf_bins

__all__ = [
    "FoldAssignment",
    "WeightLearner",
    "FittedWeightModel",
    "assign_folds",
    "clip_nonnegative",
    "crossfit",
    "crossfit_weights",
    "insample_weights",
    "binned_ols_learner",
    "BinnedOlsLearner",
    "honest_forest_learner",
    "HonestForestLearner",
    "ForestParams",
    "oracle_weights",
]


@runtime_checkable
class FittedWeightModel(Protocol):
    learner_id: str

    def predict(self, x_new) -> np.ndarray: ...


@runtime_checkable
class WeightLearner(Protocol):
    learner_id: str

    def fit(self, x, z, d, rng: RngStream | None = None) -> FittedWeightModel: ...


@dataclass(frozen=True)
class FoldAssignment:
    """Balanced random partition into k folds (labels 1..k)."""

    fold_of: np.ndarray
    k: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "fold_of", np.asarray(self.fold_of, dtype=np.int64))
        counts = np.bincount(self.fold_of, minlength=self.k + 1)[1:]
        if counts.size != self.k or counts.max() - counts.min() > 1 or counts.min() < 1:
            raise ValueError("fold sizes must differ by at most one and cover 1..k")


def assign_folds(n: int, k: int, rng: RngStream) -> FoldAssignment:
    """Uniformly random balanced partition of n observations into k folds."""
    if not 2 <= k <= n:
        raise ValueError(f"k must lie in [2, {n}], got {k}")
    perm = rng.generator().permutation(n)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[perm] = np.arange(n) % k + 1
    return FoldAssignment(fold_of=fold_of, k=k)


def clip_nonnegative(raw: np.ndarray) -> np.ndarray:
    """Elementwise positive part."""
    return np.maximum(np.asarray(raw, dtype=float), 0.0)


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


class _BinnedModel:
    """Step function over training-quantile groups of a scalar covariate."""

    def __init__(self, edges: np.ndarray, group_weights: np.ndarray, learner_id: str):
        self.edges = edges
        self.group_weights = group_weights
        self.learner_id = learner_id

    def predict(self, x_new) -> np.ndarray:
        x_new = np.asarray(x_new, dtype=float)
        if x_new.ndim == 2:
            if x_new.shape[1] != 1:
                raise ValueError("binned learner handles a single covariate")
            x_new = x_new[:, 0]
        pos = np.searchsorted(self.edges, x_new, side="right")
        return self.group_weights[pos]


@dataclass(frozen=True)
class BinnedOlsLearner:
    """Per-bin difference of arm means over quantile bins of x.

    Fitting splits the sample into ``n_bins`` equal-size rank bins and, in
    each bin, estimates the arm gap mean(d | z=1) - mean(d | z=0); these are
    the interaction coefficients of the saturated OLS of d on z x bin
    dummies.  A bin missing an arm is merged with its nearest neighbor
    (toward the median bin on ties) and the merged cell re-estimated, so no
    cell is ever undefined.  Prediction maps new x through the training
    quantile edges; out-of-range values go to the extreme bins.
    """

    n_bins: int

    def __post_init__(self) -> None:
        if self.n_bins < 1:
            raise ValueError("n_bins must be at least 1")

    @property
    def learner_id(self) -> str:
        return f"binned(J={self.n_bins})"

    def fit(self, x, z, d, rng: RngStream | None = None) -> _BinnedModel:
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            if x.shape[1] != 1:
                raise ValueError("binned learner handles a single covariate")
            x = x[:, 0]
        z = np.asarray(z, dtype=float)
        d = np.asarray(d, dtype=float)
        n = x.size
        if np.unique(z).size < 2:
            raise DegenerateFitError("training data contains a single instrument arm")
        n_bins = min(self.n_bins, n)
        bins0 = ecdf_bins(x, n_bins) - 1
        is1 = z == 1.0
        count1 = np.bincount(bins0[is1], minlength=n_bins).astype(float)
        count0 = np.bincount(bins0[~is1], minlength=n_bins).astype(float)
        sum1 = np.bincount(bins0[is1], weights=d[is1], minlength=n_bins)
        sum0 = np.bincount(bins0[~is1], weights=d[~is1], minlength=n_bins)

        # Groups as contiguous runs of bins; merge until every group has
        # both arms.  Sizes per original bin differ by <= 1 by construction.
        sizes = np.bincount(bins0, minlength=n_bins)
        starts = np.concatenate(([0], np.cumsum(sizes)))[:-1].tolist()
        groups = [
            {"rank_start": starts[b], "c1": count1[b], "c0": count0[b], "s1": sum1[b], "s0": sum0[b]}
            for b in range(n_bins)
        ]
        while len(groups) > 1:
            offender = next((i for i, g in enumerate(groups) if g["c1"] == 0 or g["c0"] == 0), None)
            if offender is None:
                break
            groups = _merge_group(groups, offender)
        g = groups[0]
        if g["c1"] == 0 or g["c0"] == 0:
            raise DegenerateFitError("an instrument arm is empty in the training data")
        weights = np.array([grp["s1"] / grp["c1"] - grp["s0"] / grp["c0"] for grp in groups])
        x_sorted = np.sort(x, kind="stable")
        edges = np.array([x_sorted[grp["rank_start"]] for grp in groups[1:]])
        return _BinnedModel(edges=edges, group_weights=weights, learner_id=self.learner_id)


def _merge_group(groups: list[dict], i: int) -> list[dict]:
    """Merge group i into an adjacent neighbor, preferring a complete one,
    then the one toward the median group index."""
    if i == 0:
        j = 1
    elif i == len(groups) - 1:
        j = i - 1
    else:
        left_ok = groups[i - 1]["c1"] > 0 and groups[i - 1]["c0"] > 0
        right_ok = groups[i + 1]["c1"] > 0 and groups[i + 1]["c0"] > 0
        if left_ok != right_ok:
            j = i - 1 if left_ok else i + 1
        else:
            center = 0.5 * (len(groups) - 1)
            j = i - 1 if abs(i - 1 - center) < abs(i + 1 - center) else i + 1
    lo, hi = min(i, j), max(i, j)
    merged = {
        "rank_start": groups[lo]["rank_start"],
        "c1": groups[lo]["c1"] + groups[hi]["c1"],
        "c0": groups[lo]["c0"] + groups[hi]["c0"],
        "s1": groups[lo]["s1"] + groups[hi]["s1"],
        "s0": groups[lo]["s0"] + groups[hi]["s0"],
    }
    return groups[:lo] + [merged] + groups[hi + 1 :]


def binned_ols_learner(n_bins: int) -> BinnedOlsLearner:
    return BinnedOlsLearner(n_bins=n_bins)


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    subsample_fraction: float = 0.5
    min_leaf_per_arm: int = 10
    max_depth: int | None = None  # None = unrestricted; 0 = root-only trees
    mtry: int = 0  # 0 = all covariates

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if self.min_leaf_per_arm < 2:
            raise ValueError("min_leaf_per_arm must be at least 2")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be None or nonnegative")
        if self.mtry < 0:
            raise ValueError("mtry must be nonnegative")


@dataclass(frozen=True)
class HonestForestLearner:
    """Honest causal forest for the first-stage effect of z on d."""

    params: ForestParams = field(default_factory=ForestParams)

    @property
    def learner_id(self) -> str:
        p = self.params
        return f"forest(trees={p.n_trees},frac={p.subsample_fraction:g},leaf={p.min_leaf_per_arm})"

    def fit(self, x, z, d, rng: RngStream | None = None) -> _forest.FittedForest:
        x2 = _as_matrix(x)
        z = np.asarray(z, dtype=float)
        d = np.asarray(d, dtype=float)
        if np.unique(z).size < 2:
            raise DegenerateFitError("training data contains a single instrument arm")
        stream = rng if rng is not None else RngStream(0)
        seeds = stream.generator().integers(0, 2**63, size=self.params.n_trees, dtype=np.uint64)
        return _forest.build_forest(
            x2,
            z,
            d,
            n_trees=self.params.n_trees,
            subsample_fraction=self.params.subsample_fraction,
            min_leaf_per_arm=self.params.min_leaf_per_arm,
            max_depth=-1 if self.params.max_depth is None else self.params.max_depth,
            mtry=self.params.mtry,
            seeds=seeds,
            learner_id=self.learner_id,
        )


def honest_forest_learner(
    n_trees: int = 500,
    subsample_fraction: float = 0.5,
    min_leaf_per_arm: int = 10,
    max_depth: int | None = None,
    mtry: int = 0,
) -> HonestForestLearner:
    return HonestForestLearner(
        ForestParams(
            n_trees=n_trees,
            subsample_fraction=subsample_fraction,
            min_leaf_per_arm=min_leaf_per_arm,
            max_depth=max_depth,
            mtry=mtry,
        )
    )


def crossfit(
    x, z, d, learner: WeightLearner, folds: FoldAssignment, rng: RngStream | None = None
) -> tuple[WeightVector, list[FittedWeightModel]]:
    """Cross-fitted weights plus the per-fold models (fold order 1..k).

    Observation i gets the clipped prediction of the model fitted with its
    fold held out; the per-fold fit receives the substream rng.child(j).
    """
    x2 = _as_matrix(x)
    z = np.asarray(z, dtype=float)
    d = np.asarray(d, dtype=float)
    n = x2.shape[0]
    if folds.fold_of.shape[0] != n:
        raise ValueError("fold assignment length must match the data")
    raw = np.empty(n, dtype=float)
    models: list[FittedWeightModel] = []
    for j in range(1, folds.k + 1):
        held = folds.fold_of == j
        train = ~held
        if np.unique(z[train]).size < 2:
            raise DegenerateFitError(f"training complement of fold {j} has a single instrument arm")
        sub_rng = rng.child(j) if rng is not None else None
        model = learner.fit(x2[train], z[train], d[train], rng=sub_rng)
        models.append(model)
        raw[held] = model.predict(x2[held])
    return (
        WeightVector(
            clip_nonnegative(raw),
            provenance="cross_fitted",
            learner_id=learner.learner_id,
            fold_of=folds.fold_of,
        ),
        models,
    )


def crossfit_weights(
    x, z, d, learner: WeightLearner, folds: FoldAssignment, rng: RngStream | None = None
) -> WeightVector:
    return crossfit(x, z, d, learner, folds, rng)[0]


def insample_weights(x, z, d, learner: WeightLearner, rng: RngStream | None = None) -> WeightVector:
    """Clipped predictions of a single fit on the full sample."""
    x2 = _as_matrix(x)
    model = learner.fit(x2, np.asarray(z, dtype=float), np.asarray(d, dtype=float), rng=rng)
    return WeightVector(
        clip_nonnegative(model.predict(x2)),
        provenance="in_sample",
        learner_id=learner.learner_id,
    )


def oracle_weights(x, cfg: DgpConfig) -> WeightVector:
    """Exact conditional compliance alpha(x) for the built-in designs."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        if x.shape[1] != 1:
            raise ValueError("oracle weights are defined for the scalar covariate designs")
        x = x[:, 0]
    return WeightVector(oracle_alpha_of_x(x, cfg), provenance="oracle", learner_id="oracle")
