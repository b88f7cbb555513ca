"""Monte Carlo harness: replication loop, metrics, and table output.

An experiment is a grid of simulation cells (design id x covariate noise)
crossed with estimator specifications.  Each replication draws a dataset,
fits weights as the spec demands, residualizes, estimates, and records the
point estimate with its robust interval; estimator failures (weak first
stage, degenerate weights) are captured as flags rather than aborting the
run.  Every replication derives its own random substream from the master
seed and the (cell, spec, replication) indices, so results are bit-identical
regardless of worker count or scheduling.

Summaries report bias, standard deviation, and RMSE against the population
LATE (population-style moments, so rmse^2 = bias^2 + sd^2 holds exactly),
interval coverage of the LATE, and coverage of each spec's own weighted
estimand: the population compliance-weighted LATE for oracle weights, the
per-replication hybrid estimand for cross-fitted weights, and the
per-replication empirical analogue for in-sample weights.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field, replace
from multiprocessing import get_context

import numpy as np

from .dgp import (
    DgpConfig,
    cf_estimand,
    dgp_preset,
    draw_sample,
    empirical_weighted_estimand,
    oracle_alpha_of_x,
    population_estimands,
)
from .errors import ConfigError, CwivError, SummaryError
from .estimators import IvData, residualize, shrinkage_weights, wald_iv, weighted_iv
from .mathcore import RngStream
from .weights import (
    ForestParams,
    HonestForestLearner,
    assign_folds,
    binned_ols_learner,
    crossfit,
    insample_weights,
    oracle_weights,
)

__all__ = [
    "EstimatorSpec",
    "ExperimentConfig",
    "ReplicationResult",
    "SummaryRow",
    "run_replication",
    "run_experiment",
    "summarize",
    "emit_tables",
    "read_long_table",
    "cell_label",
    "WIDE_METRICS",
]

_CAPTURED_ERRORS = (CwivError, ValueError)


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator in the comparison grid.

    kind: 'unweighted' | 'oracle' | 'binned' | 'forest' | 'shrinkage'.
    mode: weight source, 'none' | 'oracle' | 'in_sample' | 'cross_fitted'.
    binned needs n_bins; shrinkage needs lam and a base spec (oracle-based
    shrinkage only); forest takes optional ForestParams.
    """

    kind: str
    mode: str
    n_bins: int | None = None
    lam: float | None = None
    base: "EstimatorSpec | None" = None
    forest: ForestParams | None = None
    spec_id: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("unweighted", "oracle", "binned", "forest", "shrinkage"):
            raise ConfigError(f"unknown estimator kind {self.kind!r}", field="kind")
        valid_modes = {
            "unweighted": ("none",),
            "oracle": ("oracle",),
            "binned": ("in_sample", "cross_fitted"),
            "forest": ("cross_fitted",),
            "shrinkage": ("oracle",),
        }[self.kind]
        if self.mode not in valid_modes:
            raise ConfigError(f"kind {self.kind!r} does not support mode {self.mode!r}", field="mode")
        if self.kind == "binned" and (self.n_bins is None or self.n_bins < 1):
            raise ConfigError("binned spec needs a positive n_bins", field="n_bins")
        if self.kind == "shrinkage":
            if self.lam is None or not 0.0 <= self.lam <= 1.0:
                raise ConfigError("shrinkage spec needs lam in [0, 1]", field="lam")
            if self.base is None or self.base.kind != "oracle":
                raise ConfigError("shrinkage base must be the oracle spec", field="base")
        if not self.spec_id:
            object.__setattr__(self, "spec_id", self._default_id())

    def _default_id(self) -> str:
        if self.kind == "unweighted":
            return "unweighted"
        if self.kind == "oracle":
            return "oracle"
        if self.kind == "binned":
            return f"binned{self.n_bins}_{'cf' if self.mode == 'cross_fitted' else 'in'}"
        if self.kind == "forest":
            return "forest_cf"
        return f"shrink{self.lam:g}_{self.base.spec_id}"

    @staticmethod
    def unweighted() -> "EstimatorSpec":
        return EstimatorSpec(kind="unweighted", mode="none")

    @staticmethod
    def oracle() -> "EstimatorSpec":
        return EstimatorSpec(kind="oracle", mode="oracle")

    @staticmethod
    def binned(n_bins: int, cross_fit: bool = True) -> "EstimatorSpec":
        return EstimatorSpec(
            kind="binned", mode="cross_fitted" if cross_fit else "in_sample", n_bins=n_bins
        )

    @staticmethod
    def forest_cf(params: ForestParams | None = None) -> "EstimatorSpec":
        return EstimatorSpec(kind="forest", mode="cross_fitted", forest=params or ForestParams())

    @staticmethod
    def shrinkage(lam: float) -> "EstimatorSpec":
        return EstimatorSpec(kind="shrinkage", mode="oracle", lam=lam, base=EstimatorSpec.oracle())


def cell_label(dgp_id: int, sigma_eta: float) -> str:
    return f"dgp{dgp_id}_se{sigma_eta:g}"


@dataclass(frozen=True)
class ExperimentConfig:
    cells: tuple = ((1, 1.0),)
    specs: tuple = (EstimatorSpec.unweighted(), EstimatorSpec.oracle())
    n_reps: int = 1000
    n_obs: int = 1000
    k_folds: int = 5
    level: float = 0.95
    master_seed: int = 20240601
    m_oracle: int = 100_000
    dgp_overrides: tuple = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "cells", tuple((int(d), float(s)) for d, s in self.cells))
        object.__setattr__(self, "specs", tuple(self.specs))
        object.__setattr__(self, "dgp_overrides", tuple(self.dgp_overrides))
        if self.n_reps < 1 or self.n_obs < 1:
            raise ConfigError("n_reps and n_obs must be at least 1", field="n_reps/n_obs")
        if self.k_folds < 2:
            raise ConfigError("k_folds must be at least 2", field="k_folds")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("level must lie in (0, 1)", field="level")
        ids = [s.spec_id for s in self.specs]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"estimator spec ids must be unique, got {ids}", field="specs")
        for dgp_id, sigma_eta in self.cells:
            self.dgp_config(dgp_id, sigma_eta)  # validates

    def dgp_config(self, dgp_id: int, sigma_eta: float) -> DgpConfig:
        return dgp_preset(dgp_id, sigma_eta=sigma_eta, n=self.n_obs, **dict(self.dgp_overrides))


@dataclass(frozen=True)
class ReplicationResult:
    """Outcome of one (cell, spec, replication) work item."""

    cell: str
    spec_id: str
    rep: int
    tau_hat: float | None = None
    se: float | None = None
    ci_lo: float | None = None
    ci_hi: float | None = None
    first_stage: float | None = None
    cf_estimand: float | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        has_estimate = self.tau_hat is not None
        if has_estimate == (self.error is not None):
            raise ValueError("exactly one of estimate fields and error flag must be set")


def _resolve_weights(spec: EstimatorSpec, sample, cfg: DgpConfig, exp: ExperimentConfig, rng: RngStream):
    """Weight vector and per-fold models (cross-fitted specs only)."""
    if spec.kind == "unweighted":
        return None, None
    if spec.kind == "oracle":
        return oracle_weights(sample.x, cfg), None
    if spec.kind == "shrinkage":
        base_w, _ = _resolve_weights(spec.base, sample, cfg, exp, rng)
        return shrinkage_weights(base_w, spec.lam), None
    if spec.kind == "binned":
        learner = binned_ols_learner(spec.n_bins)
        if spec.mode == "in_sample":
            return insample_weights(sample.x, sample.z, sample.d, learner), None
        folds = assign_folds(cfg.n, exp.k_folds, rng.child(1))
        return crossfit(sample.x, sample.z, sample.d, learner, folds, rng=rng.child(2))
    learner = HonestForestLearner(spec.forest or ForestParams())
    folds = assign_folds(cfg.n, exp.k_folds, rng.child(1))
    return crossfit(sample.x, sample.z, sample.d, learner, folds, rng=rng.child(2))


def run_replication(
    cell: tuple[int, float], spec: EstimatorSpec, rep: int, exp: ExperimentConfig, rng: RngStream
) -> ReplicationResult:
    """One draw-fit-estimate cycle; estimator failures become error flags."""
    dgp_id, sigma_eta = cell
    cfg = exp.dgp_config(dgp_id, sigma_eta)
    label = cell_label(dgp_id, sigma_eta)
    sample = draw_sample(cfg, rng.child(0))
    try:
        w, models = _resolve_weights(spec, sample, cfg, exp, rng)
        data = IvData(y=sample.y, d=sample.d, z=sample.z)
        if w is None:
            est = wald_iv(data, level=exp.level)
        else:
            est = weighted_iv(residualize(data, w), w, level=exp.level)
        target = None
        if spec.mode == "cross_fitted":
            target = cf_estimand(models, cfg, exp.m_oracle, rng.child(3))
        elif spec.mode == "in_sample":
            target = empirical_weighted_estimand(sample.x, w.w, cfg)
        return ReplicationResult(
            cell=label,
            spec_id=spec.spec_id,
            rep=rep,
            tau_hat=est.tau_hat,
            se=est.se,
            ci_lo=est.ci[0],
            ci_hi=est.ci[1],
            first_stage=est.first_stage,
            cf_estimand=target,
        )
    except _CAPTURED_ERRORS as err:
        return ReplicationResult(cell=label, spec_id=spec.spec_id, rep=rep, error=type(err).__name__)


def _run_chunk(args) -> list[ReplicationResult]:
    exp, cell_idx, spec_idx, rep_lo, rep_hi = args
    cell = exp.cells[cell_idx]
    spec = exp.specs[spec_idx]
    out = []
    for rep in range(rep_lo, rep_hi):
        rng = RngStream(exp.master_seed, (cell_idx, spec_idx, rep))
        out.append(run_replication(cell, spec, rep, exp, rng))
    return out


def run_experiment(exp: ExperimentConfig, workers: int = 1) -> list[ReplicationResult]:
    """All (cell x spec x replication) results, in deterministic order.

    Replications are independent work items with derived substreams, so the
    result list (and everything downstream) is identical for any worker
    count.
    """
    tasks = []
    chunk = max(1, min(exp.n_reps, 50))
    for cell_idx in range(len(exp.cells)):
        for spec_idx in range(len(exp.specs)):
            for lo in range(0, exp.n_reps, chunk):
                tasks.append((exp, cell_idx, spec_idx, lo, min(lo + chunk, exp.n_reps)))
    if workers <= 1:
        chunks = [_run_chunk(t) for t in tasks]
    else:
        with get_context("fork").Pool(processes=workers) as pool:
            chunks = pool.map(_run_chunk, tasks)
    results = [r for chunk_out in chunks for r in chunk_out]
    order = {(s.spec_id): i for i, s in enumerate(exp.specs)}
    cells = {cell_label(*c): i for i, c in enumerate(exp.cells)}
    results.sort(key=lambda r: (cells[r.cell], order[r.spec_id], r.rep))
    return results


@dataclass(frozen=True)
class SummaryRow:
    """Per (cell, spec) Monte Carlo metrics."""

    dgp: int
    sigma_eta: float
    spec_id: str
    n_used: int
    n_failed: int
    late: float
    bias: float
    sd: float
    rmse: float
    rmse_ratio: float
    coverage_late: float
    coverage_wlate: float
    mean_first_stage: float
    mse_bias_sq: float
    mse_variance: float


def _population_wlate_target(spec: EstimatorSpec, cfg: DgpConfig) -> float | None:
    """Fixed weighted-LATE target, where the spec's weights define one."""
    if spec.kind == "unweighted":
        return population_estimands(cfg, weight_kind="unit").late
    if spec.kind == "oracle":
        return population_estimands(cfg, weight_kind="oracle_alpha").weighted_late
    if spec.kind == "shrinkage":
        # Population shrinkage weight (1-lam) E[a^2]/E[a] + lam a(x); the
        # constant is the alpha-weighted mean of alpha.
        from scipy import integrate

        from .dgp import x_marginal_sd
        from .mathcore import std_normal_pdf

        sd = x_marginal_sd(cfg)
        marg = lambda t: std_normal_pdf(t / sd) / sd
        e_a2 = integrate.quad(
            lambda t: oracle_alpha_of_x(t, cfg) ** 2 * marg(t), -10 * sd, 10 * sd, epsabs=1e-10
        )[0]
        e_a = integrate.quad(
            lambda t: oracle_alpha_of_x(t, cfg) * marg(t), -10 * sd, 10 * sd, epsabs=1e-10
        )[0]
        c_pop = e_a2 / e_a
        lam = spec.lam
        weight_fn = lambda x: (1 - lam) * c_pop + lam * oracle_alpha_of_x(x, cfg)
        return population_estimands(cfg, weight_kind=weight_fn).weighted_late
    return None  # per-replication targets (cross-fitted and in-sample specs)


def summarize(results: list[ReplicationResult], exp: ExperimentConfig) -> list[SummaryRow]:
    """Aggregate replication results into the per-cell metric table.

    Failed replications are excluded from all moments and reported in
    n_failed.  Moments divide by the number of successes (population style),
    making rmse^2 = bias^2 + sd^2 an exact identity.
    """
    by_key: dict[tuple[str, str], list[ReplicationResult]] = {}
    for r in results:
        by_key.setdefault((r.cell, r.spec_id), []).append(r)

    unweighted_rmse: dict[str, float] = {}
    rows: list[SummaryRow] = []
    spec_by_id = {s.spec_id: s for s in exp.specs}
    for cell_idx, (dgp_id, sigma_eta) in enumerate(exp.cells):
        label = cell_label(dgp_id, sigma_eta)
        cfg = exp.dgp_config(dgp_id, sigma_eta)
        late = population_estimands(cfg, weight_kind="unit").late
        for spec in exp.specs:
            key = (label, spec.spec_id)
            if key not in by_key:
                continue
            group = by_key[key]
            ok = [r for r in group if r.error is None]
            n_failed = len(group) - len(ok)
            if len(ok) < 2:
                raise SummaryError(f"cell {label} spec {spec.spec_id}: {len(ok)} successes")
            tau = np.array([r.tau_hat for r in ok])
            lo = np.array([r.ci_lo for r in ok])
            hi = np.array([r.ci_hi for r in ok])
            fs = np.array([r.first_stage for r in ok])
            bias = float(tau.mean() - late)
            sd = float(tau.std())  # population style (divide by count)
            rmse = float(np.sqrt(bias**2 + sd**2))
            coverage_late = float(np.mean((lo <= late) & (late <= hi)))
            pop_target = _population_wlate_target(spec, cfg)
            if pop_target is not None:
                coverage_wlate = float(np.mean((lo <= pop_target) & (pop_target <= hi)))
            else:
                targets = np.array([r.cf_estimand for r in ok], dtype=float)
                coverage_wlate = float(np.mean((lo <= targets) & (targets <= hi)))
            if spec.kind == "unweighted":
                unweighted_rmse[label] = rmse
            base_rmse = unweighted_rmse.get(label, float("nan"))
            if base_rmse == base_rmse and base_rmse == 0.0:
                ratio = 1.0 if rmse == 0.0 else float("inf")
            else:
                ratio = rmse / base_rmse if base_rmse == base_rmse else float("nan")
            rows.append(
                SummaryRow(
                    dgp=dgp_id,
                    sigma_eta=sigma_eta,
                    spec_id=spec.spec_id,
                    n_used=len(ok),
                    n_failed=n_failed,
                    late=late,
                    bias=bias,
                    sd=sd,
                    rmse=rmse,
                    rmse_ratio=rmse / base_rmse if base_rmse == base_rmse else float("nan"),
                    coverage_late=coverage_late,
                    coverage_wlate=coverage_wlate,
                    mean_first_stage=float(fs.mean()),
                    mse_bias_sq=bias**2,
                    mse_variance=sd**2,
                )
            )
    return rows


WIDE_METRICS = (
    "rmse",
    "sd",
    "bias",
    "coverage_late",
    "coverage_wlate",
    "mean_first_stage",
    "rmse_ratio",
)

_LONG_METRICS = WIDE_METRICS + ("mse_bias_sq", "mse_variance", "late", "n_used", "n_failed")


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_tables(summary: list[SummaryRow], fmt: str, out_dir: str) -> list[str]:
    """Write one file per metric plus a combined long-format file.

    csv: wide tables with estimator rows and one column per cell, plus
    results_long.csv with columns (dgp, sigma_eta, estimator, metric,
    value).  json: the same content as {metric: {estimator: {cell: value}}}
    objects plus results_long.json.  Values round-trip losslessly through
    :func:`read_long_table`.
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    os.makedirs(out_dir, exist_ok=True)
    cells = sorted({(r.dgp, r.sigma_eta) for r in summary})
    cell_names = [cell_label(d, s) for d, s in cells]
    spec_ids = list(dict.fromkeys(r.spec_id for r in summary))
    lookup = {(cell_label(r.dgp, r.sigma_eta), r.spec_id): r for r in summary}
    paths = []

    for metric in WIDE_METRICS:
        if fmt == "csv":
            path = os.path.join(out_dir, f"{metric}.csv")
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["estimator"] + cell_names)
                for sid in spec_ids:
                    row = [sid]
                    for name in cell_names:
                        r = lookup.get((name, sid))
                        row.append(_fmt(getattr(r, metric)) if r is not None else "")
                    writer.writerow(row)
        else:
            path = os.path.join(out_dir, f"{metric}.json")
            payload = {
                sid: {
                    name: getattr(lookup[(name, sid)], metric)
                    for name in cell_names
                    if (name, sid) in lookup
                }
                for sid in spec_ids
            }
            with open(path, "w") as fh:
                json.dump(payload, fh, indent=2, sort_keys=True)
        paths.append(path)

    long_rows = []
    for r in summary:
        for metric in _LONG_METRICS:
            long_rows.append(
                {
                    "dgp": r.dgp,
                    "sigma_eta": r.sigma_eta,
                    "estimator": r.spec_id,
                    "metric": metric,
                    "value": float(getattr(r, metric)),
                }
            )
    if fmt == "csv":
        path = os.path.join(out_dir, "results_long.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["dgp", "sigma_eta", "estimator", "metric", "value"])
            writer.writeheader()
            for row in long_rows:
                writer.writerow({**row, "value": _fmt(row["value"]), "sigma_eta": repr(row["sigma_eta"])})
    else:
        path = os.path.join(out_dir, "results_long.json")
        with open(path, "w") as fh:
            json.dump(long_rows, fh, indent=2)
    paths.append(path)
    return paths


def read_long_table(path: str) -> list[dict]:
    """Read a long-format results file back into records (lossless)."""
    if path.endswith(".json"):
        with open(path) as fh:
            return json.load(fh)
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                {
                    "dgp": int(row["dgp"]),
                    "sigma_eta": float(row["sigma_eta"]),
                    "estimator": row["estimator"],
                    "metric": row["metric"],
                    "value": float(row["value"]),
                }
            )
    return out
