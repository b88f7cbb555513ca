import numpy as np
import pytest

from cwiv.errors import ConfigError, SummaryError
from cwiv.mathcore import RngStream
from cwiv.montecarlo import (
    EstimatorSpec,
    ExperimentConfig,
    ReplicationResult,
    cell_label,
    emit_tables,
    read_long_table,
    run_experiment,
    run_replication,
    summarize,
)


def small_config(**kw):
    defaults = dict(
        cells=((1, 0.5), (2, 1.0)),
        specs=(
            EstimatorSpec.unweighted(),
            EstimatorSpec.oracle(),
            EstimatorSpec.binned(4, cross_fit=True),
        ),
        n_reps=6,
        n_obs=300,
        k_folds=3,
        master_seed=11,
        m_oracle=100_000,
    )
    defaults.update(kw)
    return ExperimentConfig(**defaults)


class TestSpecs:
    def test_default_ids(self):
        assert EstimatorSpec.unweighted().spec_id == "unweighted"
        assert EstimatorSpec.binned(50, cross_fit=False).spec_id == "binned50_in"
        assert EstimatorSpec.binned(10).spec_id == "binned10_cf"
        assert EstimatorSpec.forest_cf().spec_id == "forest_cf"
        assert EstimatorSpec.shrinkage(0.2).spec_id == "shrink0.2_oracle"

    def test_invalid_kind(self):
        with pytest.raises(ConfigError):
            EstimatorSpec(kind="magic", mode="none")

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(specs=(EstimatorSpec.oracle(), EstimatorSpec.oracle()))

    def test_result_invariant(self):
        with pytest.raises(ValueError):
            ReplicationResult(cell="dgp1_se1", spec_id="oracle", rep=0)
        with pytest.raises(ValueError):
            ReplicationResult(cell="dgp1_se1", spec_id="oracle", rep=0, tau_hat=1.0, error="X")


class TestRunReplication:
    def test_unweighted_first_stage_scale(self):
        exp = small_config(n_obs=4000)
        res = run_replication((1, 0.5), EstimatorSpec.unweighted(), 0, exp, RngStream(1, (0,)))
        assert res.error is None
        # cov(d, z) concentrates near complier_share * var(z) = 0.25 * 0.25.
        assert res.first_stage == pytest.approx(0.0625, abs=0.01)

    def test_oracle_replication_has_no_target(self):
        exp = small_config()
        res = run_replication((1, 0.5), EstimatorSpec.oracle(), 0, exp, RngStream(1, (1,)))
        assert res.error is None and res.cf_estimand is None

    def test_crossfit_replication_has_target(self):
        exp = small_config()
        res = run_replication((2, 1.0), EstimatorSpec.binned(4), 0, exp, RngStream(1, (2,)))
        assert res.error is None
        assert res.cf_estimand is not None and np.isfinite(res.cf_estimand)

    def test_deterministic(self):
        exp = small_config()
        a = run_replication((1, 0.5), EstimatorSpec.binned(4), 3, exp, RngStream(9, (5,)))
        b = run_replication((1, 0.5), EstimatorSpec.binned(4), 3, exp, RngStream(9, (5,)))
        assert a == b

    def test_insample_target_recorded(self):
        exp = small_config()
        res = run_replication(
            (2, 1.0), EstimatorSpec.binned(4, cross_fit=False), 0, exp, RngStream(1, (3,))
        )
        assert res.error is None and res.cf_estimand is not None


class TestRunExperiment:
    def test_one_result_per_item(self):
        exp = small_config(n_reps=1)
        results = run_experiment(exp)
        assert len(results) == len(exp.cells) * len(exp.specs)

    def test_worker_count_invariance(self):
        exp = small_config(n_reps=4, n_obs=200)
        serial = run_experiment(exp, workers=1)
        parallel = run_experiment(exp, workers=2)
        assert serial == parallel

    def test_errors_captured_not_raised(self):
        # A 10-observation sample with 5 folds makes degenerate training
        # complements likely; the run must finish regardless.
        exp = ExperimentConfig(
            cells=((1, 2.0),),
            specs=(EstimatorSpec.binned(2),),
            n_reps=8,
            n_obs=10,
            k_folds=5,
            master_seed=3,
        )
        results = run_experiment(exp)
        assert len(results) == 8
        assert all((r.error is None) == (r.tau_hat is not None) for r in results)


class TestSummarize:
    def test_metrics_identities(self):
        exp = small_config(n_reps=10)
        rows = summarize(run_experiment(exp), exp)
        assert len(rows) == len(exp.cells) * len(exp.specs)
        for row in rows:
            assert row.rmse**2 == pytest.approx(row.bias**2 + row.sd**2, rel=1e-9)
            assert 0.0 <= row.coverage_late <= 1.0
            assert 0.0 <= row.coverage_wlate <= 1.0
            assert row.n_used + row.n_failed == exp.n_reps

    def test_unweighted_ratio_is_one(self):
        exp = small_config(n_reps=5)
        rows = summarize(run_experiment(exp), exp)
        for row in rows:
            if row.spec_id == "unweighted":
                assert row.rmse_ratio == pytest.approx(1.0)

    def test_synthetic_normal_coverage(self):
        # Oracle for the coverage metric: N(late, 1) draws with se = 1.
        exp = ExperimentConfig(
            cells=((1, 1.0),), specs=(EstimatorSpec.unweighted(),), n_reps=10_000, n_obs=10
        )
        gen = np.random.default_rng(0)
        label = cell_label(1, 1.0)
        zq = 1.959963984540054
        results = []
        for i in range(10_000):
            tau = gen.normal(0.0, 1.0)  # late for dgp1 with tau_mean 0 is 0
            results.append(
                ReplicationResult(
                    cell=label,
                    spec_id="unweighted",
                    rep=i,
                    tau_hat=tau,
                    se=1.0,
                    ci_lo=tau - zq,
                    ci_hi=tau + zq,
                    first_stage=0.06,
                )
            )
        rows = summarize(results, exp)
        assert rows[0].coverage_late == pytest.approx(0.95, abs=0.01)

    def test_all_equal_estimates(self):
        exp = ExperimentConfig(cells=((1, 1.0),), specs=(EstimatorSpec.unweighted(),), n_reps=4, n_obs=10)
        label = cell_label(1, 1.0)
        results = [
            ReplicationResult(
                cell=label, spec_id="unweighted", rep=i,
                tau_hat=0.0, se=0.5, ci_lo=-1.0, ci_hi=1.0, first_stage=0.06,
            )
            for i in range(4)
        ]
        rows = summarize(results, exp)
        assert rows[0].bias == 0.0 and rows[0].rmse == 0.0 and rows[0].coverage_late == 1.0

    def test_insufficient_data_raises(self):
        exp = ExperimentConfig(cells=((1, 1.0),), specs=(EstimatorSpec.unweighted(),), n_reps=2, n_obs=10)
        label = cell_label(1, 1.0)
        results = [
            ReplicationResult(cell=label, spec_id="unweighted", rep=0, error="WeakFirstStageError"),
            ReplicationResult(
                cell=label, spec_id="unweighted", rep=1,
                tau_hat=0.0, se=1.0, ci_lo=-2.0, ci_hi=2.0, first_stage=0.06,
            ),
        ]
        with pytest.raises(SummaryError):
            summarize(results, exp)


class TestEmitTables:
    def test_round_trip_csv(self, tmp_path):
        exp = small_config(n_reps=4)
        rows = summarize(run_experiment(exp), exp)
        paths = emit_tables(rows, "csv", str(tmp_path))
        long_path = [p for p in paths if p.endswith("results_long.csv")][0]
        records = read_long_table(long_path)
        by_key = {(r["dgp"], r["sigma_eta"], r["estimator"], r["metric"]): r["value"] for r in records}
        for row in rows:
            assert by_key[(row.dgp, row.sigma_eta, row.spec_id, "rmse")] == row.rmse
            assert by_key[(row.dgp, row.sigma_eta, row.spec_id, "coverage_late")] == row.coverage_late

    def test_round_trip_json(self, tmp_path):
        exp = small_config(n_reps=4)
        rows = summarize(run_experiment(exp), exp)
        paths = emit_tables(rows, "json", str(tmp_path))
        long_path = [p for p in paths if p.endswith("results_long.json")][0]
        records = read_long_table(long_path)
        assert len(records) == len(rows) * 12

    def test_empty_summary_headers_only(self, tmp_path):
        paths = emit_tables([], "csv", str(tmp_path))
        with open(paths[0]) as fh:
            lines = fh.read().strip().splitlines()
        assert lines == ["estimator"]

    def test_single_cell_rows(self, tmp_path):
        exp = ExperimentConfig(
            cells=((1, 1.0),), specs=(EstimatorSpec.unweighted(), EstimatorSpec.oracle()),
            n_reps=3, n_obs=200, master_seed=5,
        )
        rows = summarize(run_experiment(exp), exp)
        paths = emit_tables(rows, "csv", str(tmp_path))
        with open(paths[0]) as fh:
            lines = fh.read().strip().splitlines()
        assert lines[0] == "estimator,dgp1_se1"
        assert len(lines) == 3
