import csv
import io
import math
import random

import pytest

from factline import analysis, cohort
from factline.cohort import DatasetSpec, VariableDef
from factline.errors import ArityMismatch, DegenerateGroups, InsufficientData, NotFound

from .oracles import brute_stats

REL = 1e-10


def _rel_close(a, b, tol=REL):
    if a == b:
        return True
    return abs(a - b) <= tol * max(abs(a), abs(b), 1e-300)


class TestSummaries:
    def test_simple_column(self):
        stats = analysis.summarize_column([1, 2, 3, 4])
        assert stats["mean"] == 2.5 and stats["median"] == 2.5

    def test_sample_std_oracle(self):
        # oracle: sqrt(sum((x - mean)^2) / (n - 1)) by hand = sqrt(5/3)
        stats = analysis.summarize_column([1, 2, 3, 4])
        assert _rel_close(stats["std"], math.sqrt(5.0 / 3.0))

    def test_constant_column(self):
        stats = analysis.summarize_column([7, 7, 7])
        assert stats["std"] == 0 and stats["min"] == stats["max"] == 7

    def test_percentile_is_linear_interpolation(self):
        values = [1.0, 2.0, 3.0, 10.0]
        assert analysis.percentile(values, 50) == 2.5
        assert analysis.percentile(values, 75) == 4.75  # 3 + 0.25*(10-3)

    def test_median_equals_p50_exactly(self):
        rng = random.Random(3)
        for _ in range(50):
            values = sorted(rng.uniform(-10, 10) for _ in range(rng.randint(1, 30)))
            assert analysis.percentile(values, 50) == brute_stats.summary_oracle(values)["median"]

    def test_nulls_dropped(self):
        stats = analysis.summarize_column([1.0, None, 3.0, None])
        assert stats["n"] == 2 and stats["mean"] == 2.0

    def test_grouped_summary(self):
        rows = analysis.summarize({"x": [1, 2, 3, 4]}, groups=["a", "a", "b", "b"])
        by_group = {r["group"]: r for r in rows}
        assert by_group[""]["n"] == 4
        assert by_group["a"]["mean"] == 1.5 and by_group["b"]["mean"] == 3.5

    def test_empty_column_reported_not_fatal(self):
        rows = analysis.summarize({"x": [None, None], "y": [1.0, 2.0]})
        by_var = {r["variable"]: r for r in rows}
        assert by_var["x"]["n"] == 0 and by_var["y"]["n"] == 2


class TestCorrelate:
    def test_collinear(self):
        corr = analysis.correlate({"x": [1, 2, 3], "y": [2, 4, 6]})
        assert corr["matrix"][0][1] == 1.0

    def test_anticollinear(self):
        corr = analysis.correlate({"x": [1, 2, 3], "y": [-1, -2, -3]})
        assert corr["matrix"][0][1] == -1.0

    def test_unit_diagonal_and_symmetry(self):
        rng = random.Random(9)
        cols = {k: [rng.gauss(0, 1) for _ in range(20)] for k in "abc"}
        corr = analysis.correlate(cols)
        for i in range(3):
            assert corr["matrix"][i][i] == 1.0
            for j in range(3):
                assert corr["matrix"][i][j] == corr["matrix"][j][i]

    def test_fifty_row_pair_matches_textbook_formula(self):
        rng = random.Random(4)
        x = [rng.uniform(0, 100) for _ in range(50)]
        y = [rng.gauss(xi * 0.3, 5) for xi in x]
        corr = analysis.correlate({"x": x, "y": y})
        r_oracle, _ = brute_stats.pearson_oracle(x, y)
        assert _rel_close(corr["matrix"][0][1], r_oracle, 1e-12)

    def test_insufficient_pairs_null_cell(self):
        corr = analysis.correlate({"x": [1, None, None, 4], "y": [None, 2, 3, None]})
        assert corr["matrix"][0][1] is None

    def test_null_injection_elsewhere_leaves_pair_unchanged(self):
        rng = random.Random(11)
        x = [rng.uniform(0, 10) for _ in range(30)]
        y = [rng.uniform(0, 10) for _ in range(30)]
        z = [rng.uniform(0, 10) for _ in range(30)]
        base = analysis.correlate({"x": x, "y": y, "z": z})["matrix"][0][1]
        z_damaged = z[:15] + [None] * 15
        again = analysis.correlate({"x": x, "y": y, "z": z_damaged})["matrix"][0][1]
        assert base == again


class TestTests:
    def test_identical_samples_t0_p1(self):
        result = analysis.run_test("t-test", [[1, 2, 3], [1, 2, 3]])
        assert result["statistic"] == 0.0 and result["p_value"] == 1.0

    def test_welch_matches_oracle(self):
        rng = random.Random(21)
        a = [rng.gauss(10, 2) for _ in range(25)]
        b = [rng.gauss(11, 3) for _ in range(18)]
        t, df, p = analysis.welch_t(a, b)
        t_o, df_o, p_o = brute_stats.welch_oracle(a, b)
        assert _rel_close(t, t_o) and _rel_close(df, df_o) and _rel_close(p, p_o)

    def test_spearman_monotone(self):
        result = analysis.run_test("spearman", [[1, 2, 3], [1, 4, 9]])
        assert result["statistic"] == 1.0

    def test_spearman_with_ties_matches_oracle(self):
        rng = random.Random(13)
        x = [float(rng.randint(0, 5)) for _ in range(40)]
        y = [float(rng.randint(0, 5)) for _ in range(40)]
        rho, p = analysis.spearman(x, y)
        rho_o, p_o = brute_stats.spearman_oracle(x, y)
        assert _rel_close(rho, rho_o) and _rel_close(p, p_o, 1e-9)

    def test_anova_identical_groups_f0(self):
        f, _, _, p = analysis.one_way_anova([1, 2, 3], [1, 2, 3])
        assert f == 0.0 and p == 1.0

    def test_anova_matches_hand_computed_sums_of_squares(self):
        groups = [[1, 2, 3], [2, 3, 4], [6, 7, 8]]
        f, dfb, dfw, p = analysis.one_way_anova(*groups)
        f_oracle, p_oracle = brute_stats.anova_oracle(*groups)
        assert _rel_close(f, f_oracle) and _rel_close(p, p_oracle)

    def test_arity_checks(self):
        with pytest.raises(ArityMismatch):
            analysis.run_test("t-test", [[1, 2], [3, 4], [5, 6]])
        with pytest.raises(ArityMismatch):
            analysis.run_test("anova", [[1, 2, 3]])

    def test_degenerate_groups(self):
        with pytest.raises(DegenerateGroups):
            analysis.welch_t([5, 5, 5], [9, 9, 9])
        with pytest.raises(DegenerateGroups):
            analysis.pearson([1, 1, 1], [1, 2, 3])

    def test_insufficient_data(self):
        with pytest.raises(InsufficientData):
            analysis.pearson([1, 2], [3, 4])


class TestOracleSweep:
    """Randomized cross-check of every statistic against the brute-force
    oracle; the full 200-dataset sweep runs in the acceptance suite.
    """

    def test_forty_random_datasets(self):
        rng = random.Random(777)
        for trial in range(40):
            n = rng.randint(5, 40)
            x = [rng.gauss(rng.uniform(-5, 5), rng.uniform(0.5, 4)) for _ in range(n)]
            y = [rng.gauss(xi * rng.uniform(-1, 1), 2) for xi in x]

            ours = analysis.summarize_column(x)
            oracle = brute_stats.summary_oracle(x)
            for key, value in oracle.items():
                assert _rel_close(ours[key], value), (trial, key)

            r, p = analysis.pearson(x, y)
            r_o, p_o = brute_stats.pearson_oracle(x, y)
            assert _rel_close(r, r_o) and _rel_close(p, p_o, 1e-9)


class TestBetaIncAccuracy:
    def test_against_reference_values(self):
        from scipy.special import betainc as scipy_betainc
        rng = random.Random(5)
        for _ in range(300):
            a = rng.uniform(0.5, 80)
            b = rng.uniform(0.5, 80)
            x = rng.random()
            ours = analysis.betainc_regularized(a, b, x)
            ref = float(scipy_betainc(a, b, x))
            assert _rel_close(ours, ref, 1e-10), (a, b, x)


class TestDatasetIntegration:
    @pytest.fixture
    def analyzed(self, deployment):
        source = deployment.add_synthetic_source(master_seed=44, patient_count=8,
                                                 source_id="ehr")
        deployment.pull("ehr", source.patient_ids())
        deployment.run_until_idle()
        spec = DatasetSpec(name="study", project_id="proj-1", variables=(
            VariableDef(name="hr", data_source={"concept": "heart_rate"}, operation="Mean"),
            VariableDef(name="sbp", data_source={"concept": "systolic_bp"}, operation="Mean"),
            VariableDef(name="pain", data_source={"concept": "pain_severity"},
                        operation="Identity"),
        ))
        manifest = cohort.generate_dataset(deployment, spec)
        return deployment, manifest

    def test_auto_trigger_stores_summary_and_correlation(self, analyzed):
        deployment, manifest = analyzed
        results = analysis.get_analyses(deployment.warehouse, manifest["dataset_id"],
                                        manifest["version"])
        assert [r["kind"] for r in results] == ["auto"]
        exported = analysis.export_results(deployment.warehouse, deployment.blobs,
                                           results[0]["analysis_id"])
        header = exported["summary"].decode().splitlines()[0]
        assert header.split(",") == analysis.SUMMARY_COLUMNS

    def test_summary_matches_numeric_file(self, analyzed):
        deployment, manifest = analyzed
        columns, _ = analysis.load_numeric_columns(
            deployment.warehouse, deployment.blobs, manifest["dataset_id"],
            manifest["version"])
        rows = analysis.summarize(columns)
        hr_row = next(r for r in rows if r["variable"] == "hr")
        oracle = brute_stats.summary_oracle(columns["hr"])
        for key, value in oracle.items():
            assert _rel_close(hr_row[key], value)

    def test_export_is_byte_identical(self, analyzed):
        deployment, manifest = analyzed
        results = analysis.get_analyses(deployment.warehouse, manifest["dataset_id"],
                                        manifest["version"])
        a = analysis.export_results(deployment.warehouse, deployment.blobs,
                                    results[0]["analysis_id"])
        b = analysis.export_results(deployment.warehouse, deployment.blobs,
                                    results[0]["analysis_id"])
        assert a == b

    def test_user_test_on_dataset(self, analyzed):
        deployment, manifest = analyzed
        result = analysis.run_dataset_test(
            deployment.warehouse, deployment.blobs, manifest["dataset_id"],
            manifest["version"], "pearson", ["hr", "sbp"])
        assert -1.0 <= result["statistic"] <= 1.0
        assert 0.0 <= result["p_value"] <= 1.0

    def test_grouped_anova_on_mapped_choice_column(self, analyzed):
        deployment, manifest = analyzed
        result = analysis.run_dataset_test(
            deployment.warehouse, deployment.blobs, manifest["dataset_id"],
            manifest["version"], "anova", ["hr"], group_by="pain")
        assert result["kind"] == "anova" and result["p_value"] >= 0

    def test_export_unknown_analysis(self, analyzed):
        deployment, _ = analyzed
        with pytest.raises(NotFound):
            analysis.export_results(deployment.warehouse, deployment.blobs, "nope")
