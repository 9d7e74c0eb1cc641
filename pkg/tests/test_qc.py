import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose
from scipy.stats import chi2

from pedqtl.errors import EmptyDataError
from pedqtl.genio import GenotypeMatrix, SnpInfo
from pedqtl.qc import (
    QcReport,
    call_rate_filter,
    genomic_inflation,
    hwe_block,
    hwe_distribution,
    hwe_exact_counts,
    hwe_exact_founders,
    summarize,
    write_qc_report,
)


def _genotypes(codes):
    codes = np.asarray(codes, dtype=np.int8)
    snps = [SnpInfo(f"s{i}", "1", i + 1, "A", "G") for i in range(codes.shape[0])]
    return GenotypeMatrix.from_codes(snps, codes, [f"p{j}" for j in range(codes.shape[1])])


class TestCallRate:
    def test_snp_below_threshold(self, rng):
        codes = rng.integers(0, 3, size=(50, 100))
        codes[0, :3] = -1
        filtered, report = call_rate_filter(_genotypes(codes), 0.98)
        assert report.snps_dropped == {"s0": "call_rate"}
        assert report.individuals_dropped == {}
        assert filtered.m == 49 and filtered.n == 100

    def test_individual_below_threshold(self, rng):
        codes = rng.integers(0, 3, size=(100, 60))
        codes[:3, 0] = -1
        filtered, report = call_rate_filter(_genotypes(codes), 0.98)
        assert report.snps_dropped == {}
        assert report.individuals_dropped == {"p0": "call_rate"}
        assert filtered.sample_ids[0] == "p1"
        assert report.snps_retained + len(report.snps_dropped) == report.snps_input
        assert report.individuals_retained == 59

    def test_complete_matrix_is_untouched(self, rng):
        codes = rng.integers(0, 3, size=(20, 10))
        filtered, report = call_rate_filter(_genotypes(codes), 1.0)
        assert filtered.m == 20 and filtered.n == 10
        assert not report.snps_dropped and not report.individuals_dropped

    def test_filter_reaches_fixed_point(self, rng):
        codes = rng.integers(0, 3, size=(40, 30))
        codes[rng.random(codes.shape) < 0.05] = -1
        filtered, _ = call_rate_filter(_genotypes(codes), 0.9, block_size=7)
        again, report = call_rate_filter(filtered, 0.9)
        assert again.m == filtered.m and again.n == filtered.n
        assert not report.snps_dropped and not report.individuals_dropped

    def test_snp_dropped_after_individual_pass(self):
        # s0 misses p1 only; p0 misses s1-s3 and falls below 0.75, after which s0 has 2 of 3 calls
        codes = np.ones((9, 4), dtype=np.int8)
        codes[0, 1] = -1
        codes[1:4, 0] = -1
        filtered, report = call_rate_filter(_genotypes(codes), 0.75)
        assert report.individuals_dropped == {"p0": "call_rate"}
        assert report.snps_dropped == {"s0": "call_rate"}
        assert filtered.m == 8 and filtered.sample_ids == ("p1", "p2", "p3")

    def test_everything_removed(self):
        with pytest.raises(EmptyDataError):
            call_rate_filter(_genotypes([[-1, -1], [-1, -1]]), 0.5)

    def test_threshold_range(self, rng):
        with pytest.raises(ValueError):
            call_rate_filter(_genotypes(rng.integers(0, 3, size=(2, 2))), 0.0)


class TestHardyWeinberg:
    @pytest.mark.parametrize("n,n_minor", [(1, 1), (2, 2), (10, 7), (150, 120), (500, 499)])
    def test_distribution_sums_to_one(self, n, n_minor):
        probs = hwe_distribution(n, n_minor)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)
        assert (probs[(np.arange(len(probs)) % 2) != (n_minor % 2)] == 0).all()

    def test_two_individuals_two_minor_alleles(self):
        assert_allclose(hwe_distribution(2, 2), [1 / 3, 0.0, 2 / 3])

    def test_two_heterozygotes(self):
        assert hwe_exact_counts(0, 2, 0) == pytest.approx(1.0)

    def test_monomorphic(self):
        assert hwe_exact_counts(40, 0, 0) == 1.0

    def test_heterozygote_excess(self):
        assert hwe_exact_counts(0, 100, 0) < 1e-10

    def test_equilibrium_is_not_rejected(self):
        assert hwe_exact_counts(25, 50, 25) > 0.5

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            hwe_distribution(2, 3)

    def test_founder_codes_skip_missing(self):
        codes = np.array([0, 1, 1, -1, 2, 0])
        assert hwe_exact_founders(codes) == hwe_exact_counts(2, 2, 1)
        assert np.isnan(hwe_exact_founders(np.array([-1, -1])))

    def test_x_linked_uses_female_founders(self):
        codes = np.array([[0, 2, 1, 1, 0, 2]])
        founders = np.array([True, True, True, True, False, True])
        females = np.array([False, False, True, True, True, False])
        p = hwe_block(codes, founders, np.array([True]), females)
        assert p[0] == hwe_exact_counts(0, 2, 0)
        autosomal = hwe_block(codes, founders, np.array([False]), females)
        assert autosomal[0] == hwe_exact_counts(1, 2, 2)


class TestGenomicInflation:
    def test_uniform_p_values(self):
        p = (np.arange(1, 10_001) - 0.5) / 10_000
        assert genomic_inflation(p) == pytest.approx(1.0, abs=1e-3)

    def test_median_p_at_one_df_median(self):
        p = chi2.sf(chi2.ppf(0.5, 1), 1)
        assert genomic_inflation([p, p, p]) == pytest.approx(1.0)

    def test_inflated(self):
        p = chi2.sf(2.0 * chi2.ppf(0.5, 1), 1)
        assert genomic_inflation([p]) == pytest.approx(2.0)

    def test_nan_ignored_and_empty(self):
        assert genomic_inflation([0.5, np.nan]) == pytest.approx(chi2.isf(0.5, 1) / chi2.ppf(0.5, 1))
        with pytest.raises(EmptyDataError):
            genomic_inflation([np.nan])


def test_report_files(tmp_path):
    report = QcReport(
        snps_input=10, individuals_input=5, call_rate_threshold=0.98,
        snps_dropped={"s1": "call_rate"}, individuals_dropped={"p2": "call_rate"},
        hwe={"s2": 1e-9, "s3": 0.4}, lambda_gc=1.02,
    ).with_join_drops({"x9": "no_trait"})
    assert report.individuals_input == 6
    assert report.individuals_retained == 4
    write_qc_report(report, str(tmp_path))
    text = (tmp_path / "qc_report.txt").read_text()
    assert text == summarize(report)
    assert "SNPs: 10 input, 1 dropped, 9 retained" in text
    assert "individuals dropped (no_trait): 1" in text
    assert "1 with p < 1e-8" in text
    assert "1.0200" in text
    dropped = pd.read_csv(tmp_path / "qc_dropped.tsv", sep="\t")
    assert set(dropped["id"]) == {"s1", "p2", "x9"}
