import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal
from pandas.testing import assert_frame_equal

from conftest import DOUBLE_FIRST_COUSINS, FULL_SIB_MATING, SIB_PAIR, THREE_GENERATIONS, TRIO, nuclear_family_rows
from pedqtl.errors import ConfigError
from pedqtl.genio import Sex
from pedqtl.kinship import delta7, theoretical_kinship, x_linked_kinship
from pedqtl.simulate import (
    CovariateSpec,
    PowerSettings,
    SimSpec,
    estimate_identity,
    gene_drop,
    gene_drop_labels,
    make_rng,
    power_study,
    simulate_genotypes,
    simulate_traits,
    write_power_table,
)

# family-wise bound for comparing every entry of a Monte Carlo matrix with theory
FAMILY_SE = 4.5


HALF_SIBS = """\
H1,HF,0,0,M,
H1,HM1,0,0,F,
H1,HM2,0,0,F,
H1,HA,HF,HM1,M,
H1,HB,HF,HM1,F,
H1,HC,HF,HM2,F,
H1,HD,HF,HM2,M,
"""

FATHER_DAUGHTER = """\
L1,LF,0,0,M,
L1,LM,0,0,F,
L1,LD,LF,LM,F,
L1,LS,LF,LD,M,
L1,LT,LF,LD,F,
"""

# first cousins C2 and C3 have a child
MULTIGENERATIONAL = """\
M1,G1,0,0,M,
M1,G2,0,0,F,
M1,G3,0,0,M,
M1,G4,0,0,F,
M1,P1,G1,G2,M,
M1,P2,G1,G2,F,
M1,P3,G3,G4,F,
M1,SP,0,0,M,
M1,C1,P1,P3,M,
M1,C2,P1,P3,F,
M1,C3,SP,P2,M,
M1,GC,C3,C2,F,
"""

ORACLE_PEDIGREES = {
    'trio': TRIO,
    'sib_pair': SIB_PAIR,
    'half_sibs': HALF_SIBS,
    'three_generations': THREE_GENERATIONS,
    'double_first_cousins': DOUBLE_FIRST_COUSINS,
    'full_sib_mating': FULL_SIB_MATING,
    'father_daughter': FATHER_DAUGHTER,
    'multigenerational': MULTIGENERATIONAL,
}
INBRED = {'full_sib_mating', 'father_daughter', 'multigenerational'}
ORACLE_DROPS = 1_000_000


def _within(estimate, se, truth, k):
    return np.all(np.abs(estimate - truth) <= k * se + 1e-12)


def _agrees_at_three_se(estimate, se, truth):
    """
    Every upper-triangle entry within FAMILY_SE standard errors, and at most one
    beyond 3 SE; entries with zero spread must match exactly
    """
    upper = np.triu_indices(len(truth))
    gap = np.abs(estimate - truth)[upper]
    se = se[upper]
    return _within(gap, se, 0.0, FAMILY_SE) and np.sum(gap > 3 * se + 1e-12) <= 1


class TestGeneDrop:
    def test_streams_are_reproducible(self):
        a = make_rng(5, (1, 2)).random(4)
        assert_array_equal(a, make_rng(5, (1, 2)).random(4))
        assert not np.array_equal(a, make_rng(5, (1, 3)).random(4))

    def test_fixed_alleles(self, make_pedigrees):
        (ped,) = make_pedigrees(SIB_PAIR)
        rng = make_rng(1)
        assert_array_equal(gene_drop(ped, [0.0, 0.0], rng), 0)
        assert_array_equal(gene_drop(ped, [1.0], rng), 2)

    def test_founders_in_hardy_weinberg(self, make_pedigrees):
        (ped,) = make_pedigrees(TRIO)
        codes = gene_drop(ped, np.full(20000, 0.3), make_rng(2))
        founders = codes[:, [ped.index_of("FA"), ped.index_of("MO")]].ravel()
        frequencies = np.bincount(founders, minlength=3) / founders.size
        assert frequencies == pytest.approx([0.49, 0.42, 0.09], abs=0.01)

    def test_child_carries_one_allele_from_each_parent(self, make_pedigrees):
        (ped,) = make_pedigrees(TRIO)
        codes = gene_drop(ped, np.full(5000, 0.5), make_rng(3)).astype(int)
        fa, mo, c = (codes[:, ped.index_of(p)] for p in ("FA", "MO", "C"))
        assert not np.any((fa == 0) & (mo == 0) & (c > 0))
        assert not np.any((fa == 2) & (mo == 2) & (c < 2))

    def test_x_linked_males_are_hemizygous(self, make_pedigrees):
        (ped,) = make_pedigrees(SIB_PAIR)
        codes = gene_drop(ped, np.full(2000, 0.4), make_rng(4), x_linked=True)
        males = ped.sexes() == Sex.MALE
        assert np.isin(codes[:, males], [0, 2]).all()
        assert (codes[:, ~males] == 1).any()

    def test_labels_of_founders(self, make_pedigrees):
        (ped,) = make_pedigrees(TRIO)
        labels = gene_drop_labels(ped, 10, make_rng(5))
        assert labels.shape == (10, 3, 2)
        assert_array_equal(labels[:, ped.index_of("FA")], [[0, 1]] * 10)
        child = labels[:, ped.index_of("C")]
        assert np.isin(child[:, 0], [2, 3]).all() and np.isin(child[:, 1], [0, 1]).all()


class TestIdentityEstimates:
    @pytest.mark.parametrize("rows", [SIB_PAIR, FULL_SIB_MATING, DOUBLE_FIRST_COUSINS])
    def test_kinship_matches_theory(self, make_pedigrees, rows):
        (ped,) = make_pedigrees(rows)
        est = estimate_identity(ped, 20000, make_rng(6), chunk=5000)
        assert est.drops == 20000
        assert _within(est.kinship, est.kinship_se, theoretical_kinship(ped).values, FAMILY_SE)

    @pytest.mark.parametrize("rows", [SIB_PAIR, DOUBLE_FIRST_COUSINS])
    def test_delta7_matches_theory(self, make_pedigrees, rows):
        (ped,) = make_pedigrees(rows)
        est = estimate_identity(ped, 20000, make_rng(7))
        assert _within(est.delta7, est.delta7_se, delta7(ped).values, FAMILY_SE)

    def test_x_linked_kinship_matches_theory(self, make_pedigrees):
        (ped,) = make_pedigrees(SIB_PAIR)
        est = estimate_identity(ped, 20000, make_rng(8), x_linked=True)
        assert _within(est.kinship, est.kinship_se, x_linked_kinship(ped).values, FAMILY_SE)

    def test_x_linked_kinship_in_three_generations(self, make_pedigrees):
        (ped,) = make_pedigrees(THREE_GENERATIONS)
        est = estimate_identity(ped, 20000, make_rng(11), x_linked=True)
        assert _within(est.kinship, est.kinship_se, x_linked_kinship(ped).values, FAMILY_SE)


@pytest.mark.slow
class TestIdentityOracleBattery:
    @pytest.mark.parametrize("name", sorted(ORACLE_PEDIGREES))
    def test_autosomal_identity(self, make_pedigrees, name):
        (ped,) = make_pedigrees(ORACLE_PEDIGREES[name])
        est = estimate_identity(ped, ORACLE_DROPS, make_rng(9), chunk=50_000)
        assert est.drops == ORACLE_DROPS
        assert _agrees_at_three_se(est.kinship, est.kinship_se, theoretical_kinship(ped).values)
        if name not in INBRED:
            assert _agrees_at_three_se(est.delta7, est.delta7_se, delta7(ped).values)

    @pytest.mark.parametrize("name", sorted(ORACLE_PEDIGREES))
    def test_x_linked_identity(self, make_pedigrees, name):
        (ped,) = make_pedigrees(ORACLE_PEDIGREES[name])
        est = estimate_identity(ped, ORACLE_DROPS, make_rng(10), x_linked=True, chunk=50_000)
        assert _agrees_at_three_se(est.kinship, est.kinship_se, x_linked_kinship(ped).values)

    def test_battery_covers_large_and_inbred_pedigrees(self, make_pedigrees):
        sizes = {name: make_pedigrees(rows, name=f"{name}.csv")[0].size for name, rows in ORACLE_PEDIGREES.items()}
        assert len(sizes) >= 8
        assert max(sizes.values()) == 12
        (loop,) = make_pedigrees(FATHER_DAUGHTER, name="loop.csv")
        # child of father and daughter: F = 1/4
        assert theoretical_kinship(loop).values[loop.index_of("LS"), loop.index_of("LS")] == pytest.approx(5 / 8)


class TestSimSpec:
    def test_validation(self, make_pedigrees):
        peds = tuple(make_pedigrees(TRIO))
        with pytest.raises(ConfigError):
            SimSpec(pedigrees=peds, founder_maf=np.zeros(1), sigmas={'additive': np.eye(1)})
        with pytest.raises(ConfigError):
            SimSpec(pedigrees=peds, founder_maf=np.zeros(1), sigmas={'environment': np.eye(1)},
                    effects=((3, (1.0,)),))
        with pytest.raises(ConfigError):
            SimSpec(pedigrees=peds, founder_maf=np.zeros(1), sigmas={'environment': np.eye(2), 'additive': np.eye(1)})
        with pytest.raises(ConfigError):
            SimSpec(pedigrees=peds, founder_maf=np.zeros(1), sigmas={'environment': np.eye(1)}, replicates=0)
        with pytest.raises(ConfigError):
            CovariateSpec("age", "uniform", (1.0,))

    def test_percent_variance(self, make_pedigrees):
        spec = SimSpec(pedigrees=tuple(make_pedigrees(TRIO)), founder_maf=np.array([0.5, 0.2]),
                       sigmas={'environment': np.eye(1)}, effects=((0, (1.0,)),))
        assert spec.percent_variance(0) == pytest.approx(100 / 3)
        assert spec.percent_variance(1) == 0.0
        assert [s.name for s in spec.snps()] == ["sim1", "sim2"]


class TestSimulateTraits:
    def test_environment_only_is_iid_normal(self, make_pedigrees):
        peds = make_pedigrees(nuclear_family_rows(200))
        spec = SimSpec(pedigrees=tuple(peds), founder_maf=np.zeros(0),
                       sigmas={'environment': np.array([[2.0]])}, intercept=(1.0,))
        traits = simulate_traits(spec, np.zeros((0, 800)), make_rng(11))
        values = traits.values[:, 0]
        assert values.mean() == pytest.approx(1.0, abs=0.2)
        assert values.var() == pytest.approx(2.0, abs=0.4)
        assert traits.trait_names == ("trait1",)
        assert len(traits.person_ids) == 800

    def test_sib_correlation_from_additive_component(self, make_pedigrees):
        peds = make_pedigrees(nuclear_family_rows(2000))
        spec = SimSpec(pedigrees=tuple(peds), founder_maf=np.zeros(0),
                       sigmas={'additive': np.array([[1.0]]), 'environment': np.array([[1.0]])})
        values = simulate_traits(spec, np.zeros((0, 8000)), make_rng(12)).values[:, 0].reshape(2000, 4)
        # sibling covariance 2 * 1/4 * sigma_a; total variance 2
        assert np.corrcoef(values[:, 2], values[:, 3])[0, 1] == pytest.approx(0.25, abs=0.07)
        assert np.corrcoef(values[:, 0], values[:, 1])[0, 1] == pytest.approx(0.0, abs=0.07)

    def test_household_shared_across_pedigrees(self, make_pedigrees):
        rows = "".join(f"P{k}a,a{k},0,0,M,h{k}\nP{k}b,b{k},0,0,F,h{k}\n" for k in range(3000))
        peds = make_pedigrees(rows)
        spec = SimSpec(pedigrees=tuple(peds), founder_maf=np.zeros(0),
                       sigmas={'household': np.array([[1.0]]), 'environment': np.array([[1.0]])})
        values = simulate_traits(spec, np.zeros((0, 6000)), make_rng(14)).values[:, 0].reshape(3000, 2)
        assert np.corrcoef(values[:, 0], values[:, 1])[0, 1] == pytest.approx(0.5, abs=0.06)

    def test_x_additive_component(self, make_pedigrees):
        peds = make_pedigrees(nuclear_family_rows(2000))
        spec = SimSpec(pedigrees=tuple(peds), founder_maf=np.zeros(0),
                       sigmas={'x_additive': np.array([[1.0]]), 'environment': np.array([[1.0]])})
        values = simulate_traits(spec, np.zeros((0, 8000)), make_rng(15)).values[:, 0].reshape(2000, 4)
        # columns: father, mother, son, daughter; a son's X comes from his mother
        assert np.corrcoef(values[:, 0], values[:, 2])[0, 1] == pytest.approx(0.0, abs=0.07)
        assert np.corrcoef(values[:, 1], values[:, 2])[0, 1] == pytest.approx(1 / np.sqrt(6), abs=0.07)

    def test_covariates_and_effects(self, make_pedigrees):
        peds = make_pedigrees(nuclear_family_rows(50))
        covariates = (CovariateSpec("sex", "sex", (5.0,)), CovariateSpec("smoker", "binary", (0.0,), mean=0.3))
        spec = SimSpec(pedigrees=tuple(peds), founder_maf=np.array([0.5]),
                       sigmas={'environment': np.array([[1e-6]])}, effects=((0, (2.0,)),), covariates=covariates)
        codes = np.ones((1, 200), dtype=np.int8)
        traits = simulate_traits(spec, codes, make_rng(13))
        sexes = np.concatenate([p.sexes() for p in peds])
        assert_array_equal(traits.covariates[:, 0], (sexes == Sex.FEMALE).astype(float))
        assert set(np.unique(traits.covariates[:, 1])) <= {0.0, 1.0}
        expected = 2.0 + 5.0 * traits.covariates[:, 0]
        assert traits.values[:, 0] == pytest.approx(expected, abs=0.01)
        assert traits.covariate_names == ("sex", "smoker")

    def test_genotypes_from_study_stream(self, make_pedigrees):
        spec = SimSpec(pedigrees=tuple(make_pedigrees(nuclear_family_rows(3))), founder_maf=np.full(5, 0.3),
                       sigmas={'environment': np.eye(1)}, seed=21)
        a, b = simulate_genotypes(spec), simulate_genotypes(spec)
        assert_array_equal(a.codes(), b.codes())
        assert a.sample_ids == tuple(spec.person_ids)


@pytest.fixture
def power_spec(make_pedigrees):
    peds = make_pedigrees(nuclear_family_rows(15))
    return SimSpec(pedigrees=tuple(peds), founder_maf=np.array([0.3, 0.4, 0.0]),
                   sigmas={'additive': np.array([[0.5]]), 'environment': np.array([[0.5]])},
                   effects=((0, (1.5,)),), replicates=3, seed=4)


class TestPowerStudy:
    def test_deterministic_across_threads(self, power_spec):
        a = power_study(power_spec, PowerSettings(alpha=0.01, threads=1))
        b = power_study(power_spec, PowerSettings(alpha=0.01, threads=2))
        assert_frame_equal(a, b)
        assert list(a.columns) == ["snp", "maf", "pct_var", "replicates", "tested", "rejections", "rate", "se"]
        monomorphic = a.set_index("snp").loc["sim3"]
        assert monomorphic["tested"] == 0 and monomorphic["rejections"] == 0
        assert a.set_index("snp").at["sim1", "rate"] >= a.set_index("snp").at["sim2", "rate"]

    def test_single_replicate_has_no_se(self, power_spec):
        from dataclasses import replace
        table = power_study(replace(power_spec, replicates=1), PowerSettings(alpha=0.05))
        assert table["se"].isna().all()
        assert (table["replicates"] == 1).all()

    def test_lrt_option(self, power_spec):
        table = power_study(power_spec, PowerSettings(alpha=0.05, test="lrt"))
        assert (table["rate"].between(0.0, 1.0)).all()
        with pytest.raises(ConfigError):
            PowerSettings(test="wald")

    @pytest.mark.slow
    def test_power_increases_with_variance_explained(self, make_pedigrees):
        peds = make_pedigrees(nuclear_family_rows(150))
        fractions = np.array([0.002, 0.01, 0.02])
        maf = np.full(3, 0.3)
        # total variance 1 / (1 - sum of fractions) when the polygenic part has variance 1
        total = 1.0 / (1.0 - fractions.sum())
        betas = np.sqrt(fractions * total / (2 * 0.3 * 0.7))
        spec = SimSpec(pedigrees=tuple(peds), founder_maf=maf,
                       sigmas={'additive': np.array([[0.4]]), 'environment': np.array([[0.6]])},
                       effects=tuple((s, (float(b),)) for s, b in enumerate(betas)), replicates=200, seed=8)
        assert [spec.percent_variance(s) for s in range(3)] == pytest.approx(100 * fractions, rel=1e-9)
        table = power_study(spec, PowerSettings(alpha=1e-3, threads=4))
        rates = table["rate"].to_numpy()
        assert rates[0] < rates[1] < rates[2]

    def test_power_table_header(self, tmp_path):
        table = pd.DataFrame({'snp': ["sim1"], 'rate': [0.5], 'se': [np.nan]})
        path = tmp_path / "power.tsv"
        write_power_table(table, str(path), seed=7, alpha=1e-3)
        lines = path.read_text().splitlines()
        assert lines[:4] == ["# rng = PCG64", "# seed = 7", "# alpha = 0.001", "snp\trate\tse"]
        assert lines[4] == "sim1\t0.5\tNA"
