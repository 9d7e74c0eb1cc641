"""
Gene dropping and trait simulation under the variance component model, and
the power/size harness that reruns the analysis on simulated replicates.

Random streams are PCG64 generators seeded from SeedSequence(seed,
spawn_key=...): genotypes use spawn_key (0,), replicate r uses (1, r).
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg as la

from .errors import ConfigError
from .genio import GenotypeMatrix, Pedigree, Sex, SnpInfo, TraitTable, join_samples
from .helper.workers import map_ordered, split_budget
from .kinship import delta7, theoretical_kinship, x_linked_kinship
from .scan import ScoreState, lrt_refine, score_test
from .vcmodel import COMPONENT_MULTIPLIERS, CovariateTerm, FitOptions, fit_null_model

logger = logging.getLogger(__name__)

RNG_NAME = "PCG64"
GENOTYPE_STREAM = (0,)
REPLICATE_STREAM = 1
COVARIATE_KINDS = ("normal", "binary", "sex")


def make_rng(seed: int, spawn_key: Tuple[int, ...] = ()) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=spawn_key)))


# ---------------------------------------------------------------------------
# Gene dropping
# ---------------------------------------------------------------------------

def _drop_alleles(ped: Pedigree, founder_alleles, rng: np.random.Generator, x_linked: bool,
                  draws: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pass founder alleles down the pedigree

    Args:
        founder_alleles: callable(member, slot) returning the (draws,) alleles of a
            founder slot; slot 1 is skipped for male founders in X mode

    Returns:
        (maternal, paternal) arrays of shape (draws, n); for males in X mode both hold the single X
    """
    fathers, mothers = ped.parent_arrays()
    sexes = ped.sexes()
    n = ped.size
    maternal = np.empty((draws, n), dtype=np.int64)
    paternal = np.empty((draws, n), dtype=np.int64)
    for i in range(n):
        male = sexes[i] == Sex.MALE
        f, m = fathers[i], mothers[i]
        if f < 0:
            maternal[:, i] = founder_alleles(i, 0)
            paternal[:, i] = maternal[:, i] if (x_linked and male) else founder_alleles(i, 1)
            continue
        pick = rng.integers(0, 2, size=draws).astype(bool)
        maternal[:, i] = np.where(pick, maternal[:, m], paternal[:, m])
        if x_linked:
            paternal[:, i] = maternal[:, i] if male else maternal[:, f]
        else:
            pick = rng.integers(0, 2, size=draws).astype(bool)
            paternal[:, i] = np.where(pick, maternal[:, f], paternal[:, f])
    return maternal, paternal


def gene_drop(ped: Pedigree, founder_maf: Sequence[float], rng: np.random.Generator,
              x_linked: bool = False) -> np.ndarray:
    """
    Simulate genotypes for every member of one pedigree

    Founder alleles are i.i.d. Bernoulli(maf) and each child takes one
    uniformly chosen allele from each parent. In X-linked mode sons take the
    maternal draw only and males are coded 0/2.

    Returns:
        (m, n) int8 allele-count codes, n in pedigree member order
    """
    maf = np.asarray(founder_maf, dtype=np.float64)

    def founder(i: int, slot: int) -> np.ndarray:
        return (rng.random(len(maf)) < maf).astype(np.int64)

    maternal, paternal = _drop_alleles(ped, founder, rng, x_linked, len(maf))
    return (maternal + paternal).astype(np.int8)


def gene_drop_labels(ped: Pedigree, n_drops: int, rng: np.random.Generator,
                     x_linked: bool = False) -> np.ndarray:
    """
    Drop distinct founder allele labels; founder i carries labels 2i and 2i + 1

    Returns:
        (n_drops, n, 2) labels; a male in X mode carries the same label twice
    """
    def founder(i: int, slot: int) -> np.ndarray:
        return np.full(n_drops, 2 * i + slot, dtype=np.int64)

    maternal, paternal = _drop_alleles(ped, founder, rng, x_linked, n_drops)
    return np.stack([maternal, paternal], axis=-1)


@dataclass(frozen=True, eq=False)
class IdentityEstimate:
    kinship: np.ndarray
    kinship_se: np.ndarray
    delta7: np.ndarray
    delta7_se: np.ndarray
    drops: int


def _identity_chunk(labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    # eq[d, i, a, j, b]: allele a of i and allele b of j share a founder label
    eq = labels[:, :, :, None, None] == labels[:, None, None, :, :]
    eq = np.transpose(eq, (0, 1, 3, 2, 4))
    kin = eq.mean(axis=(3, 4))
    n = labels.shape[1]
    diag = np.arange(n)
    kin[:, diag, diag] = 0.5 * (1.0 + (labels[:, :, 0] == labels[:, :, 1]))
    d7 = ((eq[:, :, :, 0, 0] & eq[:, :, :, 1, 1]) | (eq[:, :, :, 0, 1] & eq[:, :, :, 1, 0])).astype(np.float64)
    d7[:, diag, diag] = 1.0
    return kin, d7


def estimate_identity(ped: Pedigree, n_drops: int, rng: np.random.Generator, x_linked: bool = False,
                      chunk: int = 20000) -> IdentityEstimate:
    """
    Monte Carlo kinship and delta7 by founder-label gene dropping

    Returns:
        Means and standard errors over n_drops independent drops
    """
    n = ped.size
    sums = {'kin': np.zeros((n, n)), 'd7': np.zeros((n, n))}
    squares = {'kin': np.zeros((n, n)), 'd7': np.zeros((n, n))}
    done = 0
    while done < n_drops:
        size = min(chunk, n_drops - done)
        kin, d7 = _identity_chunk(gene_drop_labels(ped, size, rng, x_linked))
        for key, values in (('kin', kin), ('d7', d7)):
            sums[key] += values.sum(axis=0)
            squares[key] += (values ** 2).sum(axis=0)
        done += size

    def summary(key: str) -> Tuple[np.ndarray, np.ndarray]:
        mean = sums[key] / n_drops
        var = np.clip(squares[key] / n_drops - mean ** 2, 0.0, None)
        return mean, np.sqrt(var / max(1, n_drops - 1))

    kinship, kinship_se = summary('kin')
    d7, d7_se = summary('d7')
    return IdentityEstimate(kinship, kinship_se, d7, d7_se, n_drops)


# ---------------------------------------------------------------------------
# Trait simulation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CovariateSpec:
    """A simulated covariate: normal(mean, sd), binary(mean) or the pedigree sex (1 = female)"""
    name: str
    kind: str
    effects: Tuple[float, ...]
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.kind not in COVARIATE_KINDS:
            raise ConfigError(f"Covariate {self.name}: kind must be one of {', '.join(COVARIATE_KINDS)}")


@dataclass(frozen=True, eq=False)
class SimSpec:
    pedigrees: Tuple[Pedigree, ...]
    founder_maf: np.ndarray
    sigmas: Dict[str, np.ndarray]
    effects: Tuple[Tuple[int, Tuple[float, ...]], ...] = ()
    covariates: Tuple[CovariateSpec, ...] = ()
    intercept: Tuple[float, ...] = ()
    trait_names: Tuple[str, ...] = ()
    replicates: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if 'environment' not in self.sigmas:
            raise ConfigError("Simulation needs sigma_environment")
        for snp, beta in self.effects:
            if not 0 <= snp < len(self.founder_maf):
                raise ConfigError(f"Causal SNP index {snp} is outside the {len(self.founder_maf)} simulated SNPs")
            if len(beta) != self.trait_count:
                raise ConfigError(f"Effect of SNP {snp} lists {len(beta)} values for {self.trait_count} traits")
        for label, sigma in self.sigmas.items():
            if label not in COMPONENT_MULTIPLIERS:
                raise ConfigError(f"Unknown variance component {label}")
            if np.asarray(sigma).shape != (self.trait_count, self.trait_count):
                raise ConfigError(f"sigma_{label} must be {self.trait_count} x {self.trait_count}")

    @property
    def trait_count(self) -> int:
        return np.asarray(self.sigmas['environment']).shape[0]

    @property
    def names(self) -> Tuple[str, ...]:
        return self.trait_names or tuple(f"trait{t + 1}" for t in range(self.trait_count))

    @property
    def person_ids(self) -> List[str]:
        return [pid for ped in self.pedigrees for pid in ped.person_ids]

    def snps(self) -> List[SnpInfo]:
        return [SnpInfo(f"sim{s + 1}", "1", 1000 * (s + 1), "A", "G") for s in range(len(self.founder_maf))]

    def total_variance(self) -> np.ndarray:
        """Per-trait variance of an outbred individual, causal SNPs included"""
        total = np.zeros(self.trait_count)
        for sigma in self.sigmas.values():
            total += np.diag(np.asarray(sigma))
        for snp, beta in self.effects:
            p = self.founder_maf[snp]
            total += 2.0 * p * (1.0 - p) * np.asarray(beta) ** 2
        return total

    def percent_variance(self, snp: int) -> float:
        """100 x 2p(1-p) beta^2 / total trait variance, averaged over traits"""
        p = self.founder_maf[snp]
        beta = np.zeros(self.trait_count)
        for s, b in self.effects:
            if s == snp:
                beta += np.asarray(b)
        return float(np.mean(100.0 * 2.0 * p * (1.0 - p) * beta ** 2 / self.total_variance()))


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, vectors = la.eigh(matrix)
    return vectors * np.sqrt(np.clip(eigenvalues, 0.0, None))


def _pedigree_kernels(ped: Pedigree, labels: Sequence[str]) -> Dict[str, np.ndarray]:
    kernels = {}
    for label in labels:
        if label == "additive":
            kernels[label] = theoretical_kinship(ped).values
        elif label == "dominance":
            kernels[label] = delta7(ped).values
        elif label == "x_additive":
            kernels[label] = x_linked_kinship(ped).values
        else:
            kernels[label] = np.eye(ped.size)
    return kernels


def simulate_traits(spec: SimSpec, genotypes: np.ndarray, rng: np.random.Generator) -> TraitTable:
    """
    Draw traits: intercept + covariates + causal SNPs + sum_k N(0, multiplier_k Sigma_k (x) K_k)

    Each component is drawn as A Z B' with A A' = multiplier K and B B' = Sigma,
    pedigree by pedigree. The household effect is one draw per household id
    shared by its members across pedigrees; members without a household get
    their own.

    Args:
        spec: Simulation settings
        genotypes: (m, n) codes for all pedigree members in pedigree order
        rng: Random generator

    Returns:
        TraitTable over all pedigree members with the simulated covariates
    """
    T = spec.trait_count
    n = len(spec.person_ids)
    values = np.zeros((n, T))
    per_pedigree = [label for label in spec.sigmas if label != "household"]
    offset = 0
    for ped in spec.pedigrees:
        kernels = _pedigree_kernels(ped, per_pedigree)
        rows = slice(offset, offset + ped.size)
        for label in per_pedigree:
            left = _sqrt_psd(COMPONENT_MULTIPLIERS[label] * kernels[label])
            right = _sqrt_psd(np.asarray(spec.sigmas[label], dtype=np.float64))
            z = rng.standard_normal((ped.size, T))
            values[rows] += left @ z @ right.T
        offset += ped.size

    if "household" in spec.sigmas:
        keys = [p.household_id if p.household_id is not None else (k,)
                for k, p in enumerate(p for ped in spec.pedigrees for p in ped.individuals)]
        first_seen: Dict[object, int] = {}
        codes = np.array([first_seen.setdefault(key, len(first_seen)) for key in keys], dtype=np.int64)
        right = _sqrt_psd(COMPONENT_MULTIPLIERS["household"] * np.asarray(spec.sigmas["household"], dtype=np.float64))
        shared = rng.standard_normal((len(first_seen), T))
        values += shared[codes] @ right.T

    intercept = np.asarray(spec.intercept or (0.0,) * T, dtype=np.float64)
    values += intercept[None, :]
    for snp, beta in spec.effects:
        values += np.outer(genotypes[snp].astype(np.float64), np.asarray(beta))

    sexes = np.concatenate([ped.sexes() for ped in spec.pedigrees]) if spec.pedigrees else np.zeros(0)
    covariates = np.zeros((n, len(spec.covariates)))
    for c, cov in enumerate(spec.covariates):
        if cov.kind == "normal":
            column = rng.normal(cov.mean, cov.sd, size=n)
        elif cov.kind == "binary":
            column = (rng.random(n) < cov.mean).astype(np.float64)
        else:
            column = (sexes == Sex.FEMALE).astype(np.float64)
        covariates[:, c] = column
        values += np.outer(column, np.asarray(cov.effects))

    return TraitTable(
        person_ids=tuple(spec.person_ids),
        trait_names=spec.names,
        covariate_names=tuple(c.name for c in spec.covariates),
        values=values,
        covariates=covariates,
    )


def simulate_genotypes(spec: SimSpec) -> GenotypeMatrix:
    """Genotypes for the whole study, dropped once from the genotype stream"""
    rng = make_rng(spec.seed, GENOTYPE_STREAM)
    codes = np.concatenate([gene_drop(ped, spec.founder_maf, rng) for ped in spec.pedigrees], axis=1)
    return GenotypeMatrix.from_codes(spec.snps(), codes, spec.person_ids)


# ---------------------------------------------------------------------------
# Power study
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PowerSettings:
    alpha: Optional[float] = None
    sig_level: float = 0.05
    test: str = "score"
    components: Tuple[str, ...] = ("additive", "environment")
    threads: int = 1
    fit: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self):
        if self.test not in ("score", "lrt"):
            raise ConfigError(f"test must be score or lrt, got {self.test}")


def _replicate_pvalues(spec: SimSpec, genotypes: GenotypeMatrix, replicate: int,
                       settings: PowerSettings) -> np.ndarray:
    rng = make_rng(spec.seed, (REPLICATE_STREAM, replicate))
    traits = simulate_traits(spec, genotypes.codes(), rng)
    analysis = join_samples(spec.pedigrees, traits, genotypes)
    terms = [CovariateTerm(c.name, (c.name,) * spec.trait_count) for c in spec.covariates]
    nullfit = fit_null_model(analysis, terms=terms, components=settings.components, opts=settings.fit)
    state = ScoreState(nullfit)
    codes = analysis.genotypes.codes()
    p_values = np.full(codes.shape[0], np.nan)
    for s in range(codes.shape[0]):
        outcome = score_test(nullfit, codes[s], state)
        if not outcome.tested:
            continue
        p_values[s] = outcome.p_value
        if settings.test == "lrt":
            p_values[s] = lrt_refine(nullfit, codes[s], opts=settings.fit).p_value
    return p_values


def power_study(spec: SimSpec, settings: PowerSettings = PowerSettings()) -> pd.DataFrame:
    """
    Empirical rejection rates over simulated replicates

    Genotypes are dropped once; traits are redrawn per replicate and the null
    model is refit each time. Rejection is at alpha, by default the
    Bonferroni level sig_level / number of simulated SNPs.

    Returns:
        One row per SNP: snp, maf, pct_var, replicates, rejections, rate, se
    """
    genotypes = simulate_genotypes(spec)
    m = genotypes.m
    alpha = settings.alpha if settings.alpha is not None else settings.sig_level / m
    outer, inner = split_budget(settings.threads, spec.replicates)
    replicate_settings = replace(settings, threads=inner, fit=replace(settings.fit, threads=inner))
    logger.info(f"Power study: {spec.replicates} replicates, {m} SNPs, alpha {alpha:.3g} ({settings.test} test)")
    p_values = np.array(map_ordered(
        lambda r: _replicate_pvalues(spec, genotypes, r, replicate_settings),
        range(spec.replicates), threads=outer, desc="Replicates", total=spec.replicates, unit="rep",
    )).reshape(spec.replicates, m)

    rejections = np.sum(p_values < alpha, axis=0)
    counted = np.sum(np.isfinite(p_values), axis=0)
    rate = rejections / spec.replicates
    se = np.sqrt(rate * (1.0 - rate) / spec.replicates) if spec.replicates > 1 else np.full(m, np.nan)
    maf = genotypes.codes().astype(np.float64)
    observed = maf >= 0
    with np.errstate(invalid='ignore', divide='ignore'):
        freq = np.where(observed, maf, 0).sum(axis=1) / (2.0 * observed.sum(axis=1))
    return pd.DataFrame({
        'snp': [s.name for s in genotypes.snps],
        'maf': np.minimum(freq, 1.0 - freq),
        'pct_var': [spec.percent_variance(s) for s in range(m)],
        'replicates': spec.replicates,
        'tested': counted,
        'rejections': rejections,
        'rate': rate,
        'se': se,
    })


def write_power_table(table: pd.DataFrame, path: str, seed: int, alpha: float) -> None:
    """Power table TSV headed by the generator name, seed and rejection level"""
    with open(path, 'w') as f:
        f.write(f"# rng = {RNG_NAME}\n")
        f.write(f"# seed = {seed}\n")
        f.write(f"# alpha = {alpha:.6g}\n")
        table.to_csv(f, sep="\t", index=False, na_rep="NA", float_format="%.6g")
    logger.info(f"Wrote power table to {path}")
