"""
Genome-wide association scan: a score test of every SNP against the null
fit, then likelihood-ratio refinement of the top hits.

The null fit is shared read-only by all workers; per-block Omega^-1 pieces
are precomputed once in ScoreState so each SNP costs matrix products only.
"""

import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg as la
from scipy.stats import chi2

from .errors import ConfigError, DegenerateInputError, EmptyDataError, ModelError
from .genio import MISSING_CODE, AnalysisSet, GenotypeMatrix, Sex
from .helper.workers import map_ordered
from .qc import genomic_inflation, hwe_block
from .vcmodel import FitOptions, FitResult, refit_with_columns

logger = logging.getLogger(__name__)

X_DOSAGE_CODINGS = ("0/2", "0/1")
SCAN_COLUMNS = ["snp", "chr", "bp", "maf_all", "maf_founders", "hwe_p", "stat", "p", "tested_flag", "reason"]

REASON_NO_CALLS = "no_calls"
REASON_MONOMORPHIC = "monomorphic"
REASON_LOW_MAF = "low_maf"
REASON_COLLINEAR = "collinear"


@dataclass(frozen=True)
class ScanConfig:
    maf_min: float = 0.01
    top_k: int = 10
    test_df: Optional[int] = None
    x_male_dosage: str = "0/2"
    sig_level: float = 0.05
    fdr_level: float = 0.05
    block_size: int = 4096
    threads: int = 1
    collinear_tol: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.maf_min < 0.5:
            raise ConfigError(f"maf_min must lie in [0, 0.5), got {self.maf_min}")
        if self.top_k < 0:
            raise ConfigError(f"top_k must be >= 0, got {self.top_k}")
        if self.x_male_dosage not in X_DOSAGE_CODINGS:
            raise ConfigError(f"x_male_dosage must be one of {', '.join(X_DOSAGE_CODINGS)}")
        if not 0.0 < self.sig_level < 1.0 or not 0.0 < self.fdr_level < 1.0:
            raise ConfigError("sig_level and fdr_level must lie in (0, 1)")
        if self.block_size < 1:
            raise ConfigError("block_size must be positive")


class ScoreOutcome(NamedTuple):
    stat: float
    p_value: float
    reason: str = ""

    @property
    def tested(self) -> bool:
        return not self.reason


@dataclass(frozen=True)
class TopHit:
    snp: str
    chromosome: str
    base_pair: int
    index: int
    maf_founders: float
    hwe_p: float
    score_stat: float
    score_p: float
    lrt_stat: float = float("nan")
    lrt_p: float = float("nan")
    effects: Tuple[float, ...] = ()
    converged: bool = True


@dataclass(frozen=True, eq=False)
class ScanResult:
    records: pd.DataFrame
    top_hits: Tuple[TopHit, ...]
    lambda_gc: float
    bonferroni: float
    fdr_threshold: float
    tested_count: int
    test_df: int
    trait_names: Tuple[str, ...] = ()

    @property
    def tested(self) -> pd.DataFrame:
        return self.records[self.records["tested_flag"] == 1]


# ---------------------------------------------------------------------------
# Dosages
# ---------------------------------------------------------------------------

def x_linked_dosage(codes: np.ndarray, sexes: np.ndarray, male_coding: str = "0/2") -> np.ndarray:
    """
    Hemizygous recoding of X-linked calls

    Args:
        codes: Allele-count codes, one column per individual (1-D or SNPs x individuals)
        sexes: Sex code per individual
        male_coding: '0/2' keeps male homozygotes at 0 and 2, '0/1' maps 2 to 1

    Returns:
        Codes with male heterozygotes set to MISSING_CODE
    """
    out = np.array(codes, dtype=np.int8, copy=True)
    males = np.asarray(sexes) == Sex.MALE
    male_codes = out[..., males]
    male_codes[male_codes == 1] = MISSING_CODE
    if male_coding == "0/1":
        male_codes[male_codes == 2] = 1
    out[..., males] = male_codes
    return out


def _frequencies(codes: np.ndarray, columns: Optional[np.ndarray] = None, scale: np.ndarray = None):
    if columns is not None:
        codes = codes[:, columns]
        scale = None if scale is None else scale[columns]
    observed = codes != MISSING_CODE
    calls = observed.sum(axis=1)
    dosage = np.where(observed, codes, 0).astype(np.float64)
    if scale is None:
        alleles = 2.0 * calls
    else:
        alleles = (observed * scale[None, :]).sum(axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        p = dosage.sum(axis=1) / alleles
    return p, calls


# ---------------------------------------------------------------------------
# Score test
# ---------------------------------------------------------------------------

@dataclass
class _ScoreBlock:
    persons: np.ndarray
    trait_rows: List[np.ndarray]
    inverse: np.ndarray
    alpha: np.ndarray
    weighted_design: np.ndarray


class ScoreState:
    """
    Null-model pieces reused by every SNP

    With U = G' W r, V = G' W G - G' W A_C M A_C' W G, M = (A_C' W A_C)^-1
    and W = Omega^-1 taken block by block.
    """

    def __init__(self, nullfit: FitResult, collinear_tol: float = 1e-8):
        work = nullfit.work_frame
        self.nullfit = nullfit
        self.T = work.idx.trait_count
        self.rotation = work.rotation
        self.collinear_tol = collinear_tol
        self.M = nullfit.gamma_cov
        residual = work.y - work.mean.design @ nullfit.beta_hat
        reduced = work.mean.reduced_design
        idx = work.idx
        sigmas = [s for _, s in nullfit.sigma_hats]
        multipliers = [c.multiplier for c in work.cov.components]

        self.blocks: List[_ScoreBlock] = []
        for rows in idx.blocks:
            persons = idx.person[rows]
            trait = idx.trait[rows]
            cov = np.zeros((len(rows), len(rows)))
            for mult, sigma, component in zip(multipliers, sigmas, work.cov.components):
                cov += mult * sigma[np.ix_(trait, trait)] * component.kernel.values[np.ix_(persons, persons)]
            factor = la.cho_factor(cov, lower=True)
            inverse = la.cho_solve(factor, np.eye(len(rows)))
            self.blocks.append(_ScoreBlock(
                persons=persons,
                trait_rows=[np.flatnonzero(trait == t) for t in range(self.T)],
                inverse=inverse,
                alpha=inverse @ residual[rows],
                weighted_design=inverse @ reduced[rows],
            ))

        # complete single-person blocks (eigen fast path) are stacked for batched products
        self.stacked = self.rotation is not None
        if self.stacked:
            order = np.argsort([b.persons[0] for b in self.blocks])
            self.W = np.stack([self.blocks[k].inverse for k in order])
            self.alpha = np.stack([self.blocks[k].alpha for k in order])
            self.WX = np.stack([self.blocks[k].weighted_design for k in order])

    def _pieces(self, X: np.ndarray):
        S = X.shape[1]
        if self.stacked:
            U = X.T @ self.alpha
            V1 = np.einsum('is,itu->stu', X * X, self.W)
            B = np.einsum('is,itj->stj', X, self.WX)
            return U, V1, B
        r = self.M.shape[0]
        U = np.zeros((S, self.T))
        V1 = np.zeros((S, self.T, self.T))
        B = np.zeros((S, self.T, r))
        for block in self.blocks:
            Xg = X[block.persons]
            for u, rows_u in enumerate(block.trait_rows):
                if not len(rows_u):
                    continue
                Z = block.inverse[:, rows_u] @ Xg[rows_u]
                for t, rows_t in enumerate(block.trait_rows):
                    if len(rows_t):
                        V1[:, t, u] += np.einsum('rs,rs->s', Xg[rows_t], Z[rows_t])
            for t, rows_t in enumerate(block.trait_rows):
                if len(rows_t):
                    U[:, t] += Xg[rows_t].T @ block.alpha[rows_t]
                    B[:, t, :] += Xg[rows_t].T @ block.weighted_design[rows_t]
        return U, V1, B

    def score(self, dosages: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Score statistics for imputed dosages

        Args:
            dosages: n x S per-person allele counts in analysis order, no missing values

        Returns:
            (stat, p_value, collinear) arrays of length S; untested entries are nan
        """
        X = self.rotation.T @ dosages if self.rotation is not None else np.asarray(dosages, dtype=np.float64)
        U, V1, B = self._pieces(X)
        V = V1 - np.einsum('stj,jk,suk->stu', B, self.M, B)
        V = 0.5 * (V + np.swapaxes(V, 1, 2))
        eigenvalues, vectors = np.linalg.eigh(V)
        scale = np.linalg.eigvalsh(V1)[:, -1]
        collinear = eigenvalues[:, 0] <= self.collinear_tol * np.maximum(scale, np.finfo(float).tiny)
        projected = np.einsum('stk,st->sk', vectors, U)
        with np.errstate(divide='ignore', invalid='ignore'):
            stat = np.sum(projected ** 2 / eigenvalues, axis=1)
        stat = np.where(collinear, np.nan, np.clip(stat, 0.0, None))
        p_value = np.where(collinear, np.nan, chi2.sf(np.nan_to_num(stat), self.T))
        return stat, p_value, collinear


def impute_dosage(codes: np.ndarray) -> np.ndarray:
    """Replace missing calls by the mean observed dosage (2 x allele frequency)"""
    codes = np.asarray(codes)
    observed = codes != MISSING_CODE
    values = np.where(observed, codes, 0).astype(np.float64)
    counts = observed.sum(axis=-1, keepdims=True)
    with np.errstate(invalid='ignore', divide='ignore'):
        means = values.sum(axis=-1, keepdims=True) / counts
    means = np.where(counts > 0, means, 0.0)
    return np.where(observed, values, means)


def score_test(nullfit: FitResult, g: np.ndarray, state: Optional[ScoreState] = None) -> ScoreOutcome:
    """
    Efficient score test of one SNP with variance parameters held at the null fit

    Args:
        nullfit: Fitted null model
        g: Allele-count codes of the analyzed individuals (MISSING_CODE for missing)
        state: Precomputed ScoreState to reuse across calls

    Returns:
        ScoreOutcome; untested SNPs carry a reason and nan statistics
    """
    g = np.asarray(g)
    observed = g != MISSING_CODE
    if not observed.any():
        return ScoreOutcome(float("nan"), float("nan"), REASON_NO_CALLS)
    if np.ptp(g[observed]) == 0:
        return ScoreOutcome(float("nan"), float("nan"), REASON_MONOMORPHIC)
    state = state or ScoreState(nullfit)
    stat, p, collinear = state.score(impute_dosage(g)[:, None])
    if collinear[0]:
        return ScoreOutcome(float("nan"), float("nan"), REASON_COLLINEAR)
    return ScoreOutcome(float(stat[0]), float(p[0]))


class LrtOutcome(NamedTuple):
    stat: float
    p_value: float
    effects: Tuple[float, ...]
    converged: bool


def lrt_refine(nullfit: FitResult, g: np.ndarray, names: Sequence[str] = (),
               opts: FitOptions = FitOptions()) -> LrtOutcome:
    """
    Likelihood-ratio test with T SNP columns added to the mean, warm started at the null fit

    Args:
        nullfit: Fitted null model
        g: Allele-count codes of the analyzed individuals
        names: Coefficient names for the per-trait SNP effects

    Raises:
        ModelError: when the genotype is constant
    """
    g = np.asarray(g)
    observed = g != MISSING_CODE
    if not observed.any() or np.ptp(g[observed]) == 0:
        raise ModelError("Cannot refine a SNP with a constant genotype")
    T = nullfit.work_frame.idx.trait_count
    names = list(names) or [f"snp:{t}" for t in range(T)]
    alt = refit_with_columns(nullfit, impute_dosage(g), names, opts)
    stat = max(0.0, 2.0 * (alt.loglik - nullfit.loglik))
    if not alt.converged:
        logger.warning("Alternative fit did not converge; the score p-value is retained")
    return LrtOutcome(stat, float(chi2.sf(stat, T)), tuple(float(b) for b in alt.beta_hat[-T:]), alt.converged)


# ---------------------------------------------------------------------------
# Genome scan
# ---------------------------------------------------------------------------

def bonferroni_threshold(sig_level: float, tested_count: int) -> float:
    if tested_count < 1:
        raise EmptyDataError("No tested SNP for the Bonferroni threshold")
    return sig_level / tested_count


def benjamini_hochberg_threshold(p_values: Sequence[float], level: float = 0.05) -> float:
    """Largest p_(i) with p_(i) <= i * level / m; level / m when none qualifies"""
    p = np.sort(np.asarray(p_values, dtype=np.float64))
    m = len(p)
    if m == 0:
        raise EmptyDataError("No p-values for the FDR threshold")
    bounds = level * np.arange(1, m + 1) / m
    passing = np.flatnonzero(p <= bounds)
    return float(p[passing[-1]]) if len(passing) else level / m


def _snp_codes(G: GenotypeMatrix, index: int, sexes: np.ndarray, cfg: ScanConfig) -> np.ndarray:
    codes = G.codes(index, index + 1)[0]
    if G.snps[index].is_x_linked:
        codes = x_linked_dosage(codes, sexes, cfg.x_male_dosage)
    return codes


def _scan_block(G: GenotypeMatrix, start: int, state: ScoreState, cfg: ScanConfig,
                founders: np.ndarray, females: np.ndarray, sexes: np.ndarray,
                x_state: Optional[ScoreState] = None) -> pd.DataFrame:
    stop = min(start + cfg.block_size, G.m)
    raw = G.codes(start, stop)
    snps = G.snps[start:stop]
    x_linked = np.array([s.is_x_linked for s in snps], dtype=bool)
    codes = raw.copy()
    if x_linked.any():
        codes[x_linked] = x_linked_dosage(raw[x_linked], sexes, cfg.x_male_dosage)

    # alleles carried: 1 per male at X-linked SNPs under the 0/1 coding, else 2
    scale = np.where(sexes == Sex.MALE, 1.0, 2.0) if cfg.x_male_dosage == "0/1" else None
    p_all, calls = _frequencies(codes, scale=None)
    if scale is not None and x_linked.any():
        p_all[x_linked] = _frequencies(codes[x_linked], scale=scale)[0]
    p_founders, _ = _frequencies(codes, founders)
    if scale is not None and x_linked.any():
        p_founders[x_linked] = _frequencies(codes[x_linked], founders, scale)[0]
    maf_all = np.minimum(p_all, 1.0 - p_all)
    maf_founders = np.minimum(p_founders, 1.0 - p_founders)
    hwe_p = hwe_block(raw, founders, x_linked, females)

    observed = codes != MISSING_CODE
    lowest = np.where(observed, codes, 127).min(axis=1)
    highest = np.where(observed, codes, -128).max(axis=1)
    reason = np.full(len(snps), "", dtype=object)
    reason[(calls > 0) & (maf_all < cfg.maf_min)] = REASON_LOW_MAF
    reason[(calls > 0) & (lowest == highest)] = REASON_MONOMORPHIC
    reason[calls == 0] = REASON_NO_CALLS

    stat = np.full(len(snps), np.nan)
    p = np.full(len(snps), np.nan)
    untested = reason == ""
    # X-linked SNPs are scored against the null with X-linked kinship when one was fitted
    for scorer, rows in ((state, untested & ~x_linked), (state if x_state is None else x_state, untested & x_linked)):
        candidates = np.flatnonzero(rows)
        if len(candidates):
            s, pv, collinear = scorer.score(impute_dosage(codes[candidates]).T)
            stat[candidates] = s
            p[candidates] = pv
            reason[candidates[collinear]] = REASON_COLLINEAR

    return pd.DataFrame({
        'snp': [s.name for s in snps],
        'chr': [s.chromosome for s in snps],
        'bp': [s.base_pair for s in snps],
        'maf_all': maf_all,
        'maf_founders': maf_founders,
        'hwe_p': hwe_p,
        'stat': stat,
        'p': p,
        'tested_flag': (reason == "").astype(np.int8),
        'reason': reason,
    })


def genome_scan(analysis: AnalysisSet, nullfit: FitResult, cfg: ScanConfig = ScanConfig(),
                fit_opts: Optional[FitOptions] = None, x_nullfit: Optional[FitResult] = None) -> ScanResult:
    """
    Score-test every SNP, then LRT-refine the top_k

    Args:
        analysis: Analysis set whose genotypes are aligned with the null fit
        nullfit: Fitted null model
        cfg: Scan settings
        x_nullfit: Null fit with an X-linked kinship component, used for
            X-linked SNPs in place of nullfit

    Returns:
        ScanResult with per-SNP records in file order

    Raises:
        EmptyDataError: when no SNP is tested
    """
    G = analysis.genotypes
    if G is None:
        raise DegenerateInputError("genome_scan needs genotypes in the analysis set")
    T = nullfit.work_frame.idx.trait_count
    if cfg.test_df is not None and cfg.test_df != T:
        raise ConfigError(f"test_df {cfg.test_df} does not match the {T} fitted traits")
    if x_nullfit is not None and x_nullfit.work_frame.idx.trait_count != T:
        raise ConfigError("The X-linked null fit must model the same traits as the null fit")
    state = ScoreState(nullfit, cfg.collinear_tol)
    x_state = ScoreState(x_nullfit, cfg.collinear_tol) if x_nullfit is not None else None
    sexes = analysis.sexes()
    founders = analysis.founder_mask()
    females = sexes == Sex.FEMALE

    starts = G.block_starts(cfg.block_size)
    parts = map_ordered(
        lambda start: _scan_block(G, start, state, cfg, founders, females, sexes, x_state),
        starts, threads=cfg.threads, desc="Score scan", unit="block",
    )
    records = pd.concat(parts, ignore_index=True) if parts else pd.DataFrame(columns=SCAN_COLUMNS)
    tested = records["tested_flag"].to_numpy() == 1
    tested_count = int(tested.sum())
    if tested_count == 0:
        raise EmptyDataError(f"No SNP passed the scan filters ({len(records)} SNPs screened)")

    reasons = records.loc[~tested, "reason"].value_counts()
    for reason, count in reasons.items():
        logger.info(f"Untested SNPs ({reason}): {count}")

    p_tested = records.loc[tested, "p"].to_numpy()
    bonferroni = bonferroni_threshold(cfg.sig_level, tested_count)
    fdr = benjamini_hochberg_threshold(p_tested, cfg.fdr_level)
    lambda_gc = genomic_inflation(p_tested)
    logger.info(
        f"Scanned {len(records)} SNPs, {tested_count} tested; Bonferroni {bonferroni:.3g}, "
        f"FDR {fdr:.3g}, lambda_GC {lambda_gc:.4f}"
    )

    tested_rows = np.flatnonzero(tested)
    order = tested_rows[np.lexsort((tested_rows, records["p"].to_numpy()[tested_rows]))]
    top_rows = order[:cfg.top_k]
    trait_names = analysis.traits.trait_names
    opts = fit_opts or FitOptions(threads=1)

    def refine(row: int) -> TopHit:
        snp = G.snps[row]
        codes = _snp_codes(G, row, sexes, cfg)
        base = x_nullfit if (snp.is_x_linked and x_nullfit is not None) else nullfit
        lrt = lrt_refine(base, codes, [f"{t}:{snp.name}" for t in trait_names], opts)
        return TopHit(
            snp=snp.name, chromosome=snp.chromosome, base_pair=snp.base_pair, index=int(row),
            maf_founders=float(records.at[row, "maf_founders"]), hwe_p=float(records.at[row, "hwe_p"]),
            score_stat=float(records.at[row, "stat"]), score_p=float(records.at[row, "p"]),
            lrt_stat=lrt.stat, lrt_p=lrt.p_value, effects=lrt.effects, converged=lrt.converged,
        )

    top_hits = map_ordered(refine, list(top_rows), threads=cfg.threads, desc="LRT refine", unit="snp")
    return ScanResult(
        records=records,
        top_hits=tuple(top_hits),
        lambda_gc=lambda_gc,
        bonferroni=bonferroni,
        fdr_threshold=fdr,
        tested_count=tested_count,
        test_df=T,
        trait_names=tuple(trait_names),
    )


def write_scan_tsv(result: ScanResult, path: str) -> None:
    result.records.to_csv(path, sep="\t", index=False, columns=SCAN_COLUMNS, na_rep="NA", float_format="%.6g")
    logger.info(f"Wrote {len(result.records)} SNP records to {path}")


def top_hits_frame(result: ScanResult) -> pd.DataFrame:
    rows = []
    for hit in result.top_hits:
        row = {
            'snp': hit.snp, 'chr': hit.chromosome, 'bp': hit.base_pair,
            'maf_founders': hit.maf_founders, 'hwe_p': hit.hwe_p,
            'score_stat': hit.score_stat, 'score_p': hit.score_p,
            'lrt_stat': hit.lrt_stat, 'lrt_p': hit.lrt_p, 'lrt_converged': int(hit.converged),
        }
        for name, effect in zip(result.trait_names, hit.effects):
            row[f"effect_{name}"] = effect
        rows.append(row)
    columns = ['snp', 'chr', 'bp', 'maf_founders', 'hwe_p', 'score_stat', 'score_p',
               'lrt_stat', 'lrt_p', 'lrt_converged'] + [f"effect_{t}" for t in result.trait_names]
    return pd.DataFrame(rows, columns=columns)


def write_top_hits_tsv(result: ScanResult, path: str) -> None:
    top_hits_frame(result).to_csv(path, sep="\t", index=False, na_rep="NA", float_format="%.6g")
