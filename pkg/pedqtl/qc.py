"""
Quality control: call-rate filtering, Hardy-Weinberg exact tests in founders
and the genomic inflation factor.
"""

import os
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import chi2

from .errors import EmptyDataError
from .genio import MISSING_CODE, GenotypeMatrix
from .helper.workers import map_ordered

logger = logging.getLogger(__name__)

DEFAULT_CALL_RATE = 0.98
CHI2_1DF_MEDIAN = float(chi2.ppf(0.5, 1))
HWE_TIE_RTOL = 1e-7


@dataclass(frozen=True)
class QcReport:
    """Counts and reasons for everything QC removed; dropped + retained = input"""
    snps_input: int
    individuals_input: int
    call_rate_threshold: float
    snps_dropped: Dict[str, str] = field(default_factory=dict)
    individuals_dropped: Dict[str, str] = field(default_factory=dict)
    hwe: Dict[str, float] = field(default_factory=dict)
    lambda_gc: Optional[float] = None

    @property
    def snps_retained(self) -> int:
        return self.snps_input - len(self.snps_dropped)

    @property
    def individuals_retained(self) -> int:
        return self.individuals_input - len(self.individuals_dropped)

    def with_join_drops(self, dropped: Mapping[str, str]) -> "QcReport":
        """Merge individuals removed while joining pedigrees and phenotypes"""
        merged = dict(dropped)
        merged.update(self.individuals_dropped)
        return replace(self, individuals_input=self.individuals_input + len(dropped),
                       individuals_dropped=merged)


def _call_counts(G: GenotypeMatrix, snp_rows: np.ndarray, individuals: np.ndarray,
                 block_size: int, threads: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-SNP and per-individual observed call counts over the given SNPs and individuals"""
    starts = list(range(0, len(snp_rows), block_size))

    def count(start: int):
        rows = snp_rows[start:start + block_size]
        codes = G.select_snps(rows).codes()[:, individuals]
        observed = codes != MISSING_CODE
        return observed.sum(axis=1), observed.sum(axis=0)

    parts = map_ordered(count, starts, threads=threads, desc="call rates", unit="block")
    per_snp = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0, dtype=np.int64)
    per_person = np.sum([p[1] for p in parts], axis=0) if parts else np.zeros(len(individuals), dtype=np.int64)
    return per_snp, per_person


def call_rate_filter(G: GenotypeMatrix, threshold: float = DEFAULT_CALL_RATE,
                     block_size: int = 4096, threads: int = 1) -> Tuple[GenotypeMatrix, QcReport]:
    """
    Drop SNPs, then individuals, whose call rate is below threshold

    The SNP pass and the individual pass alternate until neither drops
    anything, so the retained matrix is a fixed point of the filter.

    Args:
        G: Genotype matrix
        threshold: Minimum call rate in (0, 1]

    Returns:
        (filtered genotypes, QcReport)
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"call rate threshold must lie in (0, 1], got {threshold}")
    snp_keep = np.ones(G.m, dtype=bool)
    person_keep = np.ones(G.n, dtype=bool)
    snps_dropped: Dict[str, str] = {}
    individuals_dropped: Dict[str, str] = {}

    passes = 0
    while True:
        passes += 1
        changed = False
        individuals = np.flatnonzero(person_keep)
        rows = np.flatnonzero(snp_keep)
        per_snp, _ = _call_counts(G, rows, individuals, block_size, threads)
        failing = rows[per_snp < threshold * len(individuals)]
        for r in failing:
            snps_dropped[G.snps[r].name] = "call_rate"
        if len(failing):
            snp_keep[failing] = False
            changed = True

        rows = np.flatnonzero(snp_keep)
        _, per_person = _call_counts(G, rows, individuals, block_size, threads)
        failing = individuals[per_person < threshold * len(rows)]
        for i in failing:
            individuals_dropped[G.sample_ids[i]] = "call_rate"
        if len(failing):
            person_keep[failing] = False
            changed = True
        if not changed or not snp_keep.any() or not person_keep.any():
            break

    if not snp_keep.any() or not person_keep.any():
        raise EmptyDataError(
            f"Call-rate filter at {threshold} removed every "
            f"{'SNP' if not snp_keep.any() else 'individual'}"
        )
    logger.info(
        f"Call-rate QC at {threshold}: dropped {len(snps_dropped)} of {G.m} SNPs and "
        f"{len(individuals_dropped)} of {G.n} individuals ({passes} passes)"
    )
    filtered = G.select_snps(np.flatnonzero(snp_keep))
    if not person_keep.all():
        filtered = filtered.select_individuals([G.sample_ids[i] for i in np.flatnonzero(person_keep)])
    report = QcReport(
        snps_input=G.m,
        individuals_input=G.n,
        call_rate_threshold=threshold,
        snps_dropped=snps_dropped,
        individuals_dropped=individuals_dropped,
    )
    return filtered, report


@lru_cache(maxsize=65536)
def _hwe_distribution_cached(n: int, n_minor: int) -> Tuple[float, ...]:
    probs = np.zeros(n_minor + 1)
    if n_minor == 0:
        probs[0] = 1.0
        return tuple(probs)
    mid = n_minor * (2 * n - n_minor) // (2 * n)
    if (mid % 2) != (n_minor % 2):
        mid += 1
    probs[mid] = 1.0

    hets = mid
    hom_minor = (n_minor - mid) // 2
    hom_major = n - mid - hom_minor
    while hets > 1:
        probs[hets - 2] = probs[hets] * hets * (hets - 1) / (4.0 * (hom_minor + 1) * (hom_major + 1))
        hets -= 2
        hom_minor += 1
        hom_major += 1

    hets = mid
    hom_minor = (n_minor - mid) // 2
    hom_major = n - mid - hom_minor
    while hets <= n_minor - 2:
        probs[hets + 2] = probs[hets] * 4.0 * hom_minor * hom_major / ((hets + 2.0) * (hets + 1.0))
        hets += 2
        hom_minor -= 1
        hom_major -= 1

    return tuple(probs / probs.sum())


def hwe_distribution(n: int, n_minor: int) -> np.ndarray:
    """
    Exact null distribution of the heterozygote count

    Args:
        n: Number of genotyped individuals
        n_minor: Minor allele count (0 <= n_minor <= n)

    Returns:
        Probabilities indexed by heterozygote count 0..n_minor (zero off parity)
    """
    if n <= 0:
        raise ValueError("hwe_distribution needs at least one genotype")
    if not 0 <= n_minor <= n:
        raise ValueError(f"minor allele count {n_minor} out of range for {n} genotypes")
    return np.array(_hwe_distribution_cached(int(n), int(n_minor)))


def hwe_exact_counts(hom_a: int, het: int, hom_b: int) -> float:
    """Exact HWE p-value from genotype counts; nan when nothing is genotyped"""
    n = hom_a + het + hom_b
    if n == 0:
        return float("nan")
    n_minor = min(2 * hom_a + het, 2 * hom_b + het)
    probs = _hwe_distribution_cached(int(n), int(n_minor))
    observed = probs[het]
    p = sum(q for q in probs if q <= observed * (1.0 + HWE_TIE_RTOL))
    return float(min(1.0, p))


def hwe_exact_founders(codes: np.ndarray) -> float:
    """
    Exact Hardy-Weinberg test on founder genotype codes

    Args:
        codes: Allele-count codes of the founders (MISSING_CODE for missing)

    Returns:
        p-value, or nan with no genotyped founders
    """
    codes = np.asarray(codes)
    return hwe_exact_counts(int(np.sum(codes == 0)), int(np.sum(codes == 1)), int(np.sum(codes == 2)))


def hwe_block(codes: np.ndarray, founders: np.ndarray, x_linked: np.ndarray, females: np.ndarray) -> np.ndarray:
    """HWE p-values for a SNP block; X-linked SNPs use female founders only"""
    autosomal = codes[:, founders]
    x_codes = codes[:, founders & females]
    out = np.empty(codes.shape[0])
    for s in range(codes.shape[0]):
        row = x_codes[s] if x_linked[s] else autosomal[s]
        out[s] = hwe_exact_counts(int(np.sum(row == 0)), int(np.sum(row == 1)), int(np.sum(row == 2)))
    return out


def genomic_inflation(p_values: Sequence[float]) -> float:
    """
    lambda_GC = median 1-df chi-square quantile of the p-values over the null median

    Multi-df p-values are converted to 1-df quantiles first so the factor is
    comparable across trait counts.
    """
    p = np.asarray(p_values, dtype=np.float64)
    p = p[np.isfinite(p)]
    if len(p) == 0:
        raise EmptyDataError("genomic inflation needs at least one p-value")
    return float(np.median(chi2.isf(p, 1)) / CHI2_1DF_MEDIAN)


def summarize(report: QcReport) -> str:
    """Human-readable QC summary"""
    lines = [
        f"Call rate threshold: {report.call_rate_threshold:g}",
        f"SNPs: {report.snps_input} input, {len(report.snps_dropped)} dropped, {report.snps_retained} retained",
        f"Individuals: {report.individuals_input} input, {len(report.individuals_dropped)} dropped, "
        f"{report.individuals_retained} retained",
    ]
    reasons = pd.Series(list(report.individuals_dropped.values()), dtype=object).value_counts()
    for reason in sorted(reasons.index):
        lines.append(f"  individuals dropped ({reason}): {reasons[reason]}")
    if report.hwe:
        values = np.array(list(report.hwe.values()))
        finite = values[np.isfinite(values)]
        lines.append(f"HWE tests in founders: {len(finite)} SNPs, {int(np.sum(finite < 1e-8))} with p < 1e-8")
    if report.lambda_gc is not None:
        lines.append(f"Genomic inflation factor: {report.lambda_gc:.4f}")
    return "\n".join(lines) + "\n"


def write_qc_report(report: QcReport, directory: str) -> None:
    """qc_report.txt plus qc_dropped.tsv listing every dropped SNP and individual"""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "qc_report.txt"), 'w') as f:
        f.write(summarize(report))
    rows = [("snp", name, reason) for name, reason in report.snps_dropped.items()]
    rows += [("individual", pid, reason) for pid, reason in report.individuals_dropped.items()]
    frame = pd.DataFrame(rows, columns=["kind", "id", "reason"])
    frame.to_csv(os.path.join(directory, "qc_dropped.tsv"), sep="\t", index=False)
    logger.info(f"Wrote QC report to {directory}")
