"""
Analysis pipeline: ingestion, QC, kinship, null fit, scan and report, run
stage by stage from a control file. Batch mode reuses prepare_data and
model_kernels; the power harness reuses fit_null_model.
"""

import os
import logging
from dataclasses import dataclass, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .control import SIMULATION_SECTION, ControlFile
from .errors import ConfigError, DegenerateInputError
from .genio import (AnalysisSet, GenotypeMatrix, Pedigree, TraitTable, join_samples, read_genotype_prefixes,
                    read_pedigree_csv, read_traits_csv)
from .helper.timing import StageTimer
from .kinship import KernelMatrix, export_kernel
from .qc import QcReport, call_rate_filter, write_qc_report
from .report import write_scan_report
from .scan import ScanConfig, genome_scan, write_scan_tsv, write_top_hits_tsv
from .simulate import CovariateSpec, PowerSettings, SimSpec, power_study, write_power_table
from .vcmodel import (COMPONENT_MULTIPLIERS, CovariateTerm, FitOptions, build_kernels, covariate_columns,
                      fit_null_model, parse_covariate_terms, pedigree_outlier_report, write_null_summary,
                      write_outlier_report)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data preparation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PreparedData:
    pedigrees: Tuple[Pedigree, ...]
    analysis: AnalysisSet
    qc_report: QcReport
    genotypes: Optional[GenotypeMatrix]
    terms: Tuple[CovariateTerm, ...]


def fit_options(control: ControlFile, threads: Optional[int] = None) -> FitOptions:
    return FitOptions(tol=control['tol'], max_iter=control['max_iter'],
                      threads=threads if threads is not None else control['threads'])


def prepare_data(control: ControlFile, trait_names: Sequence[str], timer: StageTimer,
                 with_genotypes: bool = True, model_traits: Optional[int] = None) -> PreparedData:
    """
    Read, QC and join the inputs

    Covariate terms are laid out for model_traits traits (default: all of
    trait_names); batch mode fits one trait at a time.

    QC-dropped individuals are removed from the analysis set with reason
    call_rate; join drops are merged into the QC report.
    """
    with timer.stage("ingest"):
        pedigrees = read_pedigree_csv(control['pedigree_file'])
        terms = tuple(parse_covariate_terms(control.get('covariates', ()), model_traits or len(trait_names)))
        traits = read_traits_csv(control['phenotype_file'], trait_names, covariate_columns(terms),
                                 id_col=control.get('id_column'))
        genotypes = None
        if with_genotypes and 'genotype_file' in control:
            genotypes = read_genotype_prefixes(list(control['genotype_file']), pedigrees)

    with timer.stage("qc"):
        if genotypes is not None:
            genotypes, report = call_rate_filter(genotypes, control['call_rate_min'],
                                                 block_size=control['block_size'], threads=control['threads'])
        else:
            report = QcReport(snps_input=0, individuals_input=0, call_rate_threshold=control['call_rate_min'])
        analysis = join_samples(pedigrees, traits, genotypes)
        failed = set(report.individuals_dropped)
        if failed:
            analysis = analysis.restrict(np.array([pid not in failed for pid in analysis.person_ids]), "call_rate")
        join_drops = {pid: reason for pid, reason in analysis.dropped.items() if pid not in failed}
        report = report.with_join_drops(join_drops)
        if analysis.n == 0:
            raise DegenerateInputError("No individual remains after joining pedigrees, phenotypes and genotypes")
    return PreparedData(tuple(pedigrees), analysis, report, genotypes, terms)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def scan_config(control: ControlFile, threads: Optional[int] = None) -> ScanConfig:
    return ScanConfig(
        maf_min=control['maf_min'], top_k=control['top_k'], x_male_dosage=control['x_male_dosage'],
        sig_level=control['sig_level'], fdr_level=control['fdr_level'], block_size=control['block_size'],
        threads=threads if threads is not None else control['threads'],
    )


def x_scan_components(control: ControlFile, genotypes: Optional[GenotypeMatrix]) -> Tuple[str, ...]:
    """
    Components of the null model used for X-linked SNPs

    Empty when x_kinship_null is no, when x_additive is already fitted or
    when no X-linked SNP is present; otherwise the fitted components with
    x_additive added before environment.
    """
    components = tuple(control['components'])
    if control['x_kinship_null'] == "no" or "x_additive" in components or genotypes is None:
        return ()
    if not any(snp.is_x_linked for snp in genotypes.snps):
        return ()
    return tuple(c for c in components if c != "environment") + ("x_additive", "environment")


def model_kernels(control: ControlFile, analysis: AnalysisSet) -> Dict[str, KernelMatrix]:
    """Kernels of the fitted components plus those of the X-linked null model"""
    labels = list(dict.fromkeys(tuple(control['components']) + x_scan_components(control, analysis.genotypes)))
    return build_kernels(analysis, labels, control['kinship_mode'], control['block_size'], control['threads'])


def analyze_traits(control: ControlFile, analysis: AnalysisSet, kernels: Dict[str, KernelMatrix],
                   terms: Sequence[CovariateTerm], out_dir: str, timer: StageTimer,
                   threads: Optional[int] = None):
    """Null fit, scan and per-trait artifacts for one analysis set; returns the ScanResult"""
    os.makedirs(out_dir, exist_ok=True)
    opts = fit_options(control, threads)
    interactions, constrain = control.get('interactions', ()), control.get('constrain_equal', ())
    x_labels = x_scan_components(control, analysis.genotypes)
    with timer.stage("null_fit"):
        nullfit = fit_null_model(analysis, terms, interactions, constrain, opts=opts,
                                 kernels={c: kernels[c] for c in control['components']})
        write_null_summary(nullfit, os.path.join(out_dir, "null_summary.txt"), analysis.traits.trait_names)
        write_outlier_report(pedigree_outlier_report(nullfit), os.path.join(out_dir, "outliers.tsv"))
        x_nullfit = None
        if x_labels:
            logger.info(f"Fitting the X-linked null model ({', '.join(x_labels)}) for X-linked SNPs")
            x_nullfit = fit_null_model(analysis, terms, interactions, constrain, opts=opts,
                                       kernels={c: kernels[c] for c in x_labels})
            write_null_summary(x_nullfit, os.path.join(out_dir, "null_summary_x.txt"), analysis.traits.trait_names)
    with timer.stage("scan"):
        result = genome_scan(analysis, nullfit, scan_config(control, threads), fit_opts=replace(opts, threads=1),
                             x_nullfit=x_nullfit)
        write_scan_tsv(result, os.path.join(out_dir, "scan.tsv"))
        write_top_hits_tsv(result, os.path.join(out_dir, "top_hits.tsv"))
    with timer.stage("report"):
        write_scan_report(result, out_dir, k=control['top_k'], hwe_suspect=control['hwe_suspect'])
    return result


def run_scan(control: ControlFile) -> int:
    """Full pipeline for the traits named in the control file"""
    control.require("scan")
    timer = StageTimer()
    os.makedirs(control.output_dir, exist_ok=True)
    control.write_resolved()
    try:
        data = prepare_data(control, control['traits'], timer)
        with timer.stage("kinship"):
            kernels = model_kernels(control, data.analysis)
        result = analyze_traits(control, data.analysis, kernels, data.terms, control.output_dir, timer)
        report = replace(data.qc_report, lambda_gc=result.lambda_gc,
                         hwe=dict(zip(result.records["snp"], result.records["hwe_p"])))
        write_qc_report(report, control.output_dir)
    finally:
        timer.write(control.output_path("timings.txt"))
    logger.info(f"Scan finished; results in {control.output_dir}")
    return 0


def run_kinship(control: ControlFile) -> int:
    """Export the structure kernels of the requested components (identity excluded)"""
    control.require("kinship")
    timer = StageTimer()
    os.makedirs(control.output_dir, exist_ok=True)
    control.write_resolved()
    try:
        with timer.stage("ingest"):
            pedigrees = read_pedigree_csv(control['pedigree_file'])
            genotypes = None
            if 'genotype_file' in control:
                genotypes = read_genotype_prefixes(list(control['genotype_file']), pedigrees)
        with timer.stage("qc"):
            if genotypes is not None:
                genotypes, report = call_rate_filter(genotypes, control['call_rate_min'],
                                                     block_size=control['block_size'], threads=control['threads'])
                write_qc_report(report, control.output_dir)
            analysis = _everyone(pedigrees, genotypes)
        with timer.stage("kinship"):
            labels = [c for c in control['components'] if c != "environment"]
            kernels = build_kernels(analysis, labels, control['kinship_mode'],
                                    control['block_size'], control['threads'])
            for label, kernel in kernels.items():
                export_kernel(kernel, analysis.person_ids, control.output_path(f"kernel_{label}.tsv"))
    finally:
        timer.write(control.output_path("timings.txt"))
    return 0


def _everyone(pedigrees: Sequence[Pedigree], genotypes: Optional[GenotypeMatrix]) -> AnalysisSet:
    """Analysis set of every pedigree member with a placeholder trait"""
    ids = [pid for ped in pedigrees for pid in ped.person_ids]
    traits = TraitTable(tuple(ids), ("placeholder",), (), np.zeros((len(ids), 1)), np.zeros((len(ids), 0)))
    if genotypes is not None:
        ungenotyped = set(ids) - set(genotypes.sample_ids)
        if ungenotyped:
            logger.warning(f"{len(ungenotyped)} pedigree members have no genotypes; their SNP kinship uses missing calls")
    return join_samples(pedigrees, traits, genotypes)


def build_sim_spec(control: ControlFile, pedigrees: Sequence[Pedigree]) -> SimSpec:
    """SimSpec from the [simulation] section"""
    section = f"{SIMULATION_SECTION}."
    sigmas = {}
    for label in COMPONENT_MULTIPLIERS:
        key = f"{section}sigma_{label}"
        if key in control:
            sigmas[label] = control[key]
    T = sigmas['environment'].shape[0]
    covariates = []
    for parts in control.get(f"{section}covariates", ()):
        name, kind, effects = parts[0], parts[1], tuple(float(v) for v in parts[2].split("|"))
        if len(effects) != T:
            raise ConfigError(f"Simulated covariate {name} lists {len(effects)} effects for {T} traits")
        try:
            extra = [float(v) for v in parts[3:5]]
        except ValueError as e:
            raise ConfigError(f"Simulated covariate {name}: mean and sd must be numbers") from e
        covariates.append(CovariateSpec(name, kind, effects, *extra))
    intercept = control.get(f"{section}intercept", ())
    if intercept and len(intercept) != T:
        raise ConfigError(f"intercept lists {len(intercept)} values for {T} traits")
    names = control.get(f"{section}traits", ())
    if names and len(names) != T:
        raise ConfigError(f"[simulation] traits lists {len(names)} names for {T} traits")
    return SimSpec(
        pedigrees=tuple(pedigrees),
        founder_maf=np.asarray(control[f"{section}founder_maf"], dtype=np.float64),
        sigmas=sigmas,
        effects=tuple(control.get(f"{section}effects", ())),
        covariates=tuple(covariates),
        intercept=tuple(intercept),
        trait_names=tuple(names),
        replicates=control[f"{section}replicates"],
        seed=control['seed'],
    )


def run_power(control: ControlFile) -> int:
    """Power/size table for the [simulation] section"""
    control.require("power")
    timer = StageTimer()
    os.makedirs(control.output_dir, exist_ok=True)
    control.write_resolved()
    try:
        with timer.stage("ingest"):
            pedigrees = read_pedigree_csv(control['pedigree_file'])
            spec = build_sim_spec(control, pedigrees)
        with timer.stage("power"):
            components = list(control['components'])
            if "household" in spec.sigmas and "household" not in components:
                logger.warning("sigma_household is simulated but the household component is not fitted")
            settings = PowerSettings(
                alpha=control.get(f"{SIMULATION_SECTION}.alpha"), sig_level=control['sig_level'],
                test=control[f"{SIMULATION_SECTION}.test"], components=tuple(components),
                threads=control['threads'], fit=fit_options(control, 1),
            )
            table = power_study(spec, settings)
            alpha = settings.alpha if settings.alpha is not None else settings.sig_level / len(spec.founder_maf)
            write_power_table(table, control.output_path("power.tsv"), spec.seed, alpha)
    finally:
        timer.write(control.output_path("timings.txt"))
    return 0
