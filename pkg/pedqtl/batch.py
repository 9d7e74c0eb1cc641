"""
Batch multi-trait scanning: one ingestion, QC and kinship pass, then a
univariate null fit and scan per trait listed in batch_trait_list.

Per-trait artifacts go to <output_dir>/traits/<trait>/. The aggregate keeps
hits that pass the whole filter cascade: trait lambda_GC below lambda_max,
p below sig_level / n_traits / n_snps, founder HWE p above hwe_suspect,
founder MAF above maf_min and, with batch_annotation_file, an annotated trait.
"""

import os
import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from .control import ControlFile
from .errors import ConfigError, EmptyDataError, PedQtlError, SchemaError
from .genio import AnalysisSet
from .helper.timing import StageTimer
from .helper.workers import map_ordered, split_budget
from .kinship import KernelMatrix
from .pipeline import PreparedData, analyze_traits, model_kernels, prepare_data
from .qc import write_qc_report
from .report import lambda_histogram_svg
from .vcmodel import CovariateTerm, subset_kernels

logger = logging.getLogger(__name__)

TRAITS_DIR = "traits"
AGGREGATE_COLUMNS = ["trait", "snp", "chr", "bp", "maf_founders", "hwe_p", "stat", "p", "lambda_gc"]


def batch_significance(n_traits: int, n_snps: int, level: float = 0.05) -> float:
    """Whole-batch Bonferroni level: level / n_traits / n_snps"""
    if n_traits < 1 or n_snps < 1:
        raise ConfigError("Batch significance needs at least one trait and one SNP")
    return level / n_traits / n_snps


def read_trait_list(path: str) -> List[str]:
    """One trait column name per line; blank lines and '#' comments skipped, duplicates dropped"""
    names: Dict[str, None] = {}
    with open(path) as f:
        for line in f:
            name = line.split("#", 1)[0].strip()
            if name:
                names.setdefault(name, None)
    if not names:
        raise SchemaError(f"Trait list {path} names no traits")
    return list(names)


def read_annotated_traits(path: str) -> Set[str]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    if "trait" not in frame.columns:
        raise SchemaError(f"Annotation file {path} lacks a 'trait' column")
    return set(frame["trait"].str.strip())


def _phenotype_columns(path: str) -> List[str]:
    return list(pd.read_csv(path, nrows=0).columns)


@dataclass
class TraitOutcome:
    trait: str
    status: str
    reason: str = ""
    lambda_gc: float = np.nan
    tested_count: int = 0
    hits: Optional[pd.DataFrame] = None
    exit_code: int = 0


def trait_analysis(analysis: AnalysisSet, trait: str) -> Tuple[AnalysisSet, np.ndarray]:
    """
    Single-trait view of the analysis set, dropping individuals without that trait

    Returns:
        (view, rows) where rows index the kept individuals in the full set
    """
    traits = analysis.traits.select_traits([trait])
    keep = traits.value_mask.any(axis=1)
    view = replace(analysis, traits=traits).restrict(keep, "no_trait")
    return view, np.flatnonzero(keep)


def _analyze_one(control: ControlFile, data: PreparedData, kernels: Dict[str, KernelMatrix],
                 terms: Sequence[CovariateTerm], trait: str, threshold: float, threads: int) -> TraitOutcome:
    out_dir = control.output_path(TRAITS_DIR, trait)
    timer = StageTimer()
    try:
        analysis, rows = trait_analysis(data.analysis, trait)
        if analysis.n == 0:
            raise EmptyDataError(f"No analyzed individual has trait {trait}")
        result = analyze_traits(control, analysis, subset_kernels(kernels, rows), terms, out_dir, timer, threads)
    except PedQtlError as e:
        stage = getattr(e, 'stage', None) or timer.current_stage
        logger.warning(f"Trait {trait} failed in stage '{stage}': {e}")
        return TraitOutcome(trait, "failed", f"[{stage}] {e}", exit_code=e.exit_code)
    finally:
        if os.path.isdir(out_dir):
            timer.write(os.path.join(out_dir, "timings.txt"))

    tested = result.tested
    keep = (
        (tested["p"].to_numpy() < threshold)
        & (tested["hwe_p"].fillna(1.0).to_numpy() > control['hwe_suspect'])
        & (tested["maf_founders"].to_numpy() > control['maf_min'])
    )
    hits = tested.loc[keep, ["snp", "chr", "bp", "maf_founders", "hwe_p", "stat", "p"]].copy()
    hits.insert(0, "trait", trait)
    hits["lambda_gc"] = result.lambda_gc
    return TraitOutcome(trait, "ok", lambda_gc=result.lambda_gc, tested_count=result.tested_count, hits=hits)


def aggregate_hits(outcomes: Sequence[TraitOutcome], lambda_max: float,
                   annotated: Optional[Set[str]] = None) -> pd.DataFrame:
    """Concatenate per-trait hits from traits with lambda_GC < lambda_max (and annotated, when given)"""
    frames = []
    for outcome in outcomes:
        if outcome.status != "ok" or outcome.hits is None:
            continue
        if not outcome.lambda_gc < lambda_max:
            continue
        if annotated is not None and outcome.trait not in annotated:
            continue
        frames.append(outcome.hits)
    if not frames:
        return pd.DataFrame(columns=AGGREGATE_COLUMNS)
    return pd.concat(frames, ignore_index=True)[AGGREGATE_COLUMNS].sort_values("p", kind="mergesort")


def summarize_outcomes(outcomes: Sequence[TraitOutcome]) -> Dict[str, object]:
    """Counts in the {total, processed, failed, errors} shape"""
    results = {
        'total': len(outcomes),
        'processed': 0,
        'skipped': 0,
        'failed': 0,
        'errors': [],
    }
    for outcome in outcomes:
        if outcome.status == "ok":
            results['processed'] += 1
        elif outcome.status == "skipped":
            results['skipped'] += 1
        else:
            results['failed'] += 1
            results['errors'].append(f"{outcome.trait}: {outcome.reason}")
    return results


def write_batch_summary(outcomes: Sequence[TraitOutcome], path: str) -> None:
    frame = pd.DataFrame({
        'trait': [o.trait for o in outcomes],
        'status': [o.status for o in outcomes],
        'lambda_gc': [o.lambda_gc for o in outcomes],
        'tested': [o.tested_count for o in outcomes],
        'reason': [o.reason for o in outcomes],
    })
    frame.to_csv(path, sep="\t", index=False, na_rep="NA", float_format="%.6g")


def run_batch(control: ControlFile) -> int:
    """
    Scan every trait in batch_trait_list against the shared genotypes

    Returns:
        0 when at least one trait succeeded; otherwise the exit code of the
        first failure (skipped-only batches count as data errors)
    """
    control.require("batch")
    timer = StageTimer()
    os.makedirs(control.output_dir, exist_ok=True)
    control.write_resolved()
    outcomes: List[TraitOutcome] = []
    try:
        requested = read_trait_list(control['batch_trait_list'])
        available = set(_phenotype_columns(control['phenotype_file']))
        present = [t for t in requested if t in available]
        for trait in requested:
            if trait not in available:
                logger.warning(f"Skipping trait {trait}: absent from the phenotype file")
        if not present:
            raise SchemaError("None of the listed traits appears in the phenotype file")
        annotated = None
        if 'batch_annotation_file' in control:
            annotated = read_annotated_traits(control['batch_annotation_file'])

        data = prepare_data(control, present, timer, model_traits=1)
        with timer.stage("kinship"):
            kernels = model_kernels(control, data.analysis)
        n_snps = data.genotypes.m if data.genotypes is not None else 0
        threshold = batch_significance(len(present), n_snps, control['sig_level'])
        logger.info(f"Batch of {len(present)} traits x {n_snps} SNPs; significance level {threshold:.3g}")

        with timer.stage("traits"):
            outer, inner = split_budget(control['threads'], len(present))
            scanned = map_ordered(
                lambda trait: _analyze_one(control, data, kernels, data.terms, trait, threshold, inner),
                present, threads=outer, desc="Traits", unit="trait",
            )
        by_trait = {o.trait: o for o in scanned}
        outcomes = [by_trait.get(t) or TraitOutcome(t, "skipped", "absent from phenotype file") for t in requested]

        with timer.stage("aggregate"):
            write_qc_report(data.qc_report, control.output_dir)
            ok = [o for o in outcomes if o.status == "ok"]
            if ok:
                lambda_histogram_svg([o.lambda_gc for o in ok], control.output_path("lambda_hist.svg"),
                                     labels=[o.trait for o in ok])
            hits = aggregate_hits(outcomes, control['lambda_max'], annotated)
            hits.to_csv(control.output_path("batch_hits.tsv"), sep="\t", index=False,
                        na_rep="NA", float_format="%.6g")
            logger.info(f"Aggregate: {len(hits)} hits from {len(ok)} traits")
    finally:
        timer.write(control.output_path("timings.txt"))
        if outcomes:
            write_batch_summary(outcomes, control.output_path("batch_summary.tsv"))

    results = summarize_outcomes(outcomes)
    logger.info(f"Batch processing completed: {results['processed']} of {results['total']} traits, "
                f"{results['failed']} failed, {results['skipped']} skipped")
    if results['processed'] == 0:
        for error in results['errors']:
            logger.error(error)
        return _first_failure_code(scanned)
    return 0


def _first_failure_code(outcomes: Sequence[TraitOutcome]) -> int:
    for outcome in outcomes:
        if outcome.status == "failed":
            return outcome.exit_code
    return EmptyDataError.exit_code
