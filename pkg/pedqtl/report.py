"""
Manhattan, QQ and lambda histogram plots as SVG, each written beside a TSV
of the plotted series, and the top-hits text table.

Figures are built with the object-oriented matplotlib API (no pyplot state)
and saved with a fixed hash salt and no date so identical input gives
byte-identical files.
"""

import os
import logging
import threading
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import matplotlib
from matplotlib.figure import Figure

from .errors import EmptyDataError
from .qc import genomic_inflation
from .scan import ScanResult

logger = logging.getLogger(__name__)

P_FLOOR = 1e-300
SVG_HASHSALT = "pedqtl"
HWE_SUSPECT = 1e-8
_SAVE_LOCK = threading.Lock()
CHROMOSOME_TONES = ("#1f4e79", "#7fa7d1")
THRESHOLD_COLORS = ("#c0392b", "#e67e22", "#27ae60")
TOP_HITS_COLUMNS = ["SNP", "chr", "bp", "founder_MAF", "neg_log10_p", "HWE_p", "flag"]


@dataclass(frozen=True, eq=False)
class PlotSpec:
    """Points as (chr, bp, -log10 p) plus labelled threshold p-values"""
    points: pd.DataFrame
    thresholds: Tuple[Tuple[str, float], ...]
    path: str


def neg_log10(p_values) -> np.ndarray:
    """-log10 p with p floored at 1e-300"""
    p = np.asarray(p_values, dtype=np.float64)
    return -np.log10(np.clip(p, P_FLOOR, 1.0))


def chromosome_key(name: str) -> Tuple[int, int, str]:
    """Genomic order: 1..22, then X, Y, XY, MT, then anything else alphabetically"""
    text = str(name).upper().removeprefix("CHR")
    if text.isdigit():
        return (0, int(text), "")
    special = {"X": 23, "Y": 24, "XY": 25, "MT": 26, "M": 26}
    if text in special:
        return (0, special[text], "")
    return (1, 0, text)


def _save(fig: Figure, path: str) -> None:
    # rc_context swaps the global rcParams
    with _SAVE_LOCK, matplotlib.rc_context({'svg.hashsalt': SVG_HASHSALT, 'svg.fonttype': 'path'}):
        fig.savefig(path, format="svg", metadata={'Date': None})


def _tsv_path(path: str, suffix: str = "") -> str:
    stem, _ = os.path.splitext(path)
    return f"{stem}{suffix}.tsv"


def scan_plot_spec(result: ScanResult, path: str) -> PlotSpec:
    tested = result.tested
    points = pd.DataFrame({
        'snp': tested["snp"].to_numpy(),
        'chr': tested["chr"].astype(str).to_numpy(),
        'bp': tested["bp"].to_numpy(),
        'neg_log10_p': neg_log10(tested["p"].to_numpy()),
    })
    thresholds = (("bonferroni", result.bonferroni), ("fdr", result.fdr_threshold))
    return PlotSpec(points, thresholds, path)


def manhattan_svg(spec: PlotSpec) -> pd.DataFrame:
    """
    Manhattan plot with chromosomes in genomic order and horizontal threshold lines

    Returns:
        The plotted points (with genome-wide x positions); also written as TSV
        next to the SVG, thresholds in a second TSV
    """
    if spec.points.empty:
        raise EmptyDataError("Manhattan plot needs at least one point")
    points = spec.points.copy()
    points["chr"] = points["chr"].astype(str)
    chromosomes = sorted(points["chr"].unique(), key=chromosome_key)
    rank = {c: i for i, c in enumerate(chromosomes)}
    points["_rank"] = points["chr"].map(rank)
    points = points.sort_values(["_rank", "bp"], kind="mergesort").reset_index(drop=True)

    offsets = {}
    position = 0.0
    centers = []
    for chromosome in chromosomes:
        bp = points.loc[points["chr"] == chromosome, "bp"].to_numpy(dtype=np.float64)
        low, high = bp.min(), bp.max()
        offsets[chromosome] = position - low
        centers.append(position + 0.5 * (high - low))
        position += (high - low) + max(1.0, 0.02 * max(high - low, 1.0)) + 1.0
    points["x"] = points["bp"].astype(np.float64) + points["chr"].map(offsets)

    fig = Figure(figsize=(10, 4))
    ax = fig.add_subplot(1, 1, 1)
    for chromosome in chromosomes:
        subset = points[points["chr"] == chromosome]
        ax.scatter(subset["x"], subset["neg_log10_p"], s=6, linewidths=0,
                   color=CHROMOSOME_TONES[rank[chromosome] % 2])
    lines = []
    for k, (label, value) in enumerate(spec.thresholds):
        y = float(neg_log10(value))
        ax.axhline(y, color=THRESHOLD_COLORS[k % len(THRESHOLD_COLORS)], linewidth=0.8, linestyle="--", label=label)
        lines.append((label, value, y))
    ax.set_xticks(centers)
    ax.set_xticklabels(chromosomes, fontsize=7)
    ax.set_xlabel("Chromosome")
    ax.set_ylabel("-log10(p)")
    ax.set_ylim(bottom=0)
    if lines:
        ax.legend(loc="upper right", fontsize=7, frameon=False)
    fig.tight_layout()
    _save(fig, spec.path)

    plotted = points[["snp", "chr", "bp", "x", "neg_log10_p"]] if "snp" in points else points[["chr", "bp", "x", "neg_log10_p"]]
    plotted.to_csv(_tsv_path(spec.path), sep="\t", index=False, float_format="%.6g")
    pd.DataFrame(lines, columns=["threshold", "p", "neg_log10_p"]).to_csv(
        _tsv_path(spec.path, "_thresholds"), sep="\t", index=False, float_format="%.6g")
    logger.info(f"Wrote Manhattan plot of {len(points)} SNPs to {spec.path}")
    return plotted


def qq_points(p_values: Sequence[float]) -> pd.DataFrame:
    """Sorted observed -log10 p against expected -log10((i - 0.5) / m)"""
    p = np.sort(np.asarray(p_values, dtype=np.float64))
    m = len(p)
    expected = -np.log10((np.arange(1, m + 1) - 0.5) / m)
    return pd.DataFrame({'expected': expected, 'observed': neg_log10(p)})


def qq_plot_svg(p_values: Sequence[float], path: str, lambda_gc: Optional[float] = None) -> pd.DataFrame:
    """QQ plot with the identity line and the genomic inflation factor annotated"""
    points = qq_points(p_values)
    if points.empty:
        raise EmptyDataError("QQ plot needs at least one p-value")
    lambda_gc = genomic_inflation(p_values) if lambda_gc is None else lambda_gc

    fig = Figure(figsize=(4.5, 4.5))
    ax = fig.add_subplot(1, 1, 1)
    limit = float(max(points["expected"].max(), points["observed"].max())) * 1.05 or 1.0
    ax.plot([0, limit], [0, limit], color="#888888", linewidth=0.8)
    ax.scatter(points["expected"], points["observed"], s=6, linewidths=0, color=CHROMOSOME_TONES[0])
    ax.text(0.05, 0.92, f"lambda_GC = {lambda_gc:.3f}", transform=ax.transAxes, fontsize=8)
    ax.set_xlabel("Expected -log10(p)")
    ax.set_ylabel("Observed -log10(p)")
    fig.tight_layout()
    _save(fig, path)
    points.to_csv(_tsv_path(path), sep="\t", index=False, float_format="%.6g")
    logger.info(f"Wrote QQ plot of {len(points)} p-values to {path}")
    return points


def lambda_histogram_svg(lambdas: Sequence[float], path: str, labels: Sequence[str] = (),
                         bins: int = 30) -> pd.DataFrame:
    """Histogram of per-trait genomic inflation factors; the TSV lists every trait's value"""
    values = np.asarray(lambdas, dtype=np.float64)
    if len(values) == 0:
        raise EmptyDataError("Lambda histogram needs at least one value")
    fig = Figure(figsize=(5, 3.5))
    ax = fig.add_subplot(1, 1, 1)
    ax.hist(values, bins=min(bins, max(1, len(values))), color=CHROMOSOME_TONES[1],
            edgecolor=CHROMOSOME_TONES[0])
    ax.set_xlabel("lambda_GC")
    ax.set_ylabel("Traits")
    fig.tight_layout()
    _save(fig, path)
    table = pd.DataFrame({
        'trait': list(labels) or [str(i) for i in range(len(values))],
        'lambda_gc': values,
    })
    table.to_csv(_tsv_path(path), sep="\t", index=False, float_format="%.6g")
    logger.info(f"Wrote lambda histogram of {len(values)} traits to {path}")
    return table


def top_hits_rows(result: ScanResult, k: int, hwe_suspect: float = HWE_SUSPECT) -> pd.DataFrame:
    """The k smallest score p-values in file order for ties, with HWE-suspect rows flagged"""
    tested = result.tested
    order = np.lexsort((tested.index.to_numpy(), tested["p"].to_numpy()))
    top = tested.iloc[order[:k]]
    return pd.DataFrame({
        'SNP': top["snp"].to_numpy(),
        'chr': top["chr"].to_numpy(),
        'bp': top["bp"].to_numpy(),
        'founder_MAF': top["maf_founders"].to_numpy(),
        'neg_log10_p': neg_log10(top["p"].to_numpy()),
        'HWE_p': top["hwe_p"].to_numpy(),
        'flag': np.where(top["hwe_p"].to_numpy() < hwe_suspect, "suspect", ""),
    }, columns=TOP_HITS_COLUMNS)


def _cell(value) -> str:
    if isinstance(value, (float, np.floating)):
        return "NA" if np.isnan(value) else f"{value:.4g}"
    return str(value)


def top_hits_table(result: ScanResult, k: int, hwe_suspect: float = HWE_SUSPECT) -> str:
    """Tab-separated text table headed by the thresholds drawn in the Manhattan plot"""
    frame = top_hits_rows(result, k, hwe_suspect)
    lines = [
        f"# bonferroni = {result.bonferroni:.6g} (-log10 = {float(neg_log10(result.bonferroni)):.2f})",
        f"# fdr = {result.fdr_threshold:.6g} (-log10 = {float(neg_log10(result.fdr_threshold)):.2f})",
        f"# lambda_gc = {result.lambda_gc:.4f}",
        "\t".join(TOP_HITS_COLUMNS),
    ]
    for row in frame.itertuples(index=False):
        lines.append("\t".join(_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def write_scan_report(result: ScanResult, out_dir: str, k: Optional[int] = None,
                      hwe_suspect: float = HWE_SUSPECT) -> None:
    """manhattan.svg, qq.svg (each with its TSV) and top_hits.txt"""
    os.makedirs(out_dir, exist_ok=True)
    manhattan_svg(scan_plot_spec(result, os.path.join(out_dir, "manhattan.svg")))
    qq_plot_svg(result.tested["p"].to_numpy(), os.path.join(out_dir, "qq.svg"), result.lambda_gc)
    k = len(result.top_hits) if k is None else k
    with open(os.path.join(out_dir, "top_hits.txt"), 'w') as f:
        f.write(top_hits_table(result, k, hwe_suspect))
