"""
Structure kernels for the variance component model: theoretical, X-linked and
SNP-based kinship, the dominance matrix delta7, household and identity.

Kinship is always on the kinship scale (outbred self-kinship 1/2); the
covariance model multiplies the additive kernel by 2.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Hashable, List, Optional, Sequence

import numpy as np
import scipy.linalg as la
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DegenerateInputError, UnsupportedStructureError
from .genio import MISSING_CODE, AnalysisSet, GenotypeMatrix, Pedigree, Sex
from .helper.workers import map_ordered

logger = logging.getLogger(__name__)

PSD_TOLERANCE = 1e-8
SYMMETRY_RTOL = 1e-12
DEFAULT_BLOCK_SIZE = 4096


class KernelKind(str, Enum):
    THEORETICAL_KINSHIP = "theoretical_kinship"
    GRM_KINSHIP = "grm_kinship"
    MOM_KINSHIP = "mom_kinship"
    DELTA7 = "delta7"
    HOUSEHOLD = "household"
    IDENTITY = "identity"
    X_KINSHIP = "x_kinship"


KINSHIP_MODES = ("theoretical", "grm_within_pedigree", "grm_global", "mom_global")


@dataclass(frozen=True, eq=False)
class KernelMatrix:
    values: np.ndarray
    kind: KernelKind
    block_structure: Optional[List[np.ndarray]] = None

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def subset(self, indices: Sequence[int]) -> "KernelMatrix":
        indices = np.asarray(indices, dtype=np.int64)
        blocks = None
        if self.block_structure is not None:
            position = np.full(self.n, -1, dtype=np.int64)
            position[indices] = np.arange(len(indices))
            blocks = [position[b][position[b] >= 0] for b in self.block_structure]
            blocks = [np.sort(b) for b in blocks if len(b)]
        return KernelMatrix(self.values[np.ix_(indices, indices)], self.kind, blocks)

    def is_symmetric(self) -> bool:
        scale = max(1.0, float(np.abs(self.values).max(initial=0.0)))
        return bool(np.allclose(self.values, self.values.T, rtol=0, atol=SYMMETRY_RTOL * scale))


def identity_kernel(n: int) -> KernelMatrix:
    return KernelMatrix(np.eye(n), KernelKind.IDENTITY, [np.arange(n)] if n else [])


# ---------------------------------------------------------------------------
# Pedigree kernels
# ---------------------------------------------------------------------------

def _kinship_recursion(ped: Pedigree) -> np.ndarray:
    fathers, mothers = ped.parent_arrays()
    n = ped.size
    phi = np.zeros((n, n))
    # members are parents-before-children, so j < i is never a descendant of i
    for i in range(n):
        f, m = fathers[i], mothers[i]
        if f < 0:
            phi[i, i] = 0.5
            continue
        phi[i, i] = 0.5 + 0.5 * phi[m, f]
        row = 0.5 * (phi[m, :i] + phi[f, :i])
        phi[i, :i] = row
        phi[:i, i] = row
    return phi


def theoretical_kinship(ped: Pedigree) -> KernelMatrix:
    """Pedigree kinship coefficients by dynamic programming in topological order"""
    return KernelMatrix(_kinship_recursion(ped), KernelKind.THEORETICAL_KINSHIP, [np.arange(ped.size)])


def x_linked_kinship(ped: Pedigree) -> KernelMatrix:
    """
    X-chromosome kinship; males carry one X, so a male's self-kinship is 1
    and his X-kinship with anyone equals that of his mother
    """
    fathers, mothers = ped.parent_arrays()
    sexes = ped.sexes()
    n = ped.size
    phi = np.zeros((n, n))
    for i in range(n):
        f, m = fathers[i], mothers[i]
        male = sexes[i] == Sex.MALE
        if f < 0:
            phi[i, i] = 1.0 if male else 0.5
            continue
        if male:
            phi[i, i] = 1.0
            row = phi[m, :i].copy()
        else:
            phi[i, i] = 0.5 * (1.0 + phi[m, f])
            row = 0.5 * (phi[m, :i] + phi[f, :i])
        phi[i, :i] = row
        phi[:i, i] = row
    return KernelMatrix(phi, KernelKind.X_KINSHIP, [np.arange(n)])


def delta7(ped: Pedigree) -> KernelMatrix:
    """
    Condensed identity coefficient delta7 for non-inbred pedigrees

    Raises:
        UnsupportedStructureError: when any member is inbred
    """
    phi = _kinship_recursion(ped)
    inbred = np.flatnonzero(np.abs(np.diag(phi) - 0.5) > 1e-12)
    if len(inbred):
        names = ", ".join(ped.individuals[i].person_id for i in inbred[:5])
        raise UnsupportedStructureError(
            f"Pedigree {ped.pedigree_id} is inbred ({names}); delta7 needs general identity coefficients"
        )
    fathers, mothers = ped.parent_arrays()
    n = ped.size
    d7 = np.eye(n)
    non_founders = np.flatnonzero(fathers >= 0)
    if len(non_founders) > 1:
        f = fathers[non_founders]
        m = mothers[non_founders]
        block = (phi[np.ix_(m, m)] * phi[np.ix_(f, f)] + phi[np.ix_(m, f)] * phi[np.ix_(f, m)])
        np.fill_diagonal(block, 1.0)
        d7[np.ix_(non_founders, non_founders)] = block
    return KernelMatrix(d7, KernelKind.DELTA7, [np.arange(n)])


def _household_values(households: Sequence[Optional[Hashable]]) -> np.ndarray:
    n = len(households)
    h = np.eye(n)
    groups = {}
    for i, hid in enumerate(households):
        if hid is not None:
            groups.setdefault(hid, []).append(i)
    for members in groups.values():
        if len(members) > 1:
            h[np.ix_(members, members)] = 1.0
    return h


def household_matrix(peds: Sequence[Pedigree]) -> KernelMatrix:
    """
    h_ij = 1 when i and j share a household id, whichever pedigrees they belong to

    Members are concatenated in pedigree order.
    """
    households = [p.household_id for ped in peds for p in ped.individuals]
    return KernelMatrix(_household_values(households), KernelKind.HOUSEHOLD)


def linked_blocks(blocks: Sequence[np.ndarray], kernels: Sequence[np.ndarray]) -> List[List[int]]:
    """
    Group person blocks that a nonzero kernel entry links across block boundaries

    Args:
        blocks: Partition of the kernel rows (e.g. pedigrees)
        kernels: n x n kernel values

    Returns:
        Lists of block indices, one per connected component, ordered by first block
    """
    if not blocks:
        return []
    n = sum(len(b) for b in blocks)
    block_of = np.full(n, -1, dtype=np.int64)
    for b, rows in enumerate(blocks):
        block_of[np.asarray(rows, dtype=np.int64)] = b
    left, right = [], []
    for values in kernels:
        i, j = np.nonzero(values)
        bi, bj = block_of[i], block_of[j]
        cross = bi != bj
        left.append(bi[cross])
        right.append(bj[cross])
    left = np.concatenate(left) if left else np.zeros(0, dtype=np.int64)
    right = np.concatenate(right) if right else np.zeros(0, dtype=np.int64)
    graph = coo_matrix((np.ones(len(left)), (left, right)), shape=(len(blocks), len(blocks)))
    _, labels = connected_components(graph, directed=False)
    groups: Dict[int, List[int]] = {}
    for b, label in enumerate(labels):
        groups.setdefault(int(label), []).append(b)
    merged = [g for g in groups.values() if len(g) > 1]
    if merged:
        logger.debug(f"{sum(len(g) for g in merged)} blocks are linked by off-block kernel entries; "
                     f"joined into {len(merged)}")
    return list(groups.values())


# ---------------------------------------------------------------------------
# SNP-based kernels
# ---------------------------------------------------------------------------

def _allele_frequencies(codes: np.ndarray):
    observed = codes != MISSING_CODE
    calls = observed.sum(axis=1)
    sums = np.where(observed, codes, 0).sum(axis=1)
    with np.errstate(invalid='ignore', divide='ignore'):
        p = sums / (2.0 * calls)
    polymorphic = (calls > 0) & (p > 0) & (p < 1)
    return p, observed, polymorphic


def _snp_blocks(G: GenotypeMatrix, subset: Optional[np.ndarray], block_size: int):
    if subset is None:
        indices = np.arange(G.m)
    else:
        subset = np.asarray(subset)
        indices = np.flatnonzero(subset) if subset.dtype == bool else subset
    return [indices[s:s + block_size] for s in range(0, len(indices), block_size)]


def _grm_block(G: GenotypeMatrix, rows: np.ndarray):
    codes = _block_codes(G, rows)
    p, observed, polymorphic = _allele_frequencies(codes)
    codes, observed, p = codes[polymorphic], observed[polymorphic], p[polymorphic]
    if len(p) == 0:
        return None, 0
    centered = np.where(observed, codes - 2.0 * p[:, None], 0.0)
    z = centered / np.sqrt(4.0 * p * (1.0 - p))[:, None]
    return z.T @ z, len(p)


def _block_codes(G: GenotypeMatrix, rows: np.ndarray) -> np.ndarray:
    if rows[-1] - rows[0] == len(rows) - 1:
        return G.codes(rows[0], rows[-1] + 1)
    return G.select_snps(rows).codes()


def project_psd(values: np.ndarray, label: str = "kernel") -> np.ndarray:
    """Clip negative eigenvalues at zero when the smallest is below -1e-8"""
    eigenvalues, vectors = la.eigh(values)
    if eigenvalues[0] >= -PSD_TOLERANCE:
        return values
    logger.warning(f"Projecting {label} to positive semidefinite (smallest eigenvalue {eigenvalues[0]:.3g})")
    clipped = (vectors * np.clip(eigenvalues, 0.0, None)) @ vectors.T
    return 0.5 * (clipped + clipped.T)


def grm_kinship(G: GenotypeMatrix, subset: Optional[np.ndarray] = None,
                block_size: int = DEFAULT_BLOCK_SIZE, threads: int = 1) -> KernelMatrix:
    """
    Genetic relationship matrix on the kinship scale

    Missing genotypes are mean-imputed (their centered value is zero);
    monomorphic SNPs are skipped.
    """
    blocks = _snp_blocks(G, subset, block_size)
    parts = map_ordered(lambda rows: _grm_block(G, rows), blocks, threads=threads,
                        desc="GRM", unit="block")
    total = np.zeros((G.n, G.n))
    used = 0
    for part, count in parts:
        if part is not None:
            total += part
            used += count
    if used == 0:
        raise DegenerateInputError("Every SNP is monomorphic; the GRM is undefined")
    logger.info(f"GRM kinship from {used} polymorphic SNPs on {G.n} individuals")
    values = project_psd(total / used, "GRM kinship")
    return KernelMatrix(values, KernelKind.GRM_KINSHIP, [np.arange(G.n)])


def _mom_block(G: GenotypeMatrix, rows: np.ndarray):
    codes = _block_codes(G, rows)
    p, observed, polymorphic = _allele_frequencies(codes)
    codes, observed, p = codes[polymorphic], observed[polymorphic], p[polymorphic]
    if len(p) == 0:
        return None
    obs = observed.astype(np.float64)
    a = np.where(observed, codes, 0).astype(np.float64)
    b = np.where(observed, 2.0 - codes, 0.0)
    matches = 0.25 * (a.T @ a + b.T @ b)
    both = obs.T @ obs
    expected = (obs * (p ** 2 + (1.0 - p) ** 2)[:, None]).T @ obs
    return matches, both, expected, len(p)


def mom_kinship(G: GenotypeMatrix, subset: Optional[np.ndarray] = None,
                block_size: int = DEFAULT_BLOCK_SIZE, threads: int = 1) -> KernelMatrix:
    """
    Method-of-moments kinship from allele matching

    Each pair uses only SNPs where both genotypes are observed.
    """
    blocks = _snp_blocks(G, subset, block_size)
    parts = [p for p in map_ordered(lambda rows: _mom_block(G, rows), blocks, threads=threads,
                                    desc="MoM", unit="block") if p is not None]
    if not parts:
        raise DegenerateInputError("Every SNP is monomorphic; method-of-moments kinship is undefined")
    matches = sum(p[0] for p in parts)
    both = sum(p[1] for p in parts)
    expected = sum(p[2] for p in parts)
    denominator = both - expected
    if np.any(denominator <= 0):
        raise DegenerateInputError("Method-of-moments denominator is not positive for some pairs (too few shared SNPs)")
    values = (matches - expected) / denominator
    logger.info(f"Method-of-moments kinship from {sum(p[3] for p in parts)} polymorphic SNPs on {G.n} individuals")
    values = project_psd(0.5 * (values + values.T), "MoM kinship")
    return KernelMatrix(values, KernelKind.MOM_KINSHIP, [np.arange(G.n)])


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def assemble_global_kernel(parts: Sequence[KernelMatrix], mode: str = "within_pedigree") -> KernelMatrix:
    """
    Combine kernels into one n x n matrix

    Args:
        parts: Per-pedigree kernels (within_pedigree) or a single dense kernel (global)
        mode: 'within_pedigree' for a block-diagonal matrix, 'global' for one dense block
    """
    if mode == "global":
        if len(parts) != 1:
            raise ValueError("global mode takes exactly one kernel")
        kernel = parts[0]
        return KernelMatrix(kernel.values, kernel.kind, [np.arange(kernel.n)])
    sizes = [p.n for p in parts]
    values = la.block_diag(*[p.values for p in parts]) if parts else np.zeros((0, 0))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    blocks = [np.arange(offsets[k], offsets[k + 1]) for k in range(len(parts))]
    kind = parts[0].kind if parts else KernelKind.THEORETICAL_KINSHIP
    return KernelMatrix(values, kind, blocks)


def _pedigree_subsets(analysis: AnalysisSet):
    """(pedigree, member indices) for every pedigree with analyzed members"""
    for rows in analysis.blocks():
        pedigree_index = int(analysis.members[rows[0], 0])
        yield analysis.pedigrees[pedigree_index], analysis.members[rows, 1]


def pedigree_kernel(analysis: AnalysisSet, builder) -> KernelMatrix:
    """Apply a per-pedigree kernel builder and restrict it to analyzed members"""
    parts = [builder(ped).subset(members) for ped, members in _pedigree_subsets(analysis)]
    return assemble_global_kernel(parts)


def build_additive_kernel(mode: str, analysis: AnalysisSet, genotypes: Optional[GenotypeMatrix] = None,
                          block_size: int = DEFAULT_BLOCK_SIZE, threads: int = 1) -> KernelMatrix:
    """
    Additive kinship for the analyzed individuals

    Args:
        mode: One of theoretical, grm_within_pedigree, grm_global, mom_global
        analysis: Joined analysis set
        genotypes: Genotypes aligned with the analysis set (defaults to analysis.genotypes)
    """
    if mode == "theoretical":
        return pedigree_kernel(analysis, theoretical_kinship)
    genotypes = genotypes if genotypes is not None else analysis.genotypes
    if genotypes is None:
        raise DegenerateInputError(f"kinship_mode {mode} needs genotypes")
    if mode == "grm_within_pedigree":
        dense = grm_kinship(genotypes, block_size=block_size, threads=threads)
        blocks = analysis.blocks()
        parts = [KernelMatrix(project_psd(dense.values[np.ix_(b, b)], "within-pedigree GRM"),
                              KernelKind.GRM_KINSHIP) for b in blocks]
        return assemble_global_kernel(parts)
    if mode == "grm_global":
        return assemble_global_kernel([grm_kinship(genotypes, block_size=block_size, threads=threads)], "global")
    if mode == "mom_global":
        return assemble_global_kernel([mom_kinship(genotypes, block_size=block_size, threads=threads)], "global")
    raise ValueError(f"Unknown kinship mode {mode}; expected one of {', '.join(KINSHIP_MODES)}")


def build_household_kernel(analysis: AnalysisSet) -> KernelMatrix:
    """
    Shared-household indicator for the analyzed individuals

    A household may span pedigrees; the block structure then joins the
    pedigrees it links.
    """
    households = [analysis.pedigrees[p].individuals[i].household_id for p, i in analysis.members]
    values = _household_values(households)
    blocks = analysis.blocks()
    joined = [np.sort(np.concatenate([blocks[b] for b in group])) for group in linked_blocks(blocks, [values])]
    return KernelMatrix(values, KernelKind.HOUSEHOLD, joined)


def export_kernel(kernel: KernelMatrix, ids: Sequence[str], path: str) -> None:
    """Write the lower triangle (diagonal included) as id1, id2, value"""
    rows, cols = np.tril_indices(kernel.n)
    with open(path, 'w') as f:
        f.write("id1\tid2\tvalue\n")
        for i, j in zip(rows, cols):
            f.write(f"{ids[i]}\t{ids[j]}\t{kernel.values[i, j]:.10g}\n")
    logger.info(f"Wrote {kernel.kind.value} kernel ({kernel.n} individuals) to {path}")
