"""
Input parsing: pedigree and phenotype CSV files, PLINK bed/bim/fam genotypes,
and the join that lines individuals up across all three.
"""

import os
import heapq
import logging
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Dict, FrozenSet, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import (
    FormatError,
    JoinError,
    LengthError,
    ParseError,
    SchemaError,
    StructuralError,
)

logger = logging.getLogger(__name__)

PEDIGREE_COLUMNS = ["PedigreeID", "PersonID", "Father", "Mother", "Sex", "Household"]
MISSING_PARENT = {"", "0", "NA", "."}
MISSING_VALUE = {"", "NA"}

BED_MAGIC = bytes([0x6C, 0x1B])
BED_SNP_MAJOR = 0x01
MISSING_CODE = -1
X_CHROMOSOMES = {"X", "23", "CHRX", "XY", "25"}


class Sex(IntEnum):
    MALE = 1
    FEMALE = 2


SEX_CODES = {
    "m": Sex.MALE, "male": Sex.MALE, "1": Sex.MALE,
    "f": Sex.FEMALE, "female": Sex.FEMALE, "2": Sex.FEMALE,
}


# ---------------------------------------------------------------------------
# Pedigrees
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PersonRecord:
    person_id: str
    father: Optional[int]
    mother: Optional[int]
    sex: Sex
    household_id: Optional[str] = None

    @property
    def is_founder(self) -> bool:
        return self.father is None


@dataclass(frozen=True)
class Pedigree:
    """Members are stored parents-before-children; parent fields index into individuals"""
    pedigree_id: str
    individuals: Tuple[PersonRecord, ...]
    founder_set: FrozenSet[int]

    @property
    def size(self) -> int:
        return len(self.individuals)

    @property
    def person_ids(self) -> List[str]:
        return [p.person_id for p in self.individuals]

    def index_of(self, person_id: str) -> int:
        for i, person in enumerate(self.individuals):
            if person.person_id == person_id:
                return i
        raise KeyError(person_id)

    def parent_arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        """Father and mother indices with -1 for founders"""
        fathers = np.array([-1 if p.father is None else p.father for p in self.individuals], dtype=np.int64)
        mothers = np.array([-1 if p.mother is None else p.mother for p in self.individuals], dtype=np.int64)
        return fathers, mothers

    def sexes(self) -> np.ndarray:
        return np.array([int(p.sex) for p in self.individuals], dtype=np.int8)


def _find_cycle(remaining: List[int], parents: Dict[int, Tuple[Optional[int], Optional[int]]],
                ids: List[str]) -> List[str]:
    remaining_set = set(remaining)
    node = remaining[0]
    path: List[int] = []
    seen: Dict[int, int] = {}
    while node not in seen:
        seen[node] = len(path)
        path.append(node)
        father, mother = parents[node]
        node = father if father in remaining_set else mother
    cycle = path[seen[node]:] + [node]
    return [ids[i] for i in cycle]


def _build_pedigree(pedigree_id: str, rows: List[Dict[str, str]]) -> Pedigree:
    ids = [row["PersonID"] for row in rows]
    position = {pid: i for i, pid in enumerate(ids)}

    sexes: List[Sex] = []
    parents: Dict[int, Tuple[Optional[int], Optional[int]]] = {}
    for i, row in enumerate(rows):
        sex_code = row["Sex"].strip().lower()
        if sex_code not in SEX_CODES:
            raise StructuralError(f"Person {ids[i]} in pedigree {pedigree_id} has unknown sex '{row['Sex']}'")
        sexes.append(SEX_CODES[sex_code])

        father_id, mother_id = row["Father"], row["Mother"]
        father_missing = father_id in MISSING_PARENT
        mother_missing = mother_id in MISSING_PARENT
        if father_missing != mother_missing:
            raise StructuralError(f"Person {ids[i]} in pedigree {pedigree_id} must list both parents or neither")
        if father_missing:
            parents[i] = (None, None)
            continue
        for role, parent_id in (("father", father_id), ("mother", mother_id)):
            if parent_id not in position:
                raise StructuralError(
                    f"Person {ids[i]} in pedigree {pedigree_id}: {role} {parent_id} is not a member of the pedigree"
                )
        parents[i] = (position[father_id], position[mother_id])

    # Kahn's algorithm, releasing the earliest file row first for a stable order
    children: Dict[int, List[int]] = {i: [] for i in range(len(rows))}
    pending = [0] * len(rows)
    for child, (father, mother) in parents.items():
        for parent in (father, mother):
            if parent is not None:
                children[parent].append(child)
                pending[child] += 1
    heap = [i for i in range(len(rows)) if pending[i] == 0]
    heapq.heapify(heap)
    order: List[int] = []
    while heap:
        node = heapq.heappop(heap)
        order.append(node)
        for child in children[node]:
            pending[child] -= 1
            if pending[child] == 0:
                heapq.heappush(heap, child)
    if len(order) < len(rows):
        remaining = [i for i in range(len(rows)) if i not in set(order)]
        cycle = _find_cycle(remaining, parents, ids)
        raise StructuralError(f"Pedigree {pedigree_id} contains a cycle: {' -> '.join(cycle)}")

    for child, (father, mother) in parents.items():
        if father is not None and sexes[father] != Sex.MALE:
            raise StructuralError(
                f"Person {ids[father]} is recorded as father of {ids[child]} but sex is female"
            )
        if mother is not None and sexes[mother] != Sex.FEMALE:
            raise StructuralError(
                f"Person {ids[mother]} is recorded as mother of {ids[child]} but sex is male"
            )

    new_index = {old: new for new, old in enumerate(order)}
    individuals = []
    for old in order:
        father, mother = parents[old]
        household = rows[old].get("Household", "").strip()
        individuals.append(PersonRecord(
            person_id=ids[old],
            father=None if father is None else new_index[father],
            mother=None if mother is None else new_index[mother],
            sex=sexes[old],
            household_id=household or None,
        ))
    founders = frozenset(i for i, p in enumerate(individuals) if p.is_founder)
    return Pedigree(pedigree_id=pedigree_id, individuals=tuple(individuals), founder_set=founders)


def _read_text_table(path: str, what: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise SchemaError(f"{what} file not found: {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError as e:
        raise SchemaError(f"{what} file is empty: {path}") from e
    frame.columns = [str(c).strip() for c in frame.columns]
    return frame.apply(lambda column: column.str.strip())


def read_pedigree_csv(path: str) -> List[Pedigree]:
    """
    Parse a pedigree CSV into validated, topologically ordered pedigrees

    Args:
        path: CSV with header PedigreeID, PersonID, Father, Mother, Sex, Household

    Returns:
        Pedigrees in order of first appearance; rows with an empty
        PedigreeID become singleton pedigrees named after the person
    """
    frame = _read_text_table(path, "Pedigree")
    if "Household" not in frame.columns:
        frame["Household"] = ""
    absent = [c for c in PEDIGREE_COLUMNS if c not in frame.columns]
    if absent:
        raise SchemaError(f"Pedigree file {path} lacks columns: {', '.join(absent)}")
    if frame.empty:
        raise SchemaError(f"Pedigree file {path} has no rows")

    groups: Dict[str, List[Dict[str, str]]] = {}
    seen_ids: Dict[str, str] = {}
    for record in frame[PEDIGREE_COLUMNS].to_dict("records"):
        person_id = record["PersonID"]
        if not person_id:
            raise StructuralError(f"Pedigree file {path} has a row with an empty PersonID")
        pedigree_id = record["PedigreeID"] or person_id
        if person_id in seen_ids:
            raise StructuralError(
                f"Person {person_id} appears twice (pedigrees {seen_ids[person_id]} and {pedigree_id})"
            )
        seen_ids[person_id] = pedigree_id
        groups.setdefault(pedigree_id, []).append(record)

    pedigrees = [_build_pedigree(pid, rows) for pid, rows in groups.items()]
    sizes = [p.size for p in pedigrees]
    logger.info(f"Read {len(pedigrees)} pedigrees with {sum(sizes)} members from {path} (largest {max(sizes)})")
    return pedigrees


# ---------------------------------------------------------------------------
# Genotypes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SnpInfo:
    name: str
    chromosome: str
    base_pair: int
    allele1: str
    allele2: str
    is_x_linked: bool = False


def _decode_table() -> np.ndarray:
    # 2-bit PLINK code -> copies of allele1
    mapping = np.array([2, MISSING_CODE, 1, 0], dtype=np.int8)
    table = np.empty((256, 4), dtype=np.int8)
    for byte in range(256):
        for k in range(4):
            table[byte, k] = mapping[(byte >> (2 * k)) & 0b11]
    return table


_DECODE = _decode_table()
_ENCODE = {2: 0b00, MISSING_CODE: 0b01, 1: 0b10, 0: 0b11}


def pack_codes(codes: np.ndarray) -> np.ndarray:
    """Pack (m, n) codes in {0, 1, 2, -1} into PLINK SNP-major bytes"""
    codes = np.asarray(codes, dtype=np.int8)
    m, n = codes.shape
    width = (n + 3) // 4
    bits = np.zeros((m, width * 4), dtype=np.uint8)
    for code, value in _ENCODE.items():
        bits[:, :n][codes == code] = value
    bits = bits.reshape(m, width, 4)
    return (bits[:, :, 0] | (bits[:, :, 1] << 2) | (bits[:, :, 2] << 4) | (bits[:, :, 3] << 6)).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class GenotypeMatrix:
    """SNP-major 2-bit packed genotypes; one packed row per SNP"""
    snps: Tuple[SnpInfo, ...]
    packed: np.ndarray
    sample_ids: Tuple[str, ...]

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    @property
    def m(self) -> int:
        return len(self.snps)

    @classmethod
    def from_codes(cls, snps: Sequence[SnpInfo], codes: np.ndarray, sample_ids: Sequence[str]) -> "GenotypeMatrix":
        codes = np.asarray(codes)
        if codes.shape != (len(snps), len(sample_ids)):
            raise FormatError(f"Code matrix shape {codes.shape} does not match {len(snps)} SNPs x {len(sample_ids)} samples")
        return cls(snps=tuple(snps), packed=pack_codes(codes), sample_ids=tuple(sample_ids))

    def codes(self, start: int = 0, stop: Optional[int] = None) -> np.ndarray:
        """Decoded (k, n) int8 codes for SNP rows start:stop, -1 = missing"""
        rows = np.asarray(self.packed[start:stop])
        return _DECODE[rows].reshape(rows.shape[0], rows.shape[1] * 4)[:, :self.n]

    def iter_blocks(self, block_size: int) -> Iterator[Tuple[int, np.ndarray]]:
        for start in range(0, self.m, block_size):
            yield start, self.codes(start, min(start + block_size, self.m))

    def block_starts(self, block_size: int) -> List[int]:
        return list(range(0, self.m, block_size))

    def select_snps(self, keep: np.ndarray) -> "GenotypeMatrix":
        keep = np.asarray(keep)
        indices = np.flatnonzero(keep) if keep.dtype == bool else keep
        return GenotypeMatrix(
            snps=tuple(self.snps[i] for i in indices),
            packed=np.ascontiguousarray(self.packed[indices]),
            sample_ids=self.sample_ids,
        )

    def select_individuals(self, sample_ids: Sequence[str], block_size: int = 65536) -> "GenotypeMatrix":
        """Reorder to sample_ids; IDs without genotypes get all-missing columns"""
        position = {sid: i for i, sid in enumerate(self.sample_ids)}
        source = np.array([position.get(sid, -1) for sid in sample_ids], dtype=np.int64)
        absent = source < 0
        width = (len(sample_ids) + 3) // 4
        packed = np.empty((self.m, width), dtype=np.uint8)
        for start, block in self.iter_blocks(block_size):
            selected = block[:, np.where(absent, 0, source)]
            selected[:, absent] = MISSING_CODE
            packed[start:start + block.shape[0]] = pack_codes(selected)
        return GenotypeMatrix(snps=self.snps, packed=packed, sample_ids=tuple(sample_ids))


def _read_whitespace_table(path: str, columns: int, what: str) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FormatError(f"{what} file not found: {path}")
    try:
        frame = pd.read_csv(path, sep=r"\s+", header=None, dtype=str, keep_default_na=False)
    except pd.errors.EmptyDataError:
        return pd.DataFrame(columns=range(columns))
    if frame.shape[1] != columns:
        raise FormatError(f"{what} file {path} has {frame.shape[1]} columns, expected {columns}")
    return frame


def read_bim(path: str) -> List[SnpInfo]:
    frame = _read_whitespace_table(path, 6, "bim")
    snps = []
    seen = set()
    for row_number, (chromosome, name, _, bp, a1, a2) in enumerate(frame.itertuples(index=False), start=1):
        try:
            base_pair = int(bp)
        except ValueError as e:
            raise FormatError(f"bim {path} line {row_number}: base pair '{bp}' is not an integer") from e
        if base_pair <= 0:
            raise FormatError(f"bim {path} line {row_number}: base pair must be positive, got {base_pair}")
        if name in seen:
            raise FormatError(f"bim {path} line {row_number}: duplicate SNP name {name}")
        seen.add(name)
        snps.append(SnpInfo(
            name=name,
            chromosome=chromosome,
            base_pair=base_pair,
            allele1=a1,
            allele2=a2,
            is_x_linked=chromosome.upper() in X_CHROMOSOMES,
        ))
    return snps


def read_fam(path: str) -> List[str]:
    frame = _read_whitespace_table(path, 6, "fam")
    return list(frame.iloc[:, 1])


def read_genotypes_bed(bed: str, bim: str, fam: str,
                       pedigrees: Optional[Sequence[Pedigree]] = None) -> GenotypeMatrix:
    """
    Read a SNP-major PLINK fileset

    Args:
        bed, bim, fam: Paths of the fileset
        pedigrees: When given, every fam individual must be a pedigree member

    Returns:
        GenotypeMatrix backed by a read-only memory map of the bed payload
    """
    snps = read_bim(bim)
    sample_ids = read_fam(fam)
    n, m = len(sample_ids), len(snps)

    if pedigrees is not None:
        members = {pid for ped in pedigrees for pid in ped.person_ids}
        unmatched = [sid for sid in sample_ids if sid not in members]
        if unmatched:
            raise JoinError(f"{len(unmatched)} genotyped individuals in {fam} are absent from the pedigree file", unmatched)

    if not os.path.exists(bed):
        raise FormatError(f"bed file not found: {bed}")
    with open(bed, 'rb') as f:
        header = f.read(3)
    if len(header) < 3 or header[:2] != BED_MAGIC:
        raise FormatError(f"{bed} is not a PLINK bed file (bad magic bytes)")
    if header[2] != BED_SNP_MAJOR:
        orientation = "individual-major" if header[2] == 0 else f"mode {header[2]:#04x}"
        raise FormatError(f"{bed} uses unsupported {orientation} orientation; only SNP-major is read")

    width = (n + 3) // 4
    expected = m * width
    payload = os.path.getsize(bed) - 3
    if payload != expected:
        raise LengthError(
            f"{bed} payload is {payload} bytes, expected {expected} ({m} SNPs x {width} bytes)"
        )
    if expected == 0:
        packed = np.zeros((m, width), dtype=np.uint8)
    else:
        packed = np.memmap(bed, dtype=np.uint8, mode='r', offset=3, shape=(m, width))
    logger.info(f"Read genotypes for {m} SNPs on {n} individuals from {bed}")
    return GenotypeMatrix(snps=tuple(snps), packed=packed, sample_ids=tuple(sample_ids))


def read_genotype_prefixes(prefixes: Sequence[str],
                           pedigrees: Optional[Sequence[Pedigree]] = None) -> GenotypeMatrix:
    """Read one or more PLINK prefixes sharing one sample list; SNPs concatenated in order"""
    parts = [
        read_genotypes_bed(f"{p}.bed", f"{p}.bim", f"{p}.fam", pedigrees=pedigrees)
        for p in prefixes
    ]
    if len(parts) == 1:
        return parts[0]
    first = parts[0]
    for prefix, part in zip(prefixes[1:], parts[1:]):
        if part.sample_ids != first.sample_ids:
            mismatch = sorted(set(part.sample_ids) ^ set(first.sample_ids))
            raise JoinError(f"Fileset {prefix} has a different sample list than {prefixes[0]}", mismatch)
    snps = tuple(s for part in parts for s in part.snps)
    names = [s.name for s in snps]
    if len(set(names)) != len(names):
        raise FormatError("SNP names are duplicated across genotype filesets")
    packed = np.concatenate([np.asarray(part.packed) for part in parts], axis=0)
    return GenotypeMatrix(snps=snps, packed=packed, sample_ids=first.sample_ids)


def write_genotypes_bed(genotypes: GenotypeMatrix, bed: str, bim: str, fam: str,
                        families: Optional[Dict[str, str]] = None) -> None:
    """Write a GenotypeMatrix as a SNP-major PLINK fileset"""
    with open(bed, 'wb') as f:
        f.write(BED_MAGIC + bytes([BED_SNP_MAJOR]))
        f.write(np.ascontiguousarray(genotypes.packed, dtype=np.uint8).tobytes())
    with open(bim, 'w') as f:
        for snp in genotypes.snps:
            f.write(f"{snp.chromosome}\t{snp.name}\t0\t{snp.base_pair}\t{snp.allele1}\t{snp.allele2}\n")
    families = families or {}
    with open(fam, 'w') as f:
        for sid in genotypes.sample_ids:
            f.write(f"{families.get(sid, sid)}\t{sid}\t0\t0\t0\t-9\n")


# ---------------------------------------------------------------------------
# Traits
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TraitTable:
    """n x T trait values and n x C covariates; NaN marks a missing cell"""
    person_ids: Tuple[str, ...]
    trait_names: Tuple[str, ...]
    covariate_names: Tuple[str, ...]
    values: np.ndarray
    covariates: np.ndarray

    @property
    def n(self) -> int:
        return len(self.person_ids)

    @property
    def trait_count(self) -> int:
        return len(self.trait_names)

    @property
    def value_mask(self) -> np.ndarray:
        return ~np.isnan(self.values)

    @property
    def covariate_mask(self) -> np.ndarray:
        return ~np.isnan(self.covariates)

    def select_rows(self, rows: Sequence[int]) -> "TraitTable":
        rows = np.asarray(rows, dtype=np.int64)
        return TraitTable(
            person_ids=tuple(self.person_ids[i] for i in rows),
            trait_names=self.trait_names,
            covariate_names=self.covariate_names,
            values=self.values[rows],
            covariates=self.covariates[rows],
        )

    def select_traits(self, names: Sequence[str]) -> "TraitTable":
        columns = [self.trait_names.index(name) for name in names]
        return TraitTable(
            person_ids=self.person_ids,
            trait_names=tuple(names),
            covariate_names=self.covariate_names,
            values=self.values[:, columns],
            covariates=self.covariates,
        )


def _parse_numeric_column(frame: pd.DataFrame, column: str, path: str) -> np.ndarray:
    cells = frame[column]
    missing = cells.isin(MISSING_VALUE)
    parsed = pd.to_numeric(cells.where(~missing), errors='coerce').to_numpy(dtype=np.float64)
    bad = (~missing.to_numpy()) & ~np.isfinite(parsed)
    if bad.any():
        row = int(np.flatnonzero(bad)[0])
        raise ParseError(
            f"{path}: value {cells.iloc[row]!r} in column {column} at row {row + 2} is not a finite number",
            row=row + 2,
            column=column,
        )
    return parsed


def read_traits_csv(path: str, trait_cols: Sequence[str], covar_cols: Sequence[str] = (),
                    id_col: Optional[str] = None) -> TraitTable:
    """
    Parse trait and covariate columns from a phenotype CSV

    Args:
        path: CSV with a header row; the first column holds person IDs unless id_col is set
        trait_cols: Trait column names (T >= 1)
        covar_cols: Covariate column names
        id_col: Name of the person ID column

    Returns:
        TraitTable with NaN for empty or NA cells
    """
    frame = _read_text_table(path, "Phenotype")
    if frame.columns.empty:
        raise SchemaError(f"Phenotype file {path} has no header")
    if not trait_cols:
        raise SchemaError("At least one trait column is required")
    id_col = id_col or frame.columns[0]
    requested = [id_col, *trait_cols, *covar_cols]
    absent = [c for c in requested if c not in frame.columns]
    if absent:
        raise SchemaError(f"Phenotype file {path} lacks columns: {', '.join(absent)}")

    person_ids = list(frame[id_col])
    duplicated = sorted(set(frame[id_col][frame[id_col].duplicated()]))
    if duplicated:
        raise SchemaError(f"Phenotype file {path} lists individuals more than once: {', '.join(duplicated[:10])}")

    n = len(frame)
    values = np.column_stack([_parse_numeric_column(frame, c, path) for c in trait_cols]) if n else np.empty((0, len(trait_cols)))
    covariates = (np.column_stack([_parse_numeric_column(frame, c, path) for c in covar_cols])
                  if covar_cols and n else np.empty((n, len(covar_cols))))
    logger.info(f"Read {len(trait_cols)} traits and {len(covar_cols)} covariates for {n} individuals from {path}")
    return TraitTable(
        person_ids=tuple(person_ids),
        trait_names=tuple(trait_cols),
        covariate_names=tuple(covar_cols),
        values=values.reshape(n, len(trait_cols)),
        covariates=covariates.reshape(n, len(covar_cols)),
    )


# ---------------------------------------------------------------------------
# Join
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AnalysisSet:
    """Analyzed individuals in pedigree order, with aligned traits and genotypes"""
    pedigrees: Tuple[Pedigree, ...]
    person_ids: Tuple[str, ...]
    members: np.ndarray
    traits: TraitTable
    genotypes: Optional[GenotypeMatrix] = None
    dropped: Dict[str, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.person_ids)

    def blocks(self) -> List[np.ndarray]:
        """Analyzed row indices grouped per pedigree, in pedigree order"""
        if self.n == 0:
            return []
        pedigree_index = self.members[:, 0]
        return [np.flatnonzero(pedigree_index == k) for k in np.unique(pedigree_index)]

    def sexes(self) -> np.ndarray:
        return np.array([int(self.pedigrees[p].individuals[i].sex) for p, i in self.members], dtype=np.int8)

    def founder_mask(self) -> np.ndarray:
        return np.array([i in self.pedigrees[p].founder_set for p, i in self.members], dtype=bool)

    def with_genotypes(self, genotypes: GenotypeMatrix) -> "AnalysisSet":
        return AnalysisSet(
            pedigrees=self.pedigrees,
            person_ids=self.person_ids,
            members=self.members,
            traits=self.traits,
            genotypes=genotypes.select_individuals(self.person_ids),
            dropped=dict(self.dropped),
        )

    def restrict(self, keep: np.ndarray, reason: str) -> "AnalysisSet":
        keep = np.asarray(keep, dtype=bool)
        dropped = dict(self.dropped)
        for pid, kept in zip(self.person_ids, keep):
            if not kept:
                dropped[pid] = reason
        rows = np.flatnonzero(keep)
        return AnalysisSet(
            pedigrees=self.pedigrees,
            person_ids=tuple(self.person_ids[i] for i in rows),
            members=self.members[rows],
            traits=self.traits.select_rows(rows),
            genotypes=None if self.genotypes is None else self.genotypes.select_individuals(
                [self.person_ids[i] for i in rows]),
            dropped=dropped,
        )


def join_samples(pedigrees: Sequence[Pedigree], traits: TraitTable,
                 genotypes: Optional[GenotypeMatrix] = None) -> AnalysisSet:
    """
    Line up pedigree members, phenotypes and genotypes

    Individuals are kept when they have at least one observed trait and every
    covariate observed. The order is pedigree file order, then the internal
    topological member order, so it depends on the input files only.
    """
    trait_row = {pid: i for i, pid in enumerate(traits.person_ids)}
    members = {pid for ped in pedigrees for pid in ped.person_ids}

    if genotypes is not None:
        unmatched = [sid for sid in genotypes.sample_ids if sid not in members]
        if unmatched:
            raise JoinError(f"{len(unmatched)} genotyped individuals are absent from the pedigree file", unmatched)

    dropped: Dict[str, str] = {}
    for pid in traits.person_ids:
        if pid not in members:
            dropped[pid] = "not_in_pedigree"

    value_mask = traits.value_mask
    covariate_mask = traits.covariate_mask
    kept_ids: List[str] = []
    kept_members: List[Tuple[int, int]] = []
    kept_rows: List[int] = []
    for p, ped in enumerate(pedigrees):
        for i, person in enumerate(ped.individuals):
            row = trait_row.get(person.person_id)
            if row is None:
                continue
            if not covariate_mask[row].all():
                dropped[person.person_id] = "missing_covariate"
                continue
            if not value_mask[row].any():
                dropped[person.person_id] = "no_trait"
                continue
            kept_ids.append(person.person_id)
            kept_members.append((p, i))
            kept_rows.append(row)

    reasons: Dict[str, int] = {}
    for reason in dropped.values():
        reasons[reason] = reasons.get(reason, 0) + 1
    for reason, count in sorted(reasons.items()):
        logger.warning(f"Dropped {count} phenotyped individuals: {reason}")
    logger.info(f"Analysis set: {len(kept_ids)} individuals in {len(pedigrees)} pedigrees")

    return AnalysisSet(
        pedigrees=tuple(pedigrees),
        person_ids=tuple(kept_ids),
        members=np.array(kept_members, dtype=np.int64).reshape(-1, 2),
        traits=traits.select_rows(kept_rows),
        genotypes=None if genotypes is None else genotypes.select_individuals(kept_ids),
        dropped=dropped,
    )
