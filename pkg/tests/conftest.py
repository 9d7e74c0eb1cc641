import os
import textwrap
from dataclasses import dataclass
from typing import Dict, List

import numpy as np
import pandas as pd
import pytest

from pedqtl.genio import (
    GenotypeMatrix,
    Pedigree,
    SnpInfo,
    join_samples,
    read_genotype_prefixes,
    read_pedigree_csv,
    read_traits_csv,
    write_genotypes_bed,
)
from pedqtl.simulate import SimSpec, gene_drop, make_rng, simulate_traits

PEDIGREE_HEADER = "PedigreeID,PersonID,Father,Mother,Sex,Household\n"

TRIO = """\
F1,FA,0,0,M,
F1,MO,0,0,F,
F1,C,FA,MO,F,
"""

SIB_PAIR = """\
S1,SFA,0,0,M,h1
S1,SMO,0,0,F,h1
S1,S1,SFA,SMO,M,h1
S1,S2,SFA,SMO,F,h2
"""

FULL_SIB_MATING = """\
I1,A,0,0,M,
I1,B,0,0,F,
I1,C,A,B,M,
I1,D,A,B,F,
I1,E,C,D,F,
"""

DOUBLE_FIRST_COUSINS = """\
D1,A,0,0,M,
D1,B,0,0,F,
D1,C,A,B,M,
D1,D,A,B,F,
D1,E,0,0,M,
D1,F,0,0,F,
D1,G,E,F,M,
D1,H,E,F,F,
D1,I,C,H,F,
D1,J,G,D,M,
"""

THREE_GENERATIONS = """\
G1,GF1,0,0,M,
G1,GM1,0,0,F,
G1,GF2,0,0,M,
G1,GM2,0,0,F,
G1,P1,GF1,GM1,M,
G1,P2,GF2,GM2,F,
G1,U1,GF1,GM1,F,
G1,K1,P1,P2,M,
G1,K2,P1,P2,F,
G1,K3,P1,P2,F,
"""


def write_text(path, text: str) -> str:
    with open(path, 'w') as f:
        f.write(textwrap.dedent(text))
    return str(path)


def pedigrees_from_rows(directory, rows: str, name: str = "pedigree.csv") -> List[Pedigree]:
    return read_pedigree_csv(write_text(os.path.join(directory, name), PEDIGREE_HEADER + rows))


def nuclear_family_rows(families: int, children: int = 2, prefix: str = "F") -> str:
    """Founder couples with `children` offspring each, one household per family"""
    lines = []
    for f in range(families):
        ped = f"{prefix}{f + 1}"
        father, mother = f"{ped}_fa", f"{ped}_mo"
        lines.append(f"{ped},{father},0,0,M,{ped}h")
        lines.append(f"{ped},{mother},0,0,F,{ped}h")
        for c in range(children):
            sex = "M" if c % 2 == 0 else "F"
            lines.append(f"{ped},{ped}_c{c + 1},{father},{mother},{sex},{ped}h")
    return "\n".join(lines) + "\n"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def make_pedigrees(tmp_path):
    def make(rows: str, name: str = "pedigree.csv") -> List[Pedigree]:
        return pedigrees_from_rows(tmp_path, rows, name)
    return make


@dataclass
class StudyFiles:
    directory: str
    pedigree: str
    phenotypes: str
    genotype_prefix: str
    pedigrees: List[Pedigree]
    genotypes: GenotypeMatrix
    traits: pd.DataFrame
    trait_names: List[str]
    causal_snp: str


def _study_snps(m: int) -> List[SnpInfo]:
    snps = []
    for s in range(m):
        chromosome = "1" if s < m // 2 else "2"
        snps.append(SnpInfo(f"rs{s + 1}", chromosome, 10_000 * (s + 1), "A", "G"))
    return snps


def build_study(directory: str, families: int = 25, m: int = 60, seed: int = 7) -> StudyFiles:
    """
    Nuclear families with simulated genotypes and three correlated traits

    SNP rs1 carries an effect on t1 and t2; rs2 is monomorphic and rs3 is rare.
    """
    pedigrees = pedigrees_from_rows(directory, nuclear_family_rows(families))
    maf = np.linspace(0.1, 0.5, m)
    maf[1] = 0.0
    maf[2] = 0.004
    rng = make_rng(seed, (0,))
    codes = np.concatenate([gene_drop(ped, maf, rng) for ped in pedigrees], axis=1)
    ids = [pid for ped in pedigrees for pid in ped.person_ids]
    genotypes = GenotypeMatrix.from_codes(_study_snps(m), codes, ids)

    sigma_a = np.array([[0.4, 0.2, 0.1], [0.2, 0.4, 0.1], [0.1, 0.1, 0.3]])
    sigma_e = np.array([[0.5, 0.1, 0.0], [0.1, 0.5, 0.0], [0.0, 0.0, 0.6]])
    spec = SimSpec(
        pedigrees=tuple(pedigrees), founder_maf=maf,
        sigmas={'additive': sigma_a, 'environment': sigma_e},
        effects=((0, (1.0, 0.8, 0.0)),), intercept=(10.0, 5.0, 0.0),
        trait_names=("t1", "t2", "t3"), seed=seed,
    )
    traits = simulate_traits(spec, codes, make_rng(seed, (1, 0)))
    frame = pd.DataFrame(traits.values, columns=list(traits.trait_names))
    frame.insert(0, "id", ids)
    frame["sex"] = [0.0 if pid.endswith(("_fa", "_c1")) else 1.0 for pid in ids]
    frame["age"] = make_rng(seed, (2,)).normal(40.0, 10.0, size=len(ids)).round(1)
    frame.loc[3, "t2"] = np.nan

    phenotypes = os.path.join(directory, "phenotypes.csv")
    frame.to_csv(phenotypes, index=False, na_rep="NA")
    prefix = os.path.join(directory, "study")
    write_genotypes_bed(genotypes, f"{prefix}.bed", f"{prefix}.bim", f"{prefix}.fam")
    return StudyFiles(
        directory=str(directory), pedigree=os.path.join(directory, "pedigree.csv"), phenotypes=phenotypes,
        genotype_prefix=prefix, pedigrees=pedigrees, genotypes=genotypes, traits=frame,
        trait_names=["t1", "t2", "t3"], causal_snp="rs1",
    )


@pytest.fixture(scope="session")
def study(tmp_path_factory) -> StudyFiles:
    return build_study(str(tmp_path_factory.mktemp("study")))


def control_text(study: StudyFiles, output_dir: str, **extra: str) -> str:
    values: Dict[str, str] = {
        'pedigree_file': study.pedigree,
        'genotype_file': study.genotype_prefix,
        'phenotype_file': study.phenotypes,
        'id_column': "id",
        'traits': "t1, t2",
        'covariates': "sex",
        'maf_min': "0.01",
        'top_k': "3",
        'threads': "2",
        'block_size': "16",
        'output_dir': output_dir,
    }
    values.update(extra)
    return "".join(f"{key} = {value}\n" for key, value in values.items() if value is not None)


def study_analysis(study: StudyFiles, traits=("t1", "t2"), covariates=("sex",)):
    """Analysis set of the simulated study with genotypes attached"""
    table = read_traits_csv(study.phenotypes, list(traits), list(covariates), id_col="id")
    genotypes = read_genotype_prefixes([study.genotype_prefix], study.pedigrees)
    return join_samples(study.pedigrees, table, genotypes)
